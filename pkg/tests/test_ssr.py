import numpy as np
import pytest

from jhcodec import codec, ssr, train
from jhcodec.autodiff import Tensor


def small_config(**overrides):
    base = dict(model_dim=16, ffn_dim=32, heads=2, framer_hidden=24,
                num_quantizers=2, codebook_size=8, code_dim=4,
                num_layers=2, window=4)
    base.update(overrides)
    return codec.toy_config(**base)


@pytest.fixture(scope="module")
def teacher():
    return ssr.make_surrogate_teacher(seed=42, config=small_config())


# -- extractor behavior -----------------------------------------------------


def test_forward_shape_and_determinism(teacher):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 640).astype(np.float32)
    a = ssr.phi_forward(teacher, x)
    b = ssr.phi_forward(teacher, x)
    assert a.shape == (10, 16)
    assert np.array_equal(a, b)


def test_forward_output_width_matches_config(teacher):
    x = np.zeros(128, dtype=np.float32)
    assert ssr.phi_forward(teacher, x).shape[-1] == teacher.config.model_dim


def test_forward_rejects_wrong_rate(teacher):
    with pytest.raises(ValueError, match="Hz"):
        ssr.phi_forward(teacher, np.zeros(128, dtype=np.float32), sample_rate=44100)
    with pytest.raises(ValueError):
        ssr.phi_forward(teacher, np.array([], dtype=np.float32))


def test_forward_pads_partial_frame(teacher):
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 100).astype(np.float32)
    feats = ssr.phi_forward(teacher, x)
    padded = np.concatenate([x, np.zeros(28, dtype=np.float32)])
    assert feats.shape == (2, 16)
    assert np.array_equal(feats, ssr.phi_forward(teacher, padded))


def test_causality_future_perturbation(teacher):
    rng = np.random.default_rng(2)
    x = rng.uniform(-0.5, 0.5, 640).astype(np.float32)
    y = x.copy()
    y[320:] += rng.uniform(0.1, 0.5, 320).astype(np.float32)
    fa = ssr.phi_forward(teacher, x)
    fb = ssr.phi_forward(teacher, y)
    assert np.array_equal(fa[:5], fb[:5])
    assert not np.array_equal(fa[5:], fb[5:])


def test_stream_matches_offline(teacher):
    x = np.random.default_rng(3).uniform(-0.8, 0.8, 64 * 30).astype(np.float32)
    offline = ssr.phi_forward(teacher, x)
    streamed = ssr.phi_stream(teacher, x)
    assert streamed.shape == offline.shape
    assert np.max(np.abs(streamed - offline)) <= 1e-5


def test_stream_rejects_wrong_rate(teacher):
    with pytest.raises(ValueError, match="Hz"):
        ssr.phi_stream(teacher, np.zeros(64, dtype=np.float32), sample_rate=8000)


def test_call_runs_on_tape_with_frozen_params(teacher):
    x = Tensor(np.random.default_rng(4).uniform(-0.5, 0.5, 128).astype(np.float32),
               requires_grad=True)
    feats = teacher(x)
    feats.abs().mean().backward()
    assert x.grad is not None
    assert all(p.grad is None for p in teacher.parameters())


def test_batched_call_matches_per_clip(teacher):
    rng = np.random.default_rng(5)
    clips = rng.uniform(-0.5, 0.5, (3, 256)).astype(np.float32)
    batched = teacher(Tensor(clips)).data
    for i in range(3):
        single = teacher(Tensor(clips[i])).data
        assert np.allclose(batched[i], single, atol=1e-6)


# -- surrogate teacher ------------------------------------------------------


def test_teacher_seed_checksum_reproducible():
    a = ssr.make_surrogate_teacher(seed=42, config=small_config())
    b = ssr.make_surrogate_teacher(seed=42, config=small_config())
    assert ssr.extractor_checksum(a) == ssr.extractor_checksum(b)


def test_different_seeds_give_different_features():
    a = ssr.make_surrogate_teacher(seed=1, config=small_config())
    b = ssr.make_surrogate_teacher(seed=2, config=small_config())
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 256).astype(np.float32)
    assert not np.array_equal(ssr.phi_forward(a, x), ssr.phi_forward(b, x))


def test_teacher_is_frozen(teacher):
    assert teacher.frozen
    assert all(not p.requires_grad for p in teacher.parameters())


def test_no_dead_feature_dims(teacher):
    ds = train.SyntheticDataset(seed=0, clip_samples=512, size=16)
    feats = np.concatenate([ssr.phi_forward(teacher, ds.clip(i)) for i in range(16)])
    variance = feats.var(axis=0)
    assert variance.shape == (16,)
    assert np.all(variance > 0.0)


# -- persistence -------------------------------------------------------------


def test_extractor_checkpoint_round_trip(tmp_path, teacher):
    path = tmp_path / "phi.jhsw"
    ssr.save_extractor(path, teacher)
    loaded = ssr.load_extractor(path)
    assert loaded.frozen
    assert ssr.extractor_checksum(loaded) == ssr.extractor_checksum(teacher)
    x = np.random.default_rng(6).uniform(-0.5, 0.5, 192).astype(np.float32)
    assert np.array_equal(ssr.phi_forward(loaded, x), ssr.phi_forward(teacher, x))


def test_extractor_checkpoint_magic_guard(tmp_path, teacher):
    path = tmp_path / "phi.jhsw"
    ssr.save_extractor(path, teacher)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(codec.CheckpointError, match="magic"):
        ssr.load_extractor(path)


def test_codec_checkpoint_is_not_an_extractor(tmp_path):
    config = small_config()
    path = tmp_path / "model.jhck"
    codec.save_checkpoint(path, config, codec.make_codec(config, seed=0))
    with pytest.raises(codec.CheckpointError):
        ssr.load_extractor(path)


# -- distillation -------------------------------------------------------------


def test_identical_copy_has_unit_cosine(teacher):
    ds = train.SyntheticDataset(seed=1, clip_samples=256, size=4)
    clone = ssr.clone_extractor(teacher)
    sim = ssr.extractor_agreement(teacher, clone, ds, range(4))
    assert sim == pytest.approx(1.0, abs=1e-6)
    _, history = ssr.distill_student(
        teacher, teacher.config, ds, steps=1, initial_student=teacher
    )
    assert history[0] < 1e-5


def test_distill_requires_frozen_teacher():
    phi = ssr.make_feature_extractor(small_config(), seed=0, frozen=False)
    ds = train.SyntheticDataset(seed=0, clip_samples=256, size=4)
    with pytest.raises(ValueError, match="frozen"):
        ssr.distill_student(phi, small_config(), ds, steps=1)


def test_distill_rejects_shape_mismatch(teacher):
    ds = train.SyntheticDataset(seed=0, clip_samples=256, size=4)
    with pytest.raises(ValueError, match="frame size"):
        ssr.distill_student(teacher, small_config(model_dim=32, framer_hidden=48), ds, steps=1)


def test_distill_short_run_improves_loss(teacher):
    ds = train.SyntheticDataset(seed=2, clip_samples=256, size=8)
    student, history = ssr.distill_student(teacher, teacher.config, ds, steps=40)
    assert student.frozen
    assert len(history) == 40
    assert history[-1] < history[0]


def test_distill_never_mutates_teacher(teacher):
    before = ssr.extractor_checksum(teacher)
    ds = train.SyntheticDataset(seed=3, clip_samples=256, size=4)
    ssr.distill_student(teacher, teacher.config, ds, steps=5)
    assert ssr.extractor_checksum(teacher) == before


def test_distill_deterministic(teacher):
    ds = train.SyntheticDataset(seed=4, clip_samples=256, size=4)
    s1, h1 = ssr.distill_student(teacher, teacher.config, ds, steps=5)
    s2, h2 = ssr.distill_student(teacher, teacher.config, ds, steps=5)
    assert h1 == h2
    assert ssr.extractor_checksum(s1) == ssr.extractor_checksum(s2)


def test_mean_cosine_helper():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert ssr.mean_cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-6)
    assert ssr.mean_cosine_similarity(a, -a) == pytest.approx(-1.0, abs=1e-6)
    b = np.array([[0.0, 1.0], [2.0, 0.0]])
    assert ssr.mean_cosine_similarity(a, b) == pytest.approx(0.0, abs=1e-6)
