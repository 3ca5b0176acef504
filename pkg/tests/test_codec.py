"""End-to-end codec contracts: framing arithmetic, streaming sessions,
chunking invariance, augmentation statistics, and checkpoint round trips."""

import io

import numpy as np
import pytest

from jhcodec import codec
from jhcodec.autodiff import Tensor, backward


def small_config(**kw):
    return codec.toy_config(**kw)


@pytest.fixture(scope="module")
def toy():
    cfg = small_config()
    return cfg, codec.make_codec(cfg, seed=1)


def speechlike(rng, n):
    t = np.arange(n) / 16000.0
    x = 0.3 * np.sin(2 * np.pi * 220 * t) + 0.1 * np.sin(2 * np.pi * 1300 * t)
    return (x + 0.02 * rng.standard_normal(n)).astype(np.float32)


class TestConfig:
    def test_defaults_match_deployment_point(self):
        cfg = codec.full_config()
        assert cfg.frame_rate == 50
        assert cfg.bits_per_index == 10
        assert cfg.model_dim == 1024 and cfg.num_layers == 8
        assert cfg.window == 16 and cfg.ffn_dim == 4096
        assert cfg.num_quantizers == 8 and cfg.codebook_size == 1024

    def test_codebook_power_of_two(self):
        with pytest.raises(ValueError):
            small_config(codebook_size=100)

    def test_frame_divides_rate(self):
        with pytest.raises(ValueError):
            small_config(frame_size=300)

    def test_head_split(self):
        with pytest.raises(ValueError):
            small_config(model_dim=30, heads=4)

    def test_text_round_trip(self):
        cfg = small_config(style="mimi", ssrr_weight=1.0)
        again = codec.CodecConfig.from_text(cfg.to_text())
        assert again == cfg

    def test_text_rejects_unknown_key(self):
        with pytest.raises(codec.CheckpointError):
            codec.CodecConfig.from_text("bogus=1")


class TestEncodeShape:
    def test_one_second_grid(self, toy):
        # full-rate framing on toy weights: 320-sample frames at 16 kHz
        cfg = small_config(frame_size=320, num_quantizers=8)
        params = codec.make_codec(cfg, seed=2)
        x = speechlike(np.random.default_rng(0), 16000)
        grid = codec.encode(cfg, params, x, k=8)
        assert grid.indices.shape == (50, 8)
        assert grid.frame_rate == 50
        assert grid.pad_samples == 0

    def test_partial_frame_padded_and_recorded(self, toy):
        cfg, params = toy
        length = cfg.frame_size + 10
        grid = codec.encode(cfg, params, np.ones(length, dtype=np.float32))
        assert grid.frames == 2
        assert grid.pad_samples == cfg.frame_size - 10

    def test_deterministic(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(1), 640)
        a = codec.encode(cfg, params, x)
        b = codec.encode(cfg, params, x)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_errors(self, toy):
        cfg, params = toy
        with pytest.raises(ValueError):
            codec.encode(cfg, params, np.zeros(0, dtype=np.float32))
        with pytest.raises(ValueError):
            codec.encode(cfg, params, np.ones(64, dtype=np.float32), k=0)
        with pytest.raises(ValueError):
            codec.encode(cfg, params, np.ones(64, dtype=np.float32), k=cfg.num_quantizers + 1)


class TestDecode:
    def test_round_trip_shape_and_range(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(2), cfg.frame_size * 5)
        grid = codec.encode(cfg, params, x)
        y = codec.decode(cfg, params, grid)
        assert y.shape == (cfg.frame_size * 5,)
        assert np.all(np.isfinite(y))
        assert y.min() >= -1.0 and y.max() <= 1.0

    def test_any_k_same_length(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(3), cfg.frame_size * 3)
        for k in (1, cfg.num_quantizers):
            grid = codec.encode(cfg, params, x, k=k)
            assert codec.decode(cfg, params, grid).shape == x.shape

    def test_rejects_out_of_range_index(self, toy):
        cfg, params = toy
        grid = codec.CodeGrid(np.full((2, 2), cfg.codebook_size), cfg.frame_rate)
        with pytest.raises(ValueError):
            codec.decode(cfg, params, grid)


class TestStreaming:
    def test_short_chunk_buffers(self, toy):
        cfg, params = toy
        state = codec.open_stream(cfg, params)
        out = codec.stream_encode_chunk(state, np.zeros(cfg.frame_size - 10, dtype=np.float32))
        assert out.frames == 0
        assert state.buffer.shape[0] == cfg.frame_size - 10
        assert state.frames_emitted == 0

    def test_split_feed_equals_single_feed(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(4), cfg.frame_size * 2)
        s1 = codec.open_stream(cfg, params)
        a = codec.stream_encode_chunk(s1, x[: cfg.frame_size])
        b = codec.stream_encode_chunk(s1, x[cfg.frame_size :])
        joined = np.concatenate([a.indices, b.indices])
        s2 = codec.open_stream(cfg, params)
        whole = codec.stream_encode_chunk(s2, x)
        np.testing.assert_array_equal(joined, whole.indices)

    def test_random_chunkings_match_offline(self, toy):
        cfg, params = toy
        rng = np.random.default_rng(5)
        x = speechlike(rng, cfg.frame_size * 40)
        offline = codec.encode(cfg, params, x)
        for _ in range(10):
            state = codec.open_stream(cfg, params)
            pieces, pos = [], 0
            while pos < x.size:
                step = int(rng.integers(1, 1000))
                pieces.append(codec.stream_encode_chunk(state, x[pos : pos + step]).indices)
                pos += step
            streamed = np.concatenate([p for p in pieces if p.size], axis=0)
            np.testing.assert_array_equal(streamed, offline.indices)
            assert state.buffer.shape[0] < cfg.frame_size

    def test_streaming_decode_matches_offline(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(6), cfg.frame_size * 10)
        grid = codec.encode(cfg, params, x)
        offline = codec.decode(cfg, params, grid)
        state = codec.open_stream(cfg, params)
        parts = [codec.stream_decode_chunk(state, grid.indices[i]) for i in range(grid.frames)]
        np.testing.assert_array_equal(np.concatenate(parts), offline)

    def test_zero_lookahead_end_to_end(self, toy):
        cfg, params = toy
        rng = np.random.default_rng(7)
        x = speechlike(rng, cfg.frame_size * 10)
        y = x.copy()
        y[cfg.frame_size * 5 :] = 0.5
        gx = codec.encode(cfg, params, x)
        gy = codec.encode(cfg, params, y)
        np.testing.assert_array_equal(gx.indices[:5], gy.indices[:5])
        dx = codec.decode(cfg, params, codec.CodeGrid(gx.indices[:5], cfg.frame_rate))
        dy = codec.decode(cfg, params, codec.CodeGrid(gy.indices[:5], cfg.frame_rate))
        np.testing.assert_array_equal(dx, dy)

    def test_closed_session_rejected(self, toy):
        cfg, params = toy
        state = codec.open_stream(cfg, params)
        codec.close_stream(state)
        with pytest.raises(RuntimeError):
            codec.stream_encode_chunk(state, np.zeros(10, dtype=np.float32))
        with pytest.raises(RuntimeError):
            codec.stream_decode_chunk(state, np.zeros((1, cfg.num_quantizers), dtype=int))

    def test_prefix_truncation_matches_direct_encode(self, toy):
        cfg, params = toy
        x = speechlike(np.random.default_rng(8), cfg.frame_size * 6)
        full = codec.encode(cfg, params, x, k=cfg.num_quantizers)
        direct = codec.encode(cfg, params, x, k=2)
        np.testing.assert_array_equal(codec.truncate_grid(full, 2).indices, direct.indices)

    def test_truncate_grid_validation(self, toy):
        grid = codec.CodeGrid(np.zeros((3, 2), dtype=int), 250)
        with pytest.raises(ValueError):
            codec.truncate_grid(grid, 3)


class TestNoise:
    def test_zero_probability_is_identity(self):
        cfg = small_config(noise_prob=0.0)
        x = np.ones(100, dtype=np.float32)
        out = codec.apply_input_noise(x, np.random.default_rng(0), cfg)
        np.testing.assert_array_equal(out, x)

    def test_sinusoid_branch_is_pure_tone(self):
        cfg = small_config(noise_prob=1.0)
        rng = np.random.default_rng(2)  # gate, snr, then a type draw >= 0.5: tone branch
        probe = np.random.default_rng(2)
        probe.random(), probe.uniform(20, 40)
        assert probe.random() >= 0.5
        x = speechlike(np.random.default_rng(9), 16000)
        out = codec.apply_input_noise(x, rng, cfg)
        diff = (out - x).astype(np.float64)
        mag = np.abs(np.fft.rfft(diff))
        peak = mag.max()
        assert (mag > 0.1 * peak).sum() <= 4  # single tone plus leakage
        freq = np.argmax(mag) * 16000.0 / diff.size
        assert 50.0 <= freq <= 7000.0

    def test_gaussian_branch_snr_in_band(self):
        cfg = small_config(noise_prob=1.0)
        rng = np.random.default_rng(0)
        probe = np.random.default_rng(0)
        probe.random(), probe.uniform(20, 40)
        assert probe.random() < 0.5
        x = speechlike(np.random.default_rng(10), 160000)
        out = codec.apply_input_noise(x, rng, cfg)
        noise = (out - x).astype(np.float64)
        snr_db = 10 * np.log10((x.astype(np.float64) ** 2).mean() / (noise**2).mean())
        assert 19.0 < snr_db < 41.0

    def test_branch_frequency(self):
        cfg = small_config(noise_prob=0.10)
        rng = np.random.default_rng(11)
        x = np.ones(32, dtype=np.float32)
        hits = sum(
            not np.array_equal(codec.apply_input_noise(x, rng, cfg), x) for _ in range(10_000)
        )
        assert 0.09 <= hits / 10_000 <= 0.11

    def test_silent_input_passes_through(self):
        cfg = small_config(noise_prob=1.0)
        x = np.zeros(64, dtype=np.float32)
        np.testing.assert_array_equal(codec.apply_input_noise(x, np.random.default_rng(1), cfg), x)


class TestMasking:
    def test_rate_zero_identity(self):
        emb = Tensor(np.ones((5, 4), dtype=np.float32))
        token = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
        out = codec.apply_masking(emb, 0.0, token, np.random.default_rng(0))
        assert out is emb

    def test_rate_one_all_masked(self):
        emb = Tensor(np.ones((5, 4), dtype=np.float32))
        token = Tensor(np.full(4, 7.0, dtype=np.float32), requires_grad=True)
        out = codec.apply_masking(emb, 1.0, token, np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, np.full((5, 4), 7.0, dtype=np.float32))

    def test_empirical_rate(self):
        emb = Tensor(np.ones((100_000, 2), dtype=np.float32))
        token = Tensor(np.zeros(2, dtype=np.float32))
        out = codec.apply_masking(emb, 0.10, token, np.random.default_rng(1))
        frac = (out.data[:, 0] == 0.0).mean()
        assert 0.09 <= frac <= 0.11

    def test_mask_token_learns(self):
        emb = Tensor(np.ones((50, 4), dtype=np.float32), requires_grad=True)
        token = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
        out = codec.apply_masking(emb, 0.5, token, np.random.default_rng(2))
        backward((out * out).sum())
        assert token.grad is not None and np.abs(token.grad).max() >= 0.0
        assert emb.grad is not None


class TestCheckpoint:
    def test_round_trip(self, toy, tmp_path):
        cfg, params = toy
        params.quantizer.levels[0].ema_usage[:] = 0.7  # distinctive buffer content
        path = tmp_path / "model.jhck"
        codec.save_checkpoint(path, cfg, params)
        cfg2, params2 = codec.load_checkpoint(path)
        assert cfg2 == cfg
        for a, b in zip(params.parameters(), params2.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_allclose(params2.quantizer.levels[0].ema_usage, 0.7, atol=1e-7)

        x = speechlike(np.random.default_rng(12), cfg.frame_size * 3)
        np.testing.assert_array_equal(
            codec.encode(cfg, params, x).indices, codec.encode(cfg2, params2, x).indices
        )

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.jhck"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(codec.CheckpointError):
            codec.load_checkpoint(p)

    def test_bad_version(self, toy, tmp_path):
        cfg, params = toy
        p = tmp_path / "x.jhck"
        codec.save_checkpoint(p, cfg, params)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(codec.CheckpointError):
            codec.load_checkpoint(p)

    def test_truncated_tensor(self, toy, tmp_path):
        cfg, params = toy
        p = tmp_path / "x.jhck"
        codec.save_checkpoint(p, cfg, params)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 7])
        with pytest.raises(codec.CheckpointError):
            codec.load_checkpoint(p)

    def test_section_mismatch(self, toy, tmp_path):
        cfg, params = toy
        buf = io.BytesIO()
        codec.write_sections(buf, {"rogue": np.ones(3, dtype=np.float32)})
        p = tmp_path / "x.jhck"
        codec.save_checkpoint(p, cfg, params)
        with open(p, "ab") as fh:
            fh.write(buf.getvalue())
        with pytest.raises(codec.CheckpointError):
            codec.load_checkpoint(p)
