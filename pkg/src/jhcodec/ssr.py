"""Frozen causal feature extractors and feature-space distillation.

The extractor reuses the codec encoder layout (framer plus a causal block
stack), so its features live in the same embedding space the codec produces.
A seeded random-weight extractor stands in for a pretrained model at desk
scale; a student of the same shape is distilled against it with a cosine
objective. Extractors are frozen after creation or training and are pure
functions of their input from then on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import codec as codec_mod
from . import losses, nnet, train
from .autodiff import Tensor

EXTRACTOR_MAGIC = b"JHSW"
EXTRACTOR_VERSION = 1


@dataclass
class FeatureExtractor:
    config: codec_mod.CodecConfig
    framer: nnet.FramerParams
    blocks: list[nnet.BlockParams]
    frozen: bool = True
    seed: int = 0

    def parameters(self) -> list[Tensor]:
        out = list(
            getattr(self.framer, n) for n in ("proj1", "bias1", "proj2", "bias2")
        )
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    def __call__(self, samples) -> Tensor:
        """(..., T) samples to (..., F, C) features, on the autodiff tape.

        Frozen extractors still run on the tape: their own parameters carry
        no gradient, but gradients flow through them into the input.
        """
        x = nnet.frame_reshape(ad.as_tensor(samples), self.framer)
        cfg = self.config
        return nnet.stack_forward(self.blocks, x, cfg.window, cfg.heads, cfg.rotary_base)


def make_feature_extractor(
    config: codec_mod.CodecConfig, seed: int = 0, frozen: bool = True
) -> FeatureExtractor:
    rng = np.random.default_rng(seed)
    framer = nnet.make_framer(config.frame_size, config.framer_hidden, config.model_dim, rng)
    blocks = [
        nnet.make_block(config.model_dim, config.ffn_dim, config.heads, rng, config.layerscale_init)
        for _ in range(config.num_layers)
    ]
    phi = FeatureExtractor(config=config, framer=framer, blocks=blocks, frozen=False, seed=seed)
    if frozen:
        freeze(phi)
    else:
        for p in phi.parameters():
            p.requires_grad = True
    return phi


def freeze(phi: FeatureExtractor) -> FeatureExtractor:
    for p in phi.parameters():
        p.requires_grad = False
        p.grad = None
    phi.frozen = True
    return phi


def clone_extractor(phi: FeatureExtractor, frozen: bool = True) -> FeatureExtractor:
    out = make_feature_extractor(phi.config, seed=phi.seed, frozen=False)
    for dst, src in zip(out.parameters(), phi.parameters()):
        dst.data = src.data.copy()
    if frozen:
        freeze(out)
    return out


def make_surrogate_teacher(
    seed: int = 42, config: codec_mod.CodecConfig | None = None
) -> FeatureExtractor:
    """Seeded random-weight stand-in for a pretrained feature model."""
    return make_feature_extractor(config or codec_mod.toy_config(), seed=seed, frozen=True)


def _pad_to_frames(samples: np.ndarray, frame: int) -> np.ndarray:
    extra = (-samples.shape[-1]) % frame
    if extra:
        samples = np.concatenate([samples, np.zeros(samples.shape[:-1] + (extra,), np.float32)], axis=-1)
    return samples


def phi_forward(phi: FeatureExtractor, samples, sample_rate: int = 16000) -> np.ndarray:
    """Inference path: validated rate, trailing partial frame zero-padded."""
    if sample_rate != phi.config.sample_rate:
        raise ValueError(f"extractor expects {phi.config.sample_rate} Hz, got {sample_rate}")
    samples = np.asarray(samples, dtype=np.float32)
    if samples.size == 0:
        raise ValueError("empty input")
    samples = _pad_to_frames(samples, phi.config.frame_size)
    with ad.no_grad():
        return phi(Tensor(samples)).data


def phi_stream(phi: FeatureExtractor, samples, sample_rate: int = 16000) -> np.ndarray:
    """Frame-at-a-time path with per-layer caches; zero lookahead."""
    if sample_rate != phi.config.sample_rate:
        raise ValueError(f"extractor expects {phi.config.sample_rate} Hz, got {sample_rate}")
    samples = _pad_to_frames(np.asarray(samples, dtype=np.float32), phi.config.frame_size)
    cfg = phi.config
    caches = [nnet.make_cache(cfg.model_dim) for _ in phi.blocks]
    rows = []
    for start in range(0, samples.shape[-1], cfg.frame_size):
        frame = samples[start : start + cfg.frame_size]
        emb = nnet.frame_step(frame, phi.framer)
        rows.append(nnet.stack_step(phi.blocks, emb, caches, cfg.window, cfg.heads, cfg.rotary_base))
    return np.stack(rows)


# -- persistence ---------------------------------------------------------


def named_extractor_tensors(phi: FeatureExtractor) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in ("proj1", "bias1", "proj2", "bias2"):
        out[f"framer.{name}"] = getattr(phi.framer, name).data
    block_fields = [f.name for f in dataclasses.fields(nnet.BlockParams)]
    for i, b in enumerate(phi.blocks):
        for name in block_fields:
            out[f"blk.{i}.{name}"] = getattr(b, name).data
    return out


def extractor_checksum(phi: FeatureExtractor) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(named_extractor_tensors(phi).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def save_extractor(path, phi: FeatureExtractor) -> None:
    blob = phi.config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EXTRACTOR_MAGIC)
        fh.write(struct.pack("<H", EXTRACTOR_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        codec_mod.write_sections(fh, named_extractor_tensors(phi))


def load_extractor(path) -> FeatureExtractor:
    with open(path, "rb") as fh:
        if fh.read(4) != EXTRACTOR_MAGIC:
            raise codec_mod.CheckpointError("not an extractor checkpoint (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != EXTRACTOR_VERSION:
            raise codec_mod.CheckpointError(f"unsupported extractor version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = codec_mod.CodecConfig.from_text(fh.read(blob_len).decode("utf-8"))
        sections = codec_mod.read_sections(fh)
    phi = make_feature_extractor(config, seed=0, frozen=False)
    expected = named_extractor_tensors(phi)
    if set(sections) != set(expected):
        raise codec_mod.CheckpointError("extractor section mismatch")
    targets = {}
    for name in ("proj1", "bias1", "proj2", "bias2"):
        targets[f"framer.{name}"] = getattr(phi.framer, name)
    for i, b in enumerate(phi.blocks):
        for f in dataclasses.fields(nnet.BlockParams):
            targets[f"blk.{i}.{f.name}"] = getattr(b, f.name)
    for name, arr in sections.items():
        if tuple(arr.shape) != targets[name].data.shape:
            raise codec_mod.CheckpointError(f"shape mismatch for {name!r}")
        targets[name].data = arr.astype(np.float32)
    return freeze(phi)


# -- distillation ----------------------------------------------------------


def mean_cosine_similarity(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> float:
    """Mean over rows of the cosine between matched feature vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dot = (a * b).sum(axis=-1)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return float((dot / (na * nb + eps)).mean())


def extractor_agreement(
    a: FeatureExtractor, b: FeatureExtractor, dataset: train.SyntheticDataset, clip_ids
) -> float:
    sims = []
    for cid in clip_ids:
        clip = dataset.clip(cid)
        sims.append(mean_cosine_similarity(phi_forward(a, clip), phi_forward(b, clip)))
    return float(np.mean(sims))


def distill_student(
    teacher: FeatureExtractor,
    student_config: codec_mod.CodecConfig,
    dataset: train.SyntheticDataset,
    steps: int,
    plan: train.TrainPlan | None = None,
    initial_student: FeatureExtractor | None = None,
) -> tuple[FeatureExtractor, list[float]]:
    """Train a fresh extractor to match the teacher's features, then freeze it.

    The cosine objective only needs the two feature grids to share a shape,
    so teacher and student must agree on frame size and width.
    """
    if not teacher.frozen:
        raise ValueError("teacher must be frozen before distillation")
    if (
        student_config.frame_size != teacher.config.frame_size
        or student_config.model_dim != teacher.config.model_dim
    ):
        raise ValueError("student must match the teacher's frame size and width")
    plan = plan or train.TrainPlan(
        steps=steps, batch=8, lr=1e-3, warm_start_steps=0, mask_start=0, mask_end=0, seed=0
    )
    if initial_student is not None:
        student = clone_extractor(initial_student, frozen=False)
    else:
        student = make_feature_extractor(student_config, seed=plan.seed + 1, frozen=False)
    params = student.parameters()
    opt = train.init_adamw(params)
    rng = np.random.default_rng(plan.seed)
    target_feats: dict[int, np.ndarray] = {}
    history: list[float] = []

    for step in range(steps):
        clip_ids = [int(i) for i in rng.integers(0, dataset.size, plan.batch)]
        for cid in clip_ids:
            if cid not in target_feats:
                with ad.no_grad():
                    target_feats[cid] = teacher(Tensor(dataset.clip(cid))).data
        batch = dataset.batch(clip_ids)
        want = np.stack([target_feats[cid] for cid in clip_ids])
        got = student(Tensor(batch))
        loss = losses.cosine_distill_loss(got, Tensor(want))
        if not np.isfinite(loss.data):
            raise train.TrainDivergence(f"non-finite distillation loss at step {step}")
        for p in params:
            p.zero_grad()
        ad.backward(loss)
        train.adamw_step(params, opt, plan)
        history.append(loss.item())

    return freeze(student), history
