"""Residual vector quantization with low-rank code projections.

Each level projects its input down to a small code dimension, snaps to the
nearest codebook entry, and projects back up. Two topologies are supported:
a plain residual chain ("dac"), and a split ("mimi") where a single semantic
VQ and a residual acoustic chain both quantize the encoder output and their
reconstructions are summed. Gradients cross the discrete lookup via the
straight-through estimator; the exact Jacobian this induces for the chain
topology is available in closed form as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EMA_DECAY = 0.99
EXPIRE_BELOW = 0.90

STYLES = ("dac", "mimi")


@dataclass
class VqLevel:
    w_in: Tensor  # (input_dim, code_dim)
    w_out: Tensor  # (code_dim, input_dim)
    codebook: Tensor  # (num_entries, code_dim)
    ema_usage: np.ndarray  # (num_entries,)

    @property
    def num_entries(self) -> int:
        return self.codebook.shape[0]

    @property
    def code_dim(self) -> int:
        return self.codebook.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_in, self.w_out, self.codebook]


@dataclass
class QuantizerState:
    """`levels` is the residual chain; mimi style adds one standalone VQ."""

    levels: list[VqLevel]
    style: str = "dac"
    semantic_level: VqLevel | None = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"unknown quantizer style {self.style!r}")
        if (self.style == "mimi") != (self.semantic_level is not None):
            raise ValueError("semantic level present iff style is mimi")

    @property
    def total_levels(self) -> int:
        return len(self.levels) + (1 if self.semantic_level else 0)

    def active_levels(self, k: int) -> list[VqLevel]:
        """Levels in index-column order for a dropout depth of k."""
        if self.semantic_level is not None:
            return [self.semantic_level] + self.levels[: k - 1]
        return self.levels[:k]

    def parameters(self) -> list[Tensor]:
        out = []
        if self.semantic_level is not None:
            out.extend(self.semantic_level.parameters())
        for lv in self.levels:
            out.extend(lv.parameters())
        return out


@dataclass
class QuantizeResult:
    z_k: Tensor  # (..., input_dim) summed reconstruction
    indices: np.ndarray  # (..., k) chosen entries per level
    residuals: list[Tensor]  # chain inputs r_1..r_{n+1}, r_1 = encoder output
    projected_residuals: list[Tensor]  # (..., code_dim) per active level
    codes: list[Tensor] = field(default_factory=list)  # codebook rows per level
    level_outputs: list[Tensor] = field(default_factory=list)  # per-level recon


def make_quantizer(
    input_dim: int,
    code_dim: int,
    codebook_size: int,
    num_levels: int,
    style: str = "dac",
    rng: np.random.Generator | None = None,
) -> QuantizerState:
    rng = rng or np.random.default_rng(0)
    if code_dim >= input_dim:
        raise ValueError("code_dim must be smaller than input_dim")

    def level():
        a_in = 1.0 / np.sqrt(input_dim)
        a_out = 1.0 / np.sqrt(code_dim)
        return VqLevel(
            w_in=Tensor(rng.uniform(-a_in, a_in, (input_dim, code_dim)), requires_grad=True),
            w_out=Tensor(rng.uniform(-a_out, a_out, (code_dim, input_dim)), requires_grad=True),
            codebook=Tensor(rng.uniform(-a_out, a_out, (codebook_size, code_dim)), requires_grad=True),
            ema_usage=np.ones(codebook_size, dtype=np.float64),
        )

    if style == "mimi":
        if num_levels < 1:
            raise ValueError("mimi style needs at least the semantic level")
        semantic = level()
        chain = [level() for _ in range(num_levels - 1)]
        return QuantizerState(levels=chain, style="mimi", semantic_level=semantic)
    return QuantizerState(levels=[level() for _ in range(num_levels)], style="dac")


def _nearest(codebook: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Argmin of squared Euclidean distance; ties go to the lowest index."""
    dist = ((proj[..., None, :] - codebook) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=-1)


def vq_lookup(level: VqLevel, r) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry for each input row, after down-projection."""
    r = np.asarray(r, dtype=np.float32)
    ad.assert_finite(r, "vq_lookup input")
    squeeze = r.ndim == 1
    rows = r[None] if squeeze else r
    proj = rows @ level.w_in.data
    idx = _nearest(level.codebook.data, proj)
    recon = level.codebook.data[idx] @ level.w_out.data
    if squeeze:
        return idx[0], recon[0]
    return idx, recon


def _quantize_level(level: VqLevel, r: Tensor):
    """One level's pass: returns (indices, code rows, projection, reconstruction)."""
    proj = ad.matmul(r, level.w_in)
    idx = _nearest(level.codebook.data, proj.data)
    code = ad.embedding(level.codebook, idx)
    passthrough = ad.ste_quantize(proj, code.data)
    recon = ad.matmul(passthrough, level.w_out)
    return idx, code, proj, recon


def rvq_quantize(state: QuantizerState, z_e: Tensor, k: int) -> QuantizeResult:
    """Quantize with the first k levels; later levels are dropped entirely.

    The summed reconstruction accumulates level outputs in ascending order so
    repeated calls are bit-reproducible and prefixes telescope exactly.
    """
    if not 1 <= k <= state.total_levels:
        raise ValueError(f"k={k} outside [1, {state.total_levels}]")
    z_e = ad.as_tensor(z_e)

    idx_cols: list[np.ndarray] = []
    codes: list[Tensor] = []
    projections: list[Tensor] = []
    outputs: list[Tensor] = []

    total: Tensor | None = None
    if state.semantic_level is not None:
        idx, code, proj, recon = _quantize_level(state.semantic_level, z_e)
        idx_cols.append(idx)
        codes.append(code)
        projections.append(proj)
        outputs.append(recon)
        total = recon
        chain_depth = k - 1
    else:
        chain_depth = k

    residuals: list[Tensor] = [z_e]
    r = z_e
    for level in state.levels[:chain_depth]:
        idx, code, proj, recon = _quantize_level(level, r)
        idx_cols.append(idx)
        codes.append(code)
        projections.append(proj)
        outputs.append(recon)
        total = recon if total is None else total + recon
        r = r - recon
        residuals.append(r)

    assert total is not None
    indices = np.stack(idx_cols, axis=-1)
    return QuantizeResult(
        z_k=total,
        indices=indices,
        residuals=residuals,
        projected_residuals=projections,
        codes=codes,
        level_outputs=outputs,
    )


def decode_codes(state: QuantizerState, indices: np.ndarray) -> np.ndarray:
    """Reconstruct the summed embedding from stored indices alone."""
    indices = np.asarray(indices)
    k = indices.shape[-1]
    levels = state.active_levels(k)
    if len(levels) != k:
        raise ValueError(f"{k} index columns but only {state.total_levels} levels")
    total = None
    for col, level in enumerate(levels):
        idx = indices[..., col]
        if idx.min() < 0 or idx.max() >= level.num_entries:
            raise ValueError("code index out of range for its codebook")
        recon = (level.codebook.data[idx] @ level.w_out.data).astype(np.float32)
        total = recon if total is None else total + recon
    return total


def ste_jacobian_closed_form(state: QuantizerState, k: int) -> np.ndarray:
    """Exact gradient map the straight-through chain induces, as a matrix G.

    For a row-vector cotangent u = d(loss)/d(z_k), the chain backward pass
    computes d(loss)/d(z_e) = u @ G with

        G = sum_i W_out_i^T W_in_i^T prod_{j<i} (I - W_out_j^T W_in_j^T)

    where the product multiplies j = i-1 down to 1 left to right. Only the
    chain topology has this form; the split style is rejected.
    """
    if state.style != "dac":
        raise ValueError("closed-form Jacobian is defined for the dac chain only")
    if not 1 <= k <= state.total_levels:
        raise ValueError(f"k={k} outside [1, {state.total_levels}]")
    dim = state.levels[0].w_in.shape[0]
    eye = np.eye(dim, dtype=np.float32)
    carried = eye  # prod over processed levels, transposed residual propagator
    total = np.zeros((dim, dim), dtype=np.float32)
    for level in state.levels[:k]:
        term = level.w_out.data.T @ level.w_in.data.T
        total = total + term @ carried
        carried = (eye - term) @ carried
    return total


def vq_losses(result: QuantizeResult) -> tuple[Tensor, Tensor]:
    """Codebook and commitment losses, summed over levels, mean over frames.

    The codebook loss stops gradients into the projections, the commitment
    loss stops gradients into the codebook, so each side only pulls its own
    parameters toward the other.
    """
    l_vq: Tensor | None = None
    l_commit: Tensor | None = None
    for proj, code in zip(result.projected_residuals, result.codes):
        d_vq = proj.detach() - code
        d_cm = proj - code.detach()
        term_vq = (d_vq * d_vq).sum(axis=-1).mean()
        term_cm = (d_cm * d_cm).sum(axis=-1).mean()
        l_vq = term_vq if l_vq is None else l_vq + term_vq
        l_commit = term_cm if l_commit is None else l_commit + term_cm
    assert l_vq is not None and l_commit is not None
    return l_vq, l_commit


def usage_update(state: QuantizerState, indices: np.ndarray) -> None:
    """EMA of per-entry assignment rates, scaled so uniform usage sits at 1.0.

    Only the levels that produced index columns are updated; levels dropped
    from the batch keep their usage untouched.
    """
    indices = np.asarray(indices)
    k = indices.shape[-1]
    levels = state.active_levels(k)
    flat = indices.reshape(-1, k)
    total = flat.shape[0]
    for col, level in enumerate(levels):
        counts = np.bincount(flat[:, col], minlength=level.num_entries).astype(np.float64)
        normalized = counts * (level.num_entries / total)
        level.ema_usage = EMA_DECAY * level.ema_usage + (1.0 - EMA_DECAY) * normalized


def expire_and_reinit(state: QuantizerState, batch_latents, rng: np.random.Generator) -> int:
    """Replace under-used entries with projections of fresh batch vectors.

    `batch_latents` is either one (n, input_dim) array shared by all levels or
    a per-level list aligned with `active_levels(total_levels)`; the training
    loop passes each level the residuals it actually quantized.
    """
    levels = state.active_levels(state.total_levels)
    if isinstance(batch_latents, (list, tuple)):
        if len(batch_latents) != len(levels):
            raise ValueError("per-level latents must match the number of levels")
        per_level = [np.asarray(b, dtype=np.float32) for b in batch_latents]
    else:
        shared = np.asarray(batch_latents, dtype=np.float32)
        per_level = [shared] * len(levels)

    expired = 0
    for level, latents in zip(levels, per_level):
        stale = np.flatnonzero(level.ema_usage < EXPIRE_BELOW)
        if stale.size == 0:
            continue
        flat = latents.reshape(-1, latents.shape[-1])
        if flat.shape[0] == 0:
            raise ValueError("cannot reinit expired codes from an empty batch")
        picks = rng.integers(0, flat.shape[0], size=stale.size)
        fresh = flat[picks] @ level.w_in.data
        level.codebook.data[stale] = fresh
        level.ema_usage[stale] = 1.0
        expired += int(stale.size)
    return expired


def seed_codebooks(state: QuantizerState, latents, rng: np.random.Generator) -> None:
    """Initialize every codebook from projected batch vectors, chained so each
    chain level samples the residual left by the already-seeded levels."""
    latents = np.asarray(latents, dtype=np.float32).reshape(-1, state.levels[0].w_in.shape[0]) \
        if state.levels else np.asarray(latents, dtype=np.float32).reshape(-1, state.semantic_level.w_in.shape[0])

    def seed(level: VqLevel, source: np.ndarray) -> None:
        proj = source @ level.w_in.data
        picks = rng.integers(0, proj.shape[0], size=level.num_entries)
        level.codebook.data[:] = proj[picks]
        level.ema_usage[:] = 1.0

    if state.semantic_level is not None:
        seed(state.semantic_level, latents)
    r = latents
    for level in state.levels:
        seed(level, r)
        idx = _nearest(level.codebook.data, r @ level.w_in.data)
        r = r - level.codebook.data[idx] @ level.w_out.data
