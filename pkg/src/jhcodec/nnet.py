"""Causal sliding-window transformer blocks and the sample/frame boundary.

The offline path runs on the autodiff tape with dense banded attention and is
what training differentiates. The streaming path steps one frame at a time
against per-layer rolling key/value caches in plain numpy; both paths share
weights and the same float32 arithmetic, so they agree to rounding error while
the streaming side sees only frames from the past (zero lookahead).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_MASK = -1e9


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, shape).astype(np.float32)


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    scale_attn: Tensor  # LayerScale gains on the attention branch
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    scale_ffn: Tensor  # LayerScale gains on the FFN branch

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    def parameters(self) -> list[Tensor]:
        return [
            self.ln1_gain, self.ln1_bias, self.wq, self.wk, self.wv, self.wo,
            self.scale_attn, self.ln2_gain, self.ln2_bias,
            self.w_gate, self.w_up, self.w_down, self.scale_ffn,
        ]


@dataclass
class FramerParams:
    """Two plain linear maps between raw sample frames and model embeddings."""

    proj1: Tensor
    bias1: Tensor
    proj2: Tensor
    bias2: Tensor

    @property
    def in_dim(self) -> int:
        return self.proj1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.proj2.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.proj1, self.bias1, self.proj2, self.bias2]


@dataclass
class LayerCache:
    """Rolling post-rotary keys and raw values for one layer of one stream."""

    keys: np.ndarray
    values: np.ndarray
    next_pos: int = 0


def make_block(model_dim: int, ffn_dim: int, heads: int, rng, layerscale_init: float = 1e-2) -> BlockParams:
    if model_dim % heads != 0:
        raise ValueError(f"model_dim {model_dim} not divisible by {heads} heads")
    if (model_dim // heads) % 2 != 0:
        raise ValueError("head dim must be even for rotary rotation")
    t = lambda arr: Tensor(arr, requires_grad=True)
    return BlockParams(
        ln1_gain=t(np.ones(model_dim, dtype=np.float32)),
        ln1_bias=t(np.zeros(model_dim, dtype=np.float32)),
        wq=t(_uniform(rng, model_dim, (model_dim, model_dim))),
        wk=t(_uniform(rng, model_dim, (model_dim, model_dim))),
        wv=t(_uniform(rng, model_dim, (model_dim, model_dim))),
        wo=t(_uniform(rng, model_dim, (model_dim, model_dim))),
        scale_attn=t(np.full(model_dim, layerscale_init, dtype=np.float32)),
        ln2_gain=t(np.ones(model_dim, dtype=np.float32)),
        ln2_bias=t(np.zeros(model_dim, dtype=np.float32)),
        w_gate=t(_uniform(rng, model_dim, (model_dim, ffn_dim))),
        w_up=t(_uniform(rng, model_dim, (model_dim, ffn_dim))),
        w_down=t(_uniform(rng, ffn_dim, (ffn_dim, model_dim))),
        scale_ffn=t(np.full(model_dim, layerscale_init, dtype=np.float32)),
    )


def make_framer(in_dim: int, hidden: int, out_dim: int, rng) -> FramerParams:
    return FramerParams(
        proj1=Tensor(_uniform(rng, in_dim, (in_dim, hidden)), requires_grad=True),
        bias1=Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
        proj2=Tensor(_uniform(rng, hidden, (hidden, out_dim)), requires_grad=True),
        bias2=Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True),
    )


def make_cache(model_dim: int) -> LayerCache:
    empty = np.zeros((0, model_dim), dtype=np.float32)
    return LayerCache(keys=empty, values=empty.copy(), next_pos=0)


# -- rotary ------------------------------------------------------------


def rotary_tables(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (..., F, head_dim) halves by per-position angles."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return ad.concat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rotate_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _band_mask(frames: int, window: int) -> np.ndarray:
    t = np.arange(frames)
    allowed = (t[None, :] <= t[:, None]) & (t[None, :] > t[:, None] - window)
    return np.where(allowed, 0.0, NEG_MASK).astype(np.float32)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    new_shape = x.shape[:-1] + (heads, x.shape[-1] // heads)
    return ad.swap_axes(ad.reshape(x, new_shape), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swap_axes(x, -3, -2)
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def sliding_causal_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    window: int,
    heads: int = 1,
    rotary_base: float = 10000.0,
    start_pos: int = 0,
) -> Tensor:
    """Banded causal attention over whole sequences (..., F, C).

    Frame t sees frames max(0, t-window+1)..t. Blocked logits get an additive
    -1e9, which underflows to an exact zero weight after softmax, so outputs
    are bit-insensitive to masked frames.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if q.shape != k.shape or k.shape != v.shape:
        raise ValueError("q, k, v must share a shape")
    frames, dim = q.shape[-2], q.shape[-1]
    head_dim = dim // heads
    cos, sin = rotary_tables(start_pos + np.arange(frames), head_dim, rotary_base)

    qh = _rotate(_split_heads(q, heads), cos, sin)
    kh = _rotate(_split_heads(k, heads), cos, sin)
    vh = _split_heads(v, heads)

    scores = ad.matmul(qh, ad.swap_axes(kh, -1, -2)) * (1.0 / np.sqrt(head_dim))
    probs = ad.softmax(scores + _band_mask(frames, window))
    return _merge_heads(ad.matmul(probs, vh))


def transformer_block(
    x: Tensor,
    p: BlockParams,
    window: int,
    heads: int,
    rotary_base: float = 10000.0,
    start_pos: int = 0,
) -> Tensor:
    """PreLN residual block: banded attention then SwiGLU, each LayerScaled."""
    if x.shape[-1] != p.model_dim:
        raise ValueError(f"expected last dim {p.model_dim}, got {x.shape[-1]}")
    h = ad.layer_norm(x) * p.ln1_gain + p.ln1_bias
    ctx = sliding_causal_attention(
        ad.matmul(h, p.wq), ad.matmul(h, p.wk), ad.matmul(h, p.wv),
        window, heads, rotary_base, start_pos,
    )
    x = x + p.scale_attn * ad.matmul(ctx, p.wo)
    h2 = ad.layer_norm(x) * p.ln2_gain + p.ln2_bias
    gated = ad.silu(ad.matmul(h2, p.w_gate)) * ad.matmul(h2, p.w_up)
    return x + p.scale_ffn * ad.matmul(gated, p.w_down)


def stack_forward(
    blocks: list[BlockParams],
    x: Tensor,
    window: int,
    heads: int,
    rotary_base: float = 10000.0,
) -> Tensor:
    for p in blocks:
        x = transformer_block(x, p, window, heads, rotary_base)
    return x


# -- streaming ---------------------------------------------------------


def block_step(
    frame: np.ndarray,
    p: BlockParams,
    cache: LayerCache,
    window: int,
    heads: int,
    rotary_base: float = 10000.0,
) -> np.ndarray:
    """One frame through one block, mutating the cache. Pure numpy, no tape."""
    x = frame.astype(np.float32, copy=False)
    dim = p.model_dim
    head_dim = dim // heads
    pos = cache.next_pos
    cos, sin = rotary_tables(np.array([pos]), head_dim, rotary_base)

    mu = x.mean()
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean() + 1e-5)
    h = (xc * inv) * p.ln1_gain.data + p.ln1_bias.data

    q = (h @ p.wq.data).reshape(heads, 1, head_dim)
    k_new = (h @ p.wk.data).reshape(heads, 1, head_dim)
    q = _rotate_np(q, cos, sin)
    k_new = _rotate_np(k_new, cos, sin)
    v_new = h @ p.wv.data

    keys = np.concatenate([cache.keys, k_new.reshape(1, dim)], axis=0)[-window:]
    values = np.concatenate([cache.values, v_new.reshape(1, dim)], axis=0)[-window:]
    cache.keys, cache.values, cache.next_pos = keys, values, pos + 1

    kh = keys.reshape(-1, heads, head_dim).transpose(1, 0, 2)
    vh = values.reshape(-1, heads, head_dim).transpose(1, 0, 2)
    scores = (q @ kh.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(head_dim))
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = (probs @ vh).transpose(1, 0, 2).reshape(dim)

    x = x + p.scale_attn.data * (ctx @ p.wo.data)

    mu2 = x.mean()
    xc2 = x - mu2
    inv2 = 1.0 / np.sqrt((xc2 * xc2).mean() + 1e-5)
    h2 = (xc2 * inv2) * p.ln2_gain.data + p.ln2_bias.data
    a = h2 @ p.w_gate.data
    gated = (a / (1.0 + np.exp(-a))) * (h2 @ p.w_up.data)
    return x + p.scale_ffn.data * (gated @ p.w_down.data)


def stack_step(
    blocks: list[BlockParams],
    frame: np.ndarray,
    caches: list[LayerCache],
    window: int,
    heads: int,
    rotary_base: float = 10000.0,
) -> np.ndarray:
    """One frame in, one frame out, across the whole stack."""
    if len(caches) != len(blocks):
        raise ValueError(f"{len(blocks)} blocks but {len(caches)} caches")
    positions = {c.next_pos for c in caches}
    if len(positions) != 1:
        raise ValueError(f"caches out of sync: positions {sorted(positions)}")
    out = frame
    for p, cache in zip(blocks, caches):
        out = block_step(out, p, cache, window, heads, rotary_base)
    return out


# -- sample/frame boundary ----------------------------------------------


def frame_reshape(samples: Tensor, framer: FramerParams) -> Tensor:
    """(..., T) samples into (..., T/N, C) embeddings via the linear stack."""
    samples = ad.as_tensor(samples)
    t = samples.shape[-1]
    n = framer.in_dim
    if t == 0:
        raise ValueError("empty input")
    if t % n != 0:
        raise ValueError(f"length {t} not a multiple of frame size {n}")
    frames = ad.reshape(samples, samples.shape[:-1] + (t // n, n))
    hidden = ad.matmul(frames, framer.proj1) + framer.bias1
    return ad.matmul(hidden, framer.proj2) + framer.bias2


def deframe(x: Tensor, deframer: FramerParams) -> Tensor:
    """(..., F, C) embeddings back to (..., F*N) samples, mirroring the framer."""
    hidden = ad.matmul(x, deframer.proj1) + deframer.bias1
    frames = ad.matmul(hidden, deframer.proj2) + deframer.bias2
    f, n = frames.shape[-2], frames.shape[-1]
    return ad.reshape(frames, frames.shape[:-2] + (f * n,))


def frame_step(samples: np.ndarray, framer: FramerParams) -> np.ndarray:
    """Single frame of raw samples to one embedding row, numpy path."""
    h = samples.astype(np.float32, copy=False) @ framer.proj1.data + framer.bias1.data
    return h @ framer.proj2.data + framer.bias2.data


def deframe_step(frame: np.ndarray, deframer: FramerParams) -> np.ndarray:
    h = frame.astype(np.float32, copy=False) @ deframer.proj1.data + deframer.bias1.data
    return h @ deframer.proj2.data + deframer.bias2.data
