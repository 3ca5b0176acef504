"""Analytical MAC counting plus wall-clock latency and real-time-factor
measurement over the streaming sessions.

Counting convention: one MAC is one multiply-accumulate inside a projection,
attention score/value product, FFN matmul, or codebook search (V x M per
level); softmax, norms, rotary rotations, and elementwise gates count zero.
Attention is charged at the full window per frame. Timing runs are meant for
a single thread; MAC counts are pure functions of the config.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from . import codec as codec_mod
from .codec import CodecConfig


# -- analytical MACs -------------------------------------------------------


def framer_macs(config: CodecConfig) -> int:
    """One frame through the two sample-side projections (either direction)."""
    return (
        config.frame_size * config.framer_hidden
        + config.framer_hidden * config.model_dim
    )


def block_macs(config: CodecConfig) -> int:
    c, w = config.model_dim, config.window
    qkvo = 4 * c * c
    attention = 2 * w * c  # score dot products + value aggregation, per frame
    ffn = 3 * c * config.ffn_dim  # gate, up, down
    return qkvo + attention + ffn


def rvq_macs(config: CodecConfig) -> int:
    c, m, v = config.model_dim, config.code_dim, config.codebook_size
    per_level = c * m + v * m + m * c  # project down, search, project up
    return config.num_quantizers * per_level


def macs_per_frame(config: CodecConfig) -> int:
    side = framer_macs(config) + config.num_layers * block_macs(config)
    return 2 * side + rvq_macs(config)  # encoder and decoder mirror each other


def count_macs(config: CodecConfig) -> float:
    """Giga-MACs to push one second of audio through encode plus decode."""
    return macs_per_frame(config) * config.frame_rate / 1e9


def mac_breakdown(config: CodecConfig) -> dict[str, float]:
    blocks = config.num_layers * block_macs(config)
    rate = config.frame_rate
    return {
        "framer_g": 2 * framer_macs(config) * rate / 1e9,
        "blocks_g": 2 * blocks * rate / 1e9,
        "rvq_g": rvq_macs(config) * rate / 1e9,
        "total_g": count_macs(config),
    }


# -- wall-clock measurements -------------------------------------------------


@dataclass
class LatencyReport:
    buffering_ms: float
    lookahead_ms: float
    compute_ms: float

    @property
    def total_ms(self) -> float:
        return self.buffering_ms + self.lookahead_ms + self.compute_ms


def buffering_ms(config: CodecConfig) -> float:
    return 1000.0 * config.frame_size / config.sample_rate


def measure_latency(
    config: CodecConfig,
    params: codec_mod.CodecParams,
    k: int | None = None,
    clock=time.perf_counter,
    warmup_frames: int = 3,
) -> LatencyReport:
    """Time one frame through live encode and decode sessions.

    Buffering is the exact time to fill one input frame; the causal window
    adds no lookahead; compute is measured wall-clock after a short warm-up.
    """
    enc = codec_mod.open_stream(config, params, k)
    dec = codec_mod.open_stream(config, params, k)
    rng = np.random.default_rng(0)
    n = config.frame_size
    for _ in range(warmup_frames):
        frame = rng.uniform(-0.5, 0.5, n).astype(np.float32)
        grid = codec_mod.stream_encode_chunk(enc, frame)
        codec_mod.stream_decode_chunk(dec, grid.indices)
    frame = rng.uniform(-0.5, 0.5, n).astype(np.float32)
    start = clock()
    grid = codec_mod.stream_encode_chunk(enc, frame)
    codec_mod.stream_decode_chunk(dec, grid.indices)
    elapsed_ms = (clock() - start) * 1000.0
    return LatencyReport(
        buffering_ms=buffering_ms(config),
        lookahead_ms=0.0,
        compute_ms=elapsed_ms,
    )


@dataclass
class RtfReport:
    enc: float
    dec: float

    @property
    def total(self) -> float:
        return self.enc + self.dec


def measure_rtf(
    config: CodecConfig,
    params: codec_mod.CodecParams,
    duration_s: float = 10.0,
    k: int | None = None,
    clock=time.perf_counter,
    seed: int = 0,
) -> RtfReport:
    """Wall-clock streaming time divided by audio duration, per direction."""
    if duration_s < 1.0:
        raise ValueError("measure over at least one second of audio")
    samples = int(duration_s * config.sample_rate)
    audio = np.random.default_rng(seed).uniform(-0.5, 0.5, samples).astype(np.float32)

    enc = codec_mod.open_stream(config, params, k)
    start = clock()
    grid = codec_mod.stream_encode_chunk(enc, audio)
    enc_time = clock() - start

    dec = codec_mod.open_stream(config, params, k)
    start = clock()
    codec_mod.stream_decode_chunk(dec, grid.indices)
    dec_time = clock() - start

    return RtfReport(enc=enc_time / duration_s, dec=dec_time / duration_s)


# -- combined report ---------------------------------------------------------


@dataclass
class CostReport:
    macs_g: float
    buffering_ms: float
    lookahead_ms: float
    compute_ms: float
    latency_ms: float
    rtf_enc: float
    rtf_dec: float
    rtf_total: float


def cost_report(
    config: CodecConfig,
    params: codec_mod.CodecParams | None = None,
    duration_s: float = 10.0,
    k: int | None = None,
    seed: int = 0,
) -> CostReport:
    params = params or codec_mod.make_codec(config, seed=seed)
    latency = measure_latency(config, params, k)
    rtf = measure_rtf(config, params, duration_s, k, seed=seed)
    return CostReport(
        macs_g=count_macs(config),
        buffering_ms=latency.buffering_ms,
        lookahead_ms=latency.lookahead_ms,
        compute_ms=latency.compute_ms,
        latency_ms=latency.total_ms,
        rtf_enc=rtf.enc,
        rtf_dec=rtf.dec,
        rtf_total=rtf.total,
    )


_FIELDS = [
    "macs_g", "buffering_ms", "lookahead_ms", "compute_ms",
    "latency_ms", "rtf_enc", "rtf_dec", "rtf_total",
]


def report_csv(report: CostReport) -> str:
    buf = io.StringIO()
    buf.write(",".join(_FIELDS) + "\n")
    buf.write(",".join(f"{getattr(report, f):.6g}" for f in _FIELDS) + "\n")
    return buf.getvalue()


def report_table(report: CostReport) -> str:
    rows = [
        ("MACs (G / s audio)", f"{report.macs_g:.3f}"),
        ("buffering (ms)", f"{report.buffering_ms:.3f}"),
        ("lookahead (ms)", f"{report.lookahead_ms:.3f}"),
        ("compute (ms)", f"{report.compute_ms:.3f}"),
        ("latency total (ms)", f"{report.latency_ms:.3f}"),
        ("RTF encode", f"{report.rtf_enc:.4f}"),
        ("RTF decode", f"{report.rtf_dec:.4f}"),
        ("RTF total", f"{report.rtf_total:.4f}"),
    ]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
