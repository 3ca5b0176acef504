"""Training objectives: multi-scale log-mel L1, feature-space reconstruction
(mean-abs distance in a frozen extractor's space), cosine distillation, and
the weighted total. Adversarial terms are out of scope by design.

Spectrogram pieces (Hann window, DFT matrices, mel triangle bank) are built
once per scale and cached; the forward path is frame + matmul + sqrt, so the
whole loss is differentiable through the shared tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_OFFSET = 1e-5
MAG_TINY = 1e-20
COS_EPS = 1e-8

DEFAULT_FFT_SIZES = (64, 128, 256, 512, 1024, 2048)
DEFAULT_MEL_BINS = (8, 16, 32, 64, 80, 128)


@dataclass
class MelScale:
    fft_size: int
    hop: int
    mel_bins: int
    sample_rate: int
    window: np.ndarray
    dft_cos: np.ndarray  # (fft, fft/2+1)
    dft_sin: np.ndarray
    filterbank: np.ndarray  # (fft/2+1, mel_bins)
    center_freqs: np.ndarray


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, mel_bins: int):
    n_freqs = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_freqs)
    points = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    bank = np.zeros((n_freqs, mel_bins), dtype=np.float32)
    for b in range(mel_bins):
        lo, center, hi = points[b], points[b + 1], points[b + 2]
        rising = (freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - freqs) / max(hi - center, 1e-9)
        bank[:, b] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return bank, points[1:-1].astype(np.float32)


_scale_cache: dict[tuple, MelScale] = {}


def make_scale(fft_size: int, mel_bins: int, sample_rate: int = 16000) -> MelScale:
    if fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    if mel_bins > fft_size // 2:
        raise ValueError("mel_bins cannot exceed fft_size/2")
    key = (fft_size, mel_bins, sample_rate)
    if key in _scale_cache:
        return _scale_cache[key]
    n = np.arange(fft_size)
    window = (0.5 - 0.5 * np.cos(2.0 * np.pi * n / fft_size)).astype(np.float32)
    bins = np.arange(fft_size // 2 + 1)
    angle = 2.0 * np.pi * np.outer(n, bins) / fft_size
    bank, centers = mel_filterbank(sample_rate, fft_size, mel_bins)
    scale = MelScale(
        fft_size=fft_size,
        hop=fft_size // 4,
        mel_bins=mel_bins,
        sample_rate=sample_rate,
        window=window,
        dft_cos=np.cos(angle).astype(np.float32),
        dft_sin=np.sin(angle).astype(np.float32),
        filterbank=bank,
        center_freqs=centers,
    )
    _scale_cache[key] = scale
    return scale


def default_scales(sample_rate: int = 16000) -> list[MelScale]:
    out = []
    for fft, bins in zip(DEFAULT_FFT_SIZES, DEFAULT_MEL_BINS):
        out.append(make_scale(fft, min(bins, fft // 2), sample_rate))
    return out


def mel_spectrogram(samples, scale: MelScale) -> Tensor:
    """Log-compressed mel magnitudes, one row per hop frame."""
    x = ad.as_tensor(samples)
    if x.size == 0:
        raise ValueError("empty input")
    if x.shape[-1] < scale.fft_size:
        pad_shape = x.shape[:-1] + (scale.fft_size - x.shape[-1],)
        x = ad.concat([x, Tensor(np.zeros(pad_shape, dtype=np.float32))], axis=-1)
    frames = ad.frame_signal(x, scale.fft_size, scale.hop) * scale.window
    re = ad.matmul(frames, Tensor(scale.dft_cos))
    im = ad.matmul(frames, Tensor(scale.dft_sin))
    mag = ad.sqrt(re * re + im * im + MAG_TINY)
    mel = ad.matmul(mag, Tensor(scale.filterbank))
    return ad.log(mel + LOG_OFFSET)


def mel_l1_terms(x, x_hat, scales=None) -> list[Tensor]:
    x = ad.as_tensor(x)
    x_hat = ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    scales = scales or default_scales()
    return [(mel_spectrogram(x, s) - mel_spectrogram(x_hat, s)).abs().mean() for s in scales]


def multi_scale_mel_l1(x, x_hat, scales=None) -> Tensor:
    """Mean over scales of mean-abs log-mel difference."""
    terms = mel_l1_terms(x, x_hat, scales)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def ssrr_loss(x, x_hat, phi, target_feats: np.ndarray | None = None) -> Tensor:
    """Mean-abs feature distance under a frozen extractor.

    The reference features carry no gradient; the reconstruction side runs on
    the tape so the distance trains decoder, quantizer path, and encoder.
    `target_feats` lets callers reuse cached reference features.
    """
    if not getattr(phi, "frozen", True):
        raise ValueError("feature extractor must be frozen for this loss")
    if target_feats is None:
        with ad.no_grad():
            target_feats = phi(ad.as_tensor(x).detach()).data
    feats_hat = phi(x_hat)
    diff = feats_hat - Tensor(target_feats)
    return diff.abs().mean()


def cosine_distill_loss(student: Tensor, teacher) -> Tensor:
    """Mean over frames of 1 - cosine similarity along the feature axis."""
    student = ad.as_tensor(student)
    teacher = ad.as_tensor(teacher)
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {teacher.shape}")
    dot = (student * teacher).sum(axis=-1)
    ns = ad.sqrt((student * student).sum(axis=-1) + MAG_TINY)
    nt = ad.sqrt((teacher * teacher).sum(axis=-1) + MAG_TINY)
    cos = ad.div(dot, ns * nt + COS_EPS)
    return (1.0 - cos).mean()


def total_loss(
    mel,
    vq,
    commit,
    ssrr,
    mel_weight: float = 0.1,
    vq_weight: float = 1.0,
    commit_weight: float = 0.1,
    ssrr_weight: float = 0.0,
) -> Tensor:
    for name, w in (
        ("mel_weight", mel_weight),
        ("vq_weight", vq_weight),
        ("commit_weight", commit_weight),
        ("ssrr_weight", ssrr_weight),
    ):
        if w < 0:
            raise ValueError(f"{name} must be non-negative")
    total = ad.as_tensor(mel) * mel_weight + ad.as_tensor(vq) * vq_weight
    total = total + ad.as_tensor(commit) * commit_weight
    return total + ad.as_tensor(ssrr) * ssrr_weight


@dataclass
class LossReport:
    mel: float
    vq: float
    commit: float
    ssrr: float
    total: float
    per_scale_mel: list[float]
