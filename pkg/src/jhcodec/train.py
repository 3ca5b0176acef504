"""Desk-scale training loop: AdamW with decoupled decay, warmup plus cosine
learning-rate schedule, global grad-norm clipping, phased objectives
(reconstruction warm-up, then feature-space loss plus masking, then masking
off), per-batch quantizer dropout, EMA usage tracking with code expiry every
step, and CSV diagnostics.

The loop is fully deterministic given a plan seed: clip choice, dropout depth,
noise, and masking all draw from one seeded generator in a fixed order.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec as codec_mod
from . import losses, nnet, rvq
from .autodiff import Tensor


class TrainDivergence(RuntimeError):
    pass


@dataclass
class TrainPlan:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_warmup_steps: int = 0  # linear ramp to lr; 0 disables
    lr_final_frac: float = 1.0  # cosine-decay floor as a fraction of lr; 1 disables
    warm_start_steps: int = 100  # feature-space loss stays off before this
    mask_start: int = 100
    mask_end: int = 500  # half-open window of masking steps
    dropout_enabled: bool = True
    clip_norm: float | None = None  # global grad-norm ceiling; None disables
    seed: int = 0
    clip_samples: int = 2048

    def __post_init__(self):
        if not 0 <= self.mask_start <= self.mask_end <= self.steps:
            raise ValueError("need 0 <= mask_start <= mask_end <= steps")
        if not 0 <= self.lr_warmup_steps <= self.steps:
            raise ValueError("need 0 <= lr_warmup_steps <= steps")
        if not 0.0 < self.lr_final_frac <= 1.0:
            raise ValueError("need 0 < lr_final_frac <= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


def lr_at(plan: TrainPlan, step: int) -> float:
    """Learning rate for a zero-indexed step: linear warmup, cosine decay."""
    if step < plan.lr_warmup_steps:
        return plan.lr * (step + 1) / plan.lr_warmup_steps
    if plan.lr_final_frac >= 1.0:
        return plan.lr
    span = max(1, plan.steps - plan.lr_warmup_steps)
    done = min(1.0, (step - plan.lr_warmup_steps) / span)
    floor = plan.lr * plan.lr_final_frac
    return floor + 0.5 * (plan.lr - floor) * (1.0 + math.cos(math.pi * done))


def toy_plan(steps: int = 2000, **overrides) -> TrainPlan:
    """Phase boundaries scaled the way the full schedule scales to 2k steps."""
    defaults = dict(
        steps=steps,
        warm_start_steps=steps // 20,
        mask_start=steps // 20,
        mask_end=steps // 4,
        # Toy runs need a hotter rate than the full-scale setting, with a long
        # ramp so early steps do not soak up the whole descent, and a cosine
        # tail so the last stretch settles instead of bouncing.
        lr=2e-3,
        lr_warmup_steps=(3 * steps) // 10,
        lr_final_frac=0.05,
        clip_norm=0.5,  # spikes run ~10x the typical norm; this only touches those
    )
    defaults.update(overrides)
    return TrainPlan(**defaults)


@dataclass
class SyntheticDataset:
    """Seeded corpus of fixed-length multi-tone plus filtered-noise clips."""

    seed: int = 0
    clip_samples: int = 2048
    size: int = 64
    sample_rate: int = 16000

    def clip(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(index)])
        t = np.arange(self.clip_samples) / self.sample_rate
        x = np.zeros(self.clip_samples)
        for _ in range(int(rng.integers(2, 5))):
            freq = rng.uniform(80.0, 6000.0)
            amp = rng.uniform(0.05, 0.3)
            phase = rng.uniform(0.0, 2 * np.pi)
            x += amp * np.sin(2 * np.pi * freq * t + phase)
        noise = rng.standard_normal(self.clip_samples)
        smooth = np.convolve(noise, np.ones(8) / 8.0, mode="same")
        x += rng.uniform(0.02, 0.1) * smooth
        peak = np.abs(x).max()
        if peak > 0.9:
            x *= 0.9 / peak
        return x.astype(np.float32)

    def batch(self, indices) -> np.ndarray:
        return np.stack([self.clip(i) for i in indices])


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def init_adamw(params: list[Tensor]) -> AdamWState:
    return AdamWState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adamw_step(params: list[Tensor], state: AdamWState, plan: TrainPlan, lr=None) -> None:
    """Bias-corrected Adam moments plus decoupled weight decay, in place."""
    rate = plan.lr if lr is None else lr
    state.t += 1
    bc1 = 1.0 - plan.beta1 ** state.t
    bc2 = 1.0 - plan.beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at optimizer step {state.t}")
        state.m[i] = plan.beta1 * state.m[i] + (1.0 - plan.beta1) * g
        state.v[i] = plan.beta2 * state.v[i] + (1.0 - plan.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - rate * (m_hat / (np.sqrt(v_hat) + plan.eps) + plan.weight_decay * p.data)


def sample_dropout_k(rng: np.random.Generator, total_levels: int) -> int:
    return int(rng.integers(1, total_levels + 1))


def grad_global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale every grad so the global norm is at most max_norm; returns the
    pre-clip norm."""
    norm = grad_global_norm([p.grad for p in params])
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def residual_norm_profile(result: rvq.QuantizeResult) -> np.ndarray:
    """Mean L2 norm of each level's input residual; diagnostic only."""
    k = result.indices.shape[-1]
    out = []
    for i in range(k):
        r = result.residuals[min(i, len(result.residuals) - 1)].data
        out.append(float(np.linalg.norm(r, axis=-1).mean()))
    return np.asarray(out)


# -- the loop --------------------------------------------------------------


@dataclass
class TrainResult:
    config: codec_mod.CodecConfig
    params: codec_mod.CodecParams
    reports: list[losses.LossReport]
    grad_norms: list[float]
    residual_profiles: list[np.ndarray]
    masked_steps: int
    feature_loss_steps: int
    expired_codes: int
    ckpt_path: str | None


def _write_csv_header(writer) -> None:
    writer.writerow(["step", "mel", "vq", "commit", "ssrr", "total", "grad_norm"])


def train_codec(
    config: codec_mod.CodecConfig,
    plan: TrainPlan,
    dataset: SyntheticDataset,
    phi=None,
    ckpt_path=None,
    csv_path=None,
    params: codec_mod.CodecParams | None = None,
) -> TrainResult:
    if phi is not None and not getattr(phi, "frozen", False):
        raise ValueError("feature extractor must be frozen before training against it")
    params = params or codec_mod.make_codec(config, seed=plan.seed)
    trainables = params.parameters()
    opt = init_adamw(trainables)
    rng = np.random.default_rng(plan.seed)
    scales = losses.default_scales(config.sample_rate)

    reports: list[losses.LossReport] = []
    grad_norms: list[float] = []
    profiles: list[np.ndarray] = []
    masked_steps = 0
    feature_loss_steps = 0
    expired_total = 0
    target_mels: dict = {}
    target_feats: dict = {}
    last_good: list[np.ndarray] | None = None

    csv_file = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(csv_file) if csv_file else None
    if writer:
        _write_csv_header(writer)

    def checkpoint(path):
        if path:
            codec_mod.save_checkpoint(path, config, params)

    try:
        for step in range(plan.steps):
            clip_ids = [int(i) for i in rng.integers(0, dataset.size, plan.batch)]
            clean = dataset.batch(clip_ids)
            noisy = codec_mod.apply_input_noise(clean, rng, config)
            k = (
                sample_dropout_k(rng, config.num_quantizers)
                if plan.dropout_enabled
                else config.num_quantizers
            )
            in_mask_window = plan.mask_start <= step < plan.mask_end
            use_feature_loss = (
                phi is not None and config.ssrr_weight > 0 and step >= plan.warm_start_steps
            )

            emb = nnet.frame_reshape(Tensor(noisy), params.framer)
            if in_mask_window:
                emb = codec_mod.apply_masking(emb, config.mask_rate, params.enc_mask, rng)
                masked_steps += 1
            z_e = nnet.stack_forward(
                params.encoder, emb, config.window, config.heads, config.rotary_base
            )
            if step == 0:
                flat = z_e.data.reshape(-1, config.model_dim)
                rvq.seed_codebooks(params.quantizer, flat, rng)
            qr = rvq.rvq_quantize(params.quantizer, z_e, k)
            z = qr.z_k
            if in_mask_window:
                z = codec_mod.apply_masking(z, config.mask_rate, params.dec_mask, rng)
            h = nnet.stack_forward(
                params.decoder, z, config.window, config.heads, config.rotary_base
            )
            x_hat = nnet.deframe(h, params.deframer)

            for cid in clip_ids:
                if cid not in target_mels:
                    with ad.no_grad():
                        clip = Tensor(dataset.clip(cid))
                        target_mels[cid] = [losses.mel_spectrogram(clip, s).data for s in scales]
            mel_terms = []
            for si, s in enumerate(scales):
                got = losses.mel_spectrogram(x_hat, s)
                want = np.stack([target_mels[cid][si] for cid in clip_ids])
                mel_terms.append((got - Tensor(want)).abs().mean())
            mel = mel_terms[0]
            for term in mel_terms[1:]:
                mel = mel + term
            mel = mel * (1.0 / len(mel_terms))

            l_vq, l_commit = rvq.vq_losses(qr)

            ssrr_value = 0.0
            if phi is not None:
                for cid in clip_ids:
                    if cid not in target_feats:
                        with ad.no_grad():
                            target_feats[cid] = phi(Tensor(dataset.clip(cid))).data
                want_feats = np.stack([target_feats[cid] for cid in clip_ids])
                if use_feature_loss:
                    ssrr_term = losses.ssrr_loss(None, x_hat, phi, target_feats=want_feats)
                    ssrr_value = ssrr_term.item()
                    feature_loss_steps += 1
                else:
                    with ad.no_grad():
                        ssrr_value = losses.ssrr_loss(
                            None, x_hat.detach(), phi, target_feats=want_feats
                        ).item()
                    ssrr_term = Tensor(0.0)
            else:
                ssrr_term = Tensor(0.0)

            total = losses.total_loss(
                mel, l_vq, l_commit, ssrr_term,
                config.mel_weight, config.vq_weight, config.commit_weight,
                config.ssrr_weight if use_feature_loss else 0.0,
            )
            if not np.isfinite(total.data):
                checkpoint(ckpt_path)
                raise TrainDivergence(f"non-finite loss at step {step}; last good state saved")

            for p in trainables:
                p.zero_grad()
            ad.backward(total)
            if plan.clip_norm is not None:
                gnorm = clip_gradients(trainables, plan.clip_norm)
            else:
                gnorm = grad_global_norm([p.grad for p in trainables])
            last_good = [p.data.copy() for p in trainables]
            try:
                adamw_step(trainables, opt, plan, lr=lr_at(plan, step))
            except FloatingPointError:
                for p, saved in zip(trainables, last_good):
                    p.data = saved
                checkpoint(ckpt_path)
                raise TrainDivergence(f"non-finite gradient at step {step}; last good state saved")

            rvq.usage_update(params.quantizer, qr.indices)
            latents = []
            for i in range(params.quantizer.total_levels):
                r = qr.residuals[min(i, len(qr.residuals) - 1)].data
                latents.append(r.reshape(-1, config.model_dim))
            if params.quantizer.semantic_level is not None:
                latents = [qr.residuals[0].data.reshape(-1, config.model_dim)] + latents[:-1]
            expired_total += rvq.expire_and_reinit(params.quantizer, latents, rng)

            report = losses.LossReport(
                mel=float(mel.data),
                vq=float(l_vq.data),
                commit=float(l_commit.data),
                ssrr=float(ssrr_value),
                total=float(total.data),
                per_scale_mel=[float(t.data) for t in mel_terms],
            )
            reports.append(report)
            grad_norms.append(gnorm)
            profiles.append(residual_norm_profile(qr))
            if writer:
                writer.writerow(
                    [step, report.mel, report.vq, report.commit, report.ssrr, report.total, gnorm]
                )
    finally:
        if csv_file:
            csv_file.close()

    checkpoint(ckpt_path)
    return TrainResult(
        config=config,
        params=params,
        reports=reports,
        grad_norms=grad_norms,
        residual_profiles=profiles,
        masked_steps=masked_steps,
        feature_loss_steps=feature_loss_steps,
        expired_codes=expired_total,
        ckpt_path=str(ckpt_path) if ckpt_path else None,
    )


def parameter_checksum(params: codec_mod.CodecParams) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in sorted(codec_mod.named_tensors(params).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
