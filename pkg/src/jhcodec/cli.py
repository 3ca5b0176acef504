"""Command-line front end: encode, decode, train, distill, bench, gradcheck,
inspect.

Exit codes: 0 success, 1 usage error (bad flags, unknown command), 2 runtime
failure (missing files, malformed inputs, divergence). All randomness is
steered by --seed; only the wall-clock benchmark numbers vary between runs.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import audio_io, bench, bitstream, gradcheck
from . import codec as codec_mod
from . import losses, nnet, rvq, ssr, train
from .autodiff import Tensor
from .codec import CodecConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def load_config(path) -> CodecConfig:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        return CodecConfig.from_text("".join(lines))
    except codec_mod.CheckpointError as e:
        raise ValueError(f"bad config file {path}: {e}")


def _config_from_args(args, default: CodecConfig | None = None) -> CodecConfig:
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        config = default if default is not None else codec_mod.toy_config()
    if getattr(args, "style", None):
        config = CodecConfig(**{**config.__dict__, "style": args.style})
    return config


# -- commands ----------------------------------------------------------------


def cmd_encode(args) -> int:
    config, params = codec_mod.load_checkpoint(args.ckpt)
    samples = audio_io.read_wav(args.infile, config.sample_rate)
    grid = codec_mod.encode(config, params, samples, args.k)
    data = bitstream.pack(grid, bitstream.make_header(grid, config))
    with open(args.out, "wb") as fh:
        fh.write(data)
    header = bitstream.make_header(grid, config)
    print(
        f"{args.out}: {grid.frames} frames, k={grid.k}, {len(data)} bytes, "
        f"{header.bits_per_second} bits/s"
    )
    return 0


def cmd_decode(args) -> int:
    config, params = codec_mod.load_checkpoint(args.ckpt)
    with open(args.infile, "rb") as fh:
        header, grid = bitstream.unpack(fh.read())
    if header.codebook_size != config.codebook_size or header.style != config.style:
        raise ValueError("stream and checkpoint disagree on quantizer shape")
    if header.total_levels != config.num_quantizers:
        raise ValueError("stream and checkpoint disagree on level count")
    if args.k is not None:
        grid = codec_mod.truncate_grid(grid, args.k)
    samples = codec_mod.decode(config, params, grid)
    if grid.pad_samples:
        samples = samples[: samples.shape[0] - grid.pad_samples]
    audio_io.write_wav(args.out, samples, config.sample_rate)
    print(f"{args.out}: {samples.shape[0]} samples at {config.sample_rate} Hz")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    plan = train.toy_plan(args.steps, seed=args.seed)
    dataset = train.SyntheticDataset(seed=args.seed, clip_samples=plan.clip_samples, size=64)
    phi = None
    if config.ssrr_weight > 0:
        phi = ssr.make_surrogate_teacher(seed=42, config=config)
    result = train.train_codec(
        config, plan, dataset, phi=phi, ckpt_path=args.out, csv_path=args.csv
    )
    last = result.reports[-1] if result.reports else None
    if last:
        print(
            f"step {plan.steps - 1}: total {last.total:.4f} mel {last.mel:.4f} "
            f"vq {last.vq:.4f} commit {last.commit:.4f} ssrr {last.ssrr:.4f}"
        )
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_distill(args) -> int:
    config = _config_from_args(args)
    teacher = ssr.make_surrogate_teacher(seed=42, config=config)
    dataset = train.SyntheticDataset(seed=args.seed, clip_samples=2048, size=64)
    student, history = ssr.distill_student(teacher, config, dataset, args.steps)
    ssr.save_extractor(args.out, student)
    held_out = train.SyntheticDataset(seed=args.seed + 1000, clip_samples=2048, size=16)
    agreement = ssr.extractor_agreement(teacher, student, held_out, range(16))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("step,loss\n")
            for i, value in enumerate(history):
                fh.write(f"{i},{value}\n")
    print(f"final loss {history[-1]:.4f}, held-out mean cosine {agreement:.4f}")
    print(f"student written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    config = _config_from_args(args, default=codec_mod.full_config())
    if args.macs_only:
        print(f"MACs (G / s audio): {bench.count_macs(config):.3f}")
        return 0
    if args.ckpt:
        config, params = codec_mod.load_checkpoint(args.ckpt)
    else:
        params = codec_mod.make_codec(config, seed=args.seed)
    report = bench.cost_report(config, params, duration_s=args.duration, seed=args.seed)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(bench.report_csv(report))
        print(f"report written to {args.csv}")
    else:
        print(bench.report_table(report))
    return 0


def cmd_inspect(args) -> int:
    with open(args.infile, "rb") as fh:
        magic = fh.read(4)
    if magic == codec_mod.CHECKPOINT_MAGIC:
        config, params = codec_mod.load_checkpoint(args.infile)
        count = sum(int(np.prod(t.shape)) for t in codec_mod.named_tensors(params).values())
        print(f"codec checkpoint, {count} stored values")
        print(config.to_text())
    elif magic == ssr.EXTRACTOR_MAGIC:
        phi = ssr.load_extractor(args.infile)
        count = sum(int(np.prod(t.shape)) for t in ssr.named_extractor_tensors(phi).values())
        print(f"feature extractor checkpoint, {count} stored values")
        print(phi.config.to_text())
    elif magic == bitstream.BITSTREAM_MAGIC:
        with open(args.infile, "rb") as fh:
            header, grid = bitstream.unpack(fh.read())
        print(f"code stream: {header.frame_count} frames, k={header.k}/{header.total_levels}, "
              f"V={header.codebook_size}, {header.frame_rate} frames/s, "
              f"pad {header.pad_samples} samples, {header.bits_per_second} bits/s")
    else:
        raise ValueError(f"unrecognized file magic {magic!r}")
    return 0


# -- gradient spot checks ------------------------------------------------------


def _gradcheck_autodiff(seed: int) -> float:
    from . import autodiff as ad

    rng = np.random.default_rng(seed)

    def build(leaves):
        a, b, c = leaves
        h = ad.silu(ad.matmul(a, b))
        g = ad.layer_norm(h * c + 0.5)
        soft = ad.softmax(h)
        return (g.abs() + soft * c).mean() + ad.exp(g * 0.1).sum() * 0.01

    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)), rng.standard_normal((3, 5))]
    return gradcheck.check_gradients(build, arrays, rng=rng)


def _gradcheck_rvq(seed: int) -> float:
    worst = 0.0
    rng = np.random.default_rng(seed)
    for case in range(8):
        state = rvq.make_quantizer(12, 4, 24, 3, rng=np.random.default_rng(seed + case))
        z = Tensor(rng.standard_normal((6, 12)).astype(np.float32), requires_grad=True)
        result = rvq.rvq_quantize(state, z, 3)
        u = rng.standard_normal(result.z_k.shape).astype(np.float32)
        (result.z_k * u).sum().backward()
        want = u @ rvq.ste_jacobian_closed_form(state, 3)
        worst = max(worst, gradcheck.relative_error(z.grad, want))
    return worst


def _gradcheck_nnet(seed: int) -> float:
    # unit branch scales keep the finite-difference probes above float32 noise
    rng = np.random.default_rng(seed)
    block = nnet.make_block(8, 16, 2, rng, layerscale_init=1.0)

    def build(leaves):
        return nnet.transformer_block(leaves[0], block, 3, 2).abs().mean()

    x0 = rng.standard_normal((5, 8)) * 0.5
    return gradcheck.check_gradients(build, [x0], max_coords=12, rng=rng)


def _gradcheck_losses(seed: int) -> float:
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal((6, 5)).astype(np.float32)

    def build(leaves):
        return losses.cosine_distill_loss(leaves[0], Tensor(teacher))

    return gradcheck.check_gradients(build, [rng.standard_normal((6, 5))], rng=rng)


_GRADCHECKS = {
    "autodiff": _gradcheck_autodiff,
    "rvq": _gradcheck_rvq,
    "nnet": _gradcheck_nnet,
    "losses": _gradcheck_losses,
}


def cmd_gradcheck(args) -> int:
    modules = list(_GRADCHECKS) if args.module == "all" else [args.module]
    worst = 0.0
    for name in modules:
        err = _GRADCHECKS[name](args.seed)
        worst = max(worst, err)
        print(f"{name}: max rel err {err:.3e}")
    if worst < 1e-3:
        print(f"OK (worst {worst:.3e} < 1e-3)")
        return 0
    print(f"FAIL (worst {worst:.3e} >= 1e-3)", file=sys.stderr)
    return 2


# -- wiring --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="jhcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="WAV to .jhc code stream")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help=".jhc code stream to WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="toy-scale training run")
    p.add_argument("--config", default=None)
    p.add_argument("--style", choices=rvq.STYLES, default=None)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="model.jhck")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a student feature extractor")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="student.jhsw")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("bench", help="MACs, latency, and RTF")
    p.add_argument("--config", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--macs-only", action="store_true")
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", choices=[*_GRADCHECKS, "all"], default="all")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a checkpoint or code stream")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError, AssertionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
