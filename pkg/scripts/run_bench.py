"""Print the analytic and measured cost profile of a codec configuration.

By default this profiles the full-rate configuration analytically and runs
the timed sections on it too; pass --toy for a quick run, e.g.:

    python3 scripts/run_bench.py --toy --duration 5
"""

import argparse

from jhcodec import bench, codec


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--toy", action="store_true", help="profile the toy configuration")
    parser.add_argument("--duration", type=float, default=10.0,
                        help="seconds of audio for the real-time-factor timing")
    parser.add_argument("--k", type=int, default=None, help="active quantizer levels")
    parser.add_argument("--macs-only", action="store_true",
                        help="skip the timed sections, print analytic numbers only")
    args = parser.parse_args()

    config = codec.toy_config() if args.toy else codec.full_config()
    breakdown = bench.mac_breakdown(config)
    print(f"frame rate        {config.frame_rate} Hz")
    print(f"buffering         {bench.buffering_ms(config):.1f} ms")
    for part in ("framer_g", "blocks_g", "rvq_g", "total_g"):
        print(f"{part:<17s} {breakdown[part]:.4f} G MACs / s")
    if args.macs_only:
        return 0

    params = codec.make_codec(config, seed=0)
    report = bench.cost_report(config, params, duration_s=args.duration, k=args.k)
    print()
    print(bench.report_table(report))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
