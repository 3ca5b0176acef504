"""Train the toy codec on synthetic clips and report how the run went.

Writes a checkpoint and a per-step loss CSV next to each other so runs can
be compared afterwards, e.g.:

    python3 scripts/run_toy_training.py --steps 2000 --ssrr-weight 1.0 --out runs/with_feats
"""

import argparse
from pathlib import Path

import numpy as np

from jhcodec import codec, ssr, train


def usage_per_level(config, params, dataset, clip_ids):
    seen = [set() for _ in range(config.num_quantizers)]
    for clip_id in clip_ids:
        grid = codec.encode(config, params, dataset.clip(clip_id))
        for level in range(config.num_quantizers):
            seen[level].update(int(i) for i in grid.indices[:, level])
    return [len(s) / config.codebook_size for s in seen]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--ssrr-weight", type=float, default=0.0,
                        help="weight of the frozen-extractor feature loss")
    parser.add_argument("--clip-samples", type=int, default=2048)
    parser.add_argument("--out", type=Path, default=Path("runs/toy"))
    args = parser.parse_args()

    config = codec.toy_config(ssrr_weight=args.ssrr_weight)
    plan = train.toy_plan(args.steps, seed=args.seed)
    dataset = train.SyntheticDataset(seed=args.seed, clip_samples=args.clip_samples, size=64)
    phi = ssr.make_surrogate_teacher(seed=42, config=config) if args.ssrr_weight > 0 else None

    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "codec.jhck"
    result = train.train_codec(
        config, plan, dataset, phi=phi,
        ckpt_path=ckpt, csv_path=args.out / "losses.csv",
    )

    mels = [r.mel for r in result.reports]
    window = min(100, max(1, len(mels) // 4))
    print(f"steps            {len(result.reports)}")
    print(f"mel first {window}    {np.mean(mels[:window]):.4f}")
    print(f"mel last {window}     {np.mean(mels[-window:]):.4f}")
    if phi is not None:
        print(f"feature loss     {np.mean([r.ssrr for r in result.reports[-window:]]):.4f}")
    print(f"expired codes    {result.expired_codes}")
    fractions = usage_per_level(config, result.params, dataset, range(8))
    print("codebook usage   " + " ".join(f"{f:.0%}" for f in fractions))
    print(f"checkpoint       {ckpt}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
