"""Distill a student feature extractor against the frozen surrogate teacher.

Reports the held-out cosine agreement and saves the student, e.g.:

    python3 scripts/run_distill.py --steps 600 --out runs/distill
"""

import argparse
import csv
from pathlib import Path

from jhcodec import codec, ssr, train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--teacher-seed", type=int, default=42)
    parser.add_argument("--out", type=Path, default=Path("runs/distill"))
    args = parser.parse_args()

    config = codec.toy_config()
    teacher = ssr.make_surrogate_teacher(seed=args.teacher_seed, config=config)
    dataset = train.SyntheticDataset(seed=args.seed, clip_samples=2048, size=64)
    student, history = ssr.distill_student(teacher, config, dataset, steps=args.steps)

    held_out = train.SyntheticDataset(seed=args.seed + 1000, clip_samples=2048, size=16)
    agreement = ssr.extractor_agreement(teacher, student, held_out, list(range(16)))

    args.out.mkdir(parents=True, exist_ok=True)
    student_path = args.out / "student.jhsw"
    ssr.save_extractor(student_path, student)
    with open(args.out / "distill_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cosine_loss"])
        writer.writerows(enumerate(history))

    print(f"steps              {len(history)}")
    print(f"cosine loss        {history[0]:.4f} -> {history[-1]:.4f}")
    print(f"held-out cosine    {agreement:.4f}")
    print(f"student            {student_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
