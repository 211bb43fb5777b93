#!/usr/bin/env python3
"""Run the full desk-scale pipeline end to end.

Chains the five CLI stages (generate, task-specific training, shift
analysis, grid training, eval, report) into one output directory. Every
stage is resumable: rerunning skips checkpoints that already exist.

Example:
    python3 scripts/run_desk_pipeline.py --out runs/desk --seed 0
"""

import argparse
import os
import sys

from metashift.cli import main as cli


def run(argv):
    code = cli(argv)
    if code != 0:
        print(f"stage failed (exit {code}): {' '.join(argv)}", file=sys.stderr)
        sys.exit(code)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--reps", type=int, default=61, help="pairs per class")
    p.add_argument("--n-shift", type=int, default=20,
                   help="pairs per class for the shift-analysis partitions")
    p.add_argument("--n-meta", type=int, default=5,
                   help="pairs per class for meta-training")
    p.add_argument("--ensembles", type=int, default=2)
    p.add_argument("--k-values", default="1,5")
    p.add_argument("--algorithms", default="reptile,fomaml,tdl,dnc")
    p.add_argument("--max-epochs", type=int, default=300)
    args = p.parse_args()

    out = args.out
    archive = os.path.join(out, "archive")
    seed = str(args.seed)
    jobs = str(args.jobs)

    if not os.path.isdir(archive):
        run(["generate", "--tasks", "mini", "--reps", str(args.reps),
             "--out", archive, "--seed", seed])
    run(["train", "--task-specific", "--archive", archive,
         "--n-pairs", str(args.n_shift), "--ensembles", str(args.ensembles),
         "--max-epochs", str(args.max_epochs), "--out", out,
         "--seed", seed, "--jobs", jobs])
    run(["shift", "--archive", archive,
         "--taskmodels", os.path.join(out, "taskmodels"),
         "--ensembles", str(args.ensembles), "--n-pairs", str(args.n_shift),
         "--out", out, "--seed", seed])
    run(["train", "--archive", archive, "--algorithms", args.algorithms,
         "--n-values", str(args.n_meta), "--ensembles", str(args.ensembles),
         "--max-epochs", str(args.max_epochs), "--out", out,
         "--seed", seed, "--jobs", jobs])
    run(["eval", "--archive", archive, "--k-values", args.k_values,
         "--out", out, "--seed", seed])
    run(["report", "--out", out, "--seed", seed])
    print(f"pipeline complete: {out}/report")


if __name__ == "__main__":
    main()
