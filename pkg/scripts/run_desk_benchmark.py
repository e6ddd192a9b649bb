#!/usr/bin/env python3
"""Desk-scale benchmark: phantom cohort -> cross-validated training ->
mechanistic analyses -> summary report, all through the command-line
interface so every artifact is reproducible from (args, seed) alone.

Example:
    python3 scripts/run_desk_benchmark.py --out bench --models cnn3d swin3d

The output tree:
    bench/data/               volumes + manifest.csv
    bench/runs/<model>/       per-fold checkpoints, histories, predictions
    bench/analysis/           erf_table / attn_table / cka_matrix CSVs
    bench/report/             table2.csv, table3.csv, reliability.csv
"""

import argparse
import json
import sys
import time
from pathlib import Path

from volab.cli import main as volab_main
from volab.models import build_model, desk_config

ATTENTION_FAMILIES = ("vit", "swin", "hybrid_transformer")


def run(argv):
    print("$ volab " + " ".join(argv))
    code = volab_main(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="benchmark output root")
    ap.add_argument("--models", nargs="+", default=["cnn3d", "swin3d"],
                    help="desk presets to train (default: cnn3d swin3d)")
    ap.add_argument("--n", type=int, default=200,
                    help="phantom cohort size (default 200)")
    ap.add_argument("--shape", default="32,32,32",
                    help="phantom volume shape (default 32,32,32)")
    ap.add_argument("--seed", type=int, default=404,
                    help="master seed for the cohort; model m trains with "
                         "seed+1+index(m) (default 404)")
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--max-epochs", type=int, default=6)
    ap.add_argument("--parallel-folds", type=int, default=1)
    args = ap.parse_args()

    base = Path(args.out)
    base.mkdir(parents=True, exist_ok=True)
    run(["phantom", "--n", str(args.n), "--shape", args.shape,
         "--seed", str(args.seed), "--out", str(base / "data")])

    timings = {}
    for i, preset in enumerate(args.models):
        cfg_path = base / f"exp_{preset}.json"
        with open(cfg_path, "w") as fh:
            json.dump({
                "seed": args.seed + 1 + i,
                "out_dir": f"runs/{preset}",
                "dataset": {"manifest": "data/manifest.csv"},
                "model": {"preset": preset},
                "train": {"lr_max": 1e-3, "lr_min": 2e-4,
                          "max_epochs": args.max_epochs,
                          "physical_batch": 8, "accumulation_steps": 1,
                          "patience": 3},
                "n_folds": args.folds,
            }, fh, indent=2)
        t0 = time.monotonic()
        run(["train", "--config", str(cfg_path),
             "--parallel-folds", str(args.parallel_folds)])
        timings[preset] = time.monotonic() - t0

    analysis = base / "analysis"
    for preset in args.models:
        fold0 = base / "runs" / preset / "fold0.ckpt"
        run(["analyze", "--checkpoint", str(fold0), "--instrument", "erf",
             "--out", str(analysis / f"erf_{preset}")])
        family = desk_config(preset).family
        if family in ATTENTION_FAMILIES:
            run(["analyze", "--checkpoint", str(fold0),
                 "--instrument", "attn",
                 "--out", str(analysis / f"attn_{preset}")])
            folds = [str(base / "runs" / preset / f"fold{k}.ckpt")
                     for k in range(min(2, args.folds))]
            run(["analyze", "--checkpoint", *folds, "--instrument", "cka",
                 "--out", str(analysis / f"cka_{preset}")])

    run(["report", "--runs", str(base / "runs"),
         "--out", str(base / "report")])

    print("\ntraining wall time:")
    for preset, seconds in timings.items():
        params = build_model(desk_config(preset), seed=0).param_count()
        print(f"  {preset:20s} {seconds:7.1f}s  ({params:,} parameters)")
    print(f"report: {base / 'report' / 'table2.csv'}")


if __name__ == "__main__":
    main()
