"""Fine-tune every ablation row on pretrained and on untrained stacks over
several seeds and write per-seed rows plus seed means.

    python3 scripts/transfer_study.py --out runs/study --seeds 0 1 2 3 4
    python3 scripts/transfer_study.py --out runs/sweep --set data.noise_sigma=0.006
"""
import argparse
import csv
import json
import sys
import time
from pathlib import Path

from stochgcn import pipeline as pl
from stochgcn.config import PRESETS, RunConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="config override, repeatable")
    ap.add_argument("--random-rows", default="fused_fl",
                    help="comma-separated rows also trained on untrained stacks")
    args = ap.parse_args(argv)

    cfg = RunConfig().with_overrides(PRESETS[args.preset] + args.set)
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()

    def progress(seed, pre, rnd):
        print(f"seed {seed} done after {time.perf_counter() - start:.0f} s", file=sys.stderr)

    study = pl.transfer_study(cfg, args.seeds, random_rows=tuple(args.random_rows.split(",")),
                              progress=progress)
    with open(args.out / "rows.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "init", "row", "accuracy", "epochs_to_90", "epochs"])
        for seed, pre, rnd in zip(study.seeds, study.pretrained, study.random_init):
            for init, rows in (("pretrained", pre), ("random", rnd)):
                for r in rows:
                    w.writerow([seed, init, r.name, repr(r.accuracy),
                                "" if r.epochs_to_bar is None else r.epochs_to_bar, r.epochs])
    summary = study.summary(bar_miss=cfg.train.max_epochs + 1)
    summary["config"] = cfg.to_dict()
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for init in ("pretrained", "random_init"):
        for name, v in summary[init].items():
            print(f"{init:12s} {name:12s} acc {v['accuracy']:.3f}  "
                  f"epochs to 90% {v['epochs_to_bar']:.1f}")


if __name__ == "__main__":
    main()
