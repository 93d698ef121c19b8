"""Sweep one or more ablation axes over seeds and write one table per axis."""

import argparse
from pathlib import Path

from geovista.experiments import AXES, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--axes", default=",".join(AXES))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="results/ablations")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    contexts = {}
    for axis in args.axes.split(","):
        report = run_ablation(axis, seeds=seeds, contexts=contexts, progress=print)
        (out / f"{axis.replace('/', '_')}.tsv").write_text(report.to_text())
        print(report.to_text(), end="")


if __name__ == "__main__":
    main()
