"""Three-seed comparison: baselines, the fused model and three ablations.

Results are cached under ``--cache`` (keyed by configs and the package
sources), so the acceptance tests reuse them instead of retraining.
"""

import argparse
from pathlib import Path

import numpy as np

from geovista.experiments import SUITE_VARIANTS, seed_suite

ROOT = Path(__file__).resolve().parents[1]


def summarise(runs: dict) -> str:
    rows = []
    for kind in ("tab", "vis_mean", "concat"):
        r = [runs[s]["baselines"][kind]["r2_random"] for s in runs]
        h = [runs[s]["baselines"][kind]["r2_holdout"] for s in runs]
        rows.append((kind, r, h))
    for label, _, _ in SUITE_VARIANTS:
        rows.append((label, [runs[s][label]["r2_random"] for s in runs],
                     [runs[s][label]["r2_holdout"] for s in runs]))
    lines = ["table\t" + "\t".join(f"seed{s}" for s in runs) + "\tmedian\tmedian_holdout"]
    for name, r, h in rows:
        lines.append(f"{name}\t" + "\t".join(f"{v:.4f}" for v in r)
                     + f"\t{np.median(r):.4f}\t{np.median(h):.4f}")
    loc = [runs[s]["geovista"]["locality"]["ratio"] for s in runs]
    lines.append("locality ratio\t" + "\t".join(f"{v:.3f}" for v in loc)
                 + f"\t{np.median(loc):.3f}")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--cache", default=str(ROOT / ".cache" / "results"))
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    runs = {int(s): seed_suite(int(s), Path(args.cache), progress=print)
            for s in args.seeds.split(",")}
    text = summarise(runs)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
