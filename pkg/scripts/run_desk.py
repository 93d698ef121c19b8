"""Desk-scale pretrain + joint run on the default world; prints losses and wall time."""

import argparse
import json
from pathlib import Path

from geovista.cli import load_config
from geovista.config import to_dict
from geovista.experiments import cached, desk_run

ROOT = Path(__file__).resolve().parents[1]


def desk_result(config: str, seed: int = 0, cache_dir=None, progress=None) -> dict:
    cfg = load_config(config, [])
    key = ["desk", seed, cfg.n_regions, to_dict(cfg.world), to_dict(cfg.model),
           to_dict(cfg.pretrain), to_dict(cfg.train)]
    return cached(cache_dir, key, lambda: desk_run(cfg.world, cfg.model, cfg.pretrain, cfg.train,
                                                   cfg.n_regions, seed, progress))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cache", default=str(ROOT / ".cache" / "results"))
    ap.add_argument("--out", default=None, help="write the result as JSON here")
    args = ap.parse_args()
    res = desk_result(args.config, args.seed, Path(args.cache), progress=print)
    text = json.dumps(res, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
