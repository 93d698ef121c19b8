"""Command-line entry point: ``geovista <command> [flags]``.

Every command accepts ``--config FILE`` (``key = value`` lines, dotted keys
such as ``train.lr`` or ``model.tab.dim``) and repeated ``--set key=value``
overrides. Exit status: 0 ok, 1 runtime/config error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses as dc
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .config import (ConfigError, ModelConfig, TrainConfig, WorldConfig, config_hash, from_dict,
                     merge, parse_kv, pretrain_defaults, read_kv, to_dict)
from .core import no_grad
from .data import (DatasetManifest, generate_world, load_world, make_splits, prepare_region,
                   sample_region, save_world, write_region)
from .evaluate import (EmbeddingTable, attention_locality, baseline_embeddings, extract_embeddings,
                       extraction_set, fit_probe, pca, random_split, region_holdout_split)
from .experiments import AXES, DEFAULT_GRIDS, RunSchedule, run_ablation
from .training import (CheckpointError, InputScaling, build_joint_model, build_pool,
                       collate, draw_masks, joint_forward, joint_train, load_checkpoint,
                       model_from_checkpoint, pretrain_vit, save_checkpoint, train_tabular_mae)
from .vision import unpatchify_array

log = logging.getLogger("geovista")


@dataclass
class FullConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=pretrain_defaults)
    schedule: RunSchedule = field(default_factory=RunSchedule)
    n_regions: int = 600
    sample_region_files: int = 8


_SECTIONS = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig,
             "pretrain": TrainConfig, "schedule": RunSchedule}


def build_config(tree: dict) -> FullConfig:
    base = FullConfig()
    kwargs = {}
    for key, val in tree.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"{key} must be a section")
            start = to_dict(getattr(base, key))
            try:
                kwargs[key] = from_dict(_SECTIONS[key], merge(start, val))
            except TypeError as exc:
                raise ConfigError(f"bad value in section {key}: {exc}") from exc
        elif key in ("n_regions", "sample_region_files"):
            kwargs[key] = int(val)
        else:
            raise ConfigError(f"unknown config key: {key}")
    cfg = dc.replace(base, **kwargs)
    w, m = cfg.world, cfg.model
    if w.grid != m.vit.grid or w.channels != m.vit.channels:
        raise ConfigError("model.vit grid/channels must match the world's region grid/channels")
    if w.features != m.tab.features:
        raise ConfigError("model.tab.features must match world.features")
    return cfg


def config_to_text(cfg: FullConfig) -> str:
    lines = []

    def walk(prefix, d):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(f"{prefix}{k}.", v)
            else:
                lines.append(f"{prefix}{k} = {v!r}")

    walk("", dc.asdict(cfg))
    return "\n".join(lines) + "\n"


def load_config(path: str | None, overrides: list[str], base: dict | None = None) -> FullConfig:
    tree = dict(base or {})
    if path:
        tree = merge(tree, read_kv(path))
    tree = merge(tree, parse_kv(overrides))
    return build_config(tree)


# ------------------------------------------------------------ data folders

def _data_config(data_dir: Path, args) -> FullConfig:
    cfg_file = data_dir / "config.txt"
    if not cfg_file.exists():
        raise ConfigError(f"{data_dir} is not a dataset directory (run generate first)")
    base = read_kv(cfg_file)
    cfg = load_config(args.config, args.set or [], base)
    if to_dict(cfg.world) != to_dict(build_config(base).world):
        raise ConfigError("world settings cannot be overridden for an existing dataset")
    return cfg


def _load_data(data_dir: Path):
    world = load_world(data_dir / "world.gvst")
    manifest = DatasetManifest.read(data_dir / "manifest.txt")
    if manifest.world_digest != world.digest():
        raise formats.ChecksumError("manifest does not belong to this world")
    return world, manifest


def _pools(world, manifest, cfg: FullConfig):
    patch = cfg.model.vit.patch
    train = build_pool(world, manifest.train, patch)
    val = build_pool(world, manifest.val, patch, limit=cfg.train.val_regions)
    return train, val, InputScaling.fit(train.regions, world.config.region_km)


def _seeded(cfg: TrainConfig, seed: int | None) -> TrainConfig:
    return cfg if seed is None else dc.replace(cfg, seed=seed)


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set or [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg.world, args.seed)
    manifest = make_splits(world, cfg.n_regions, args.seed)
    save_world(out / "world.gvst", world)
    manifest.write(out / "manifest.txt")
    (out / "config.txt").write_text(config_to_text(cfg))
    for i, c in enumerate(manifest.val[:cfg.sample_region_files]):
        write_region(out / "regions" / f"val_{i:05d}.gvst", sample_region(world, c))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "SHA256SUMS")
    sums = [f"{formats.file_digest(p)}  {p.relative_to(out)}" for p in files]
    (out / "SHA256SUMS").write_text("\n".join(sums) + "\n")
    print(f"world: {world.n_tracts} tracts, raster {world.vision.shape}; "
          f"regions: {len(manifest.train)} train / {len(manifest.val)} val -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, manifest = _load_data(data)
    train, val, scaling = _pools(world, manifest, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = pretrain_vit(train, val, cfg.model, _seeded(cfg.pretrain, args.seed), scaling,
                       out / "pretrain_loss.tsv", out / "pretrain_val.tsv", progress=print)
    save_checkpoint(out / "vit.ckpt", res.checkpoint)
    print(f"val loss {res.val_initial['loss']:.4f} -> {res.val_final['loss']:.4f}")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, manifest = _load_data(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _seeded(cfg.train, args.seed)
    if args.tabular_only:
        rows = world.features[~world.in_holdout()]
        res = train_tabular_mae(rows, cfg.model, tcfg, InputScaling(), out / "tabmae_loss.tsv")
        save_checkpoint(out / "tabmae.ckpt", res.checkpoint)
        print(f"val L_tab {res.val_initial['tab']:.4f} -> {res.val_final['tab']:.4f}")
        return 0
    train, val, scaling = _pools(world, manifest, cfg)
    vit_params = None
    if args.vit:
        vck = load_checkpoint(args.vit)
        if vck.kind != "vit":
            raise CheckpointError(f"{args.vit} is not a ViT checkpoint")
        vit_params, scaling = vck.params, vck.scaling
    elif tcfg.freeze_vit:
        raise ConfigError("a frozen ViT needs --vit (or set train.freeze_vit = false)")
    model = build_joint_model(cfg.model, tcfg, scaling, vit_params)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expect_hash=config_hash(cfg.model, tcfg))
    res = joint_train(model, train, val, tcfg, out / "joint_loss.tsv", out / "joint_val.tsv",
                      resume=resume, progress=print, checkpoint_path=out / "joint.ckpt")
    a, b = res.val_initial, res.val_final
    print(f"val L_vis {a['vis']:.4f} -> {b['vis']:.4f}; L_tab {a['tab']:.4f} -> {b['tab']:.4f}")
    return 0


def _joint_model(path):
    ck = load_checkpoint(path)
    if ck.kind != "joint":
        raise CheckpointError(f"{path} is a {ck.kind} checkpoint, expected a joint model")
    return model_from_checkpoint(ck)


def cmd_embed(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, _ = _load_data(data)
    if not args.checkpoint:
        raise CheckpointError("missing checkpoint: embed needs --checkpoint")
    model = _joint_model(args.checkpoint)
    tracts = None if args.limit is None else list(range(min(args.limit, world.n_tracts)))
    es = extraction_set(world, cfg.model.vit.patch, tracts)
    table = extract_embeddings(model, es, tag=f"geovista:{Path(args.checkpoint).name}")
    table.write(args.out)
    print(f"wrote {len(table.ids)} x {table.dim} embeddings -> {args.out}")
    return 0


def _table(args, world, cfg) -> EmbeddingTable:
    kind = args.table
    if kind == "geovista":
        if args.embeddings:
            return EmbeddingTable.read(args.embeddings)
        if not args.checkpoint:
            raise CheckpointError("missing checkpoint: the geovista table needs --checkpoint "
                                  "or --embeddings")
        es = extraction_set(world, cfg.model.vit.patch)
        return extract_embeddings(_joint_model(args.checkpoint), es)
    tabmae = None
    if kind == "late_fusion":
        if not args.checkpoint:
            raise CheckpointError("missing checkpoint: late_fusion needs a tabular MAE checkpoint")
        ck = load_checkpoint(args.checkpoint)
        if ck.kind != "tabmae":
            raise CheckpointError(f"{args.checkpoint} is not a tabular MAE checkpoint")
        tabmae = model_from_checkpoint(ck)
    return baseline_embeddings(world, kind, tabmae)


def cmd_probe(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, _ = _load_data(data)
    table = _table(args, world, cfg)
    if args.split == "random":
        ids = np.nonzero(~world.in_holdout())[0]
        tr, te = random_split(ids, args.test_fraction, args.split_seed)
    else:
        tr, te = region_holdout_split(world)
    x = table.aligned(np.arange(world.n_tracts))
    res = fit_probe(x, world.target, tr, te, args.ridge, split=args.split)
    report = {"table": table.tag, "split": res.split, "ridge": res.ridge,
              "r2_train": res.r2_train, "r2_test": res.r2_test,
              "n_train": res.n_train, "n_test": res.n_test}
    text = "\n".join(f"{k} = {v}" for k, v in report.items()) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_pca(args) -> int:
    table = EmbeddingTable.read(args.embeddings)
    res = pca(table, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "explained_variance.tsv").write_text(
        "component\tratio\n" + "".join(f"{i + 1}\t{r!r}\n" for i, r in
                                       enumerate(res.explained_ratio.tolist())))
    EmbeddingTable(table.ids, res.scores, f"pca{len(res.explained_ratio)}:{table.tag}").write(
        out / "scores.tsv")
    print("explained variance: " + " ".join(f"{r:.4f}" for r in res.explained_ratio))
    return 0


def _write_grid(path: Path, grid: np.ndarray) -> None:
    path.write_text("\n".join("\t".join(f"{v:.6g}" for v in row) for row in grid) + "\n")


def cmd_reconstruct(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, manifest = _load_data(data)
    if not args.checkpoint:
        raise CheckpointError("missing checkpoint: reconstruct needs --checkpoint")
    model = _joint_model(args.checkpoint)
    if not 0 <= args.region < len(manifest.val):
        raise ConfigError(f"region index {args.region} out of range (0..{len(manifest.val) - 1})")
    region = prepare_region(sample_region(world, manifest.val[args.region]), cfg.model.vit.patch)
    batch = collate([region])
    masks = draw_masks(batch, cfg.train.vis_mask, cfg.train.tab_mask,
                       np.random.default_rng(args.mask_seed))
    with no_grad():
        res = joint_forward(model, batch, masks)
    h, w, c = region.grid_shape
    p = cfg.model.vit.patch
    inp = unpatchify_array(batch.patches[0], h, w, c, p)
    keep = np.repeat(~masks.vis_masked[0][:, None], batch.patches.shape[-1], axis=1)
    masked = unpatchify_array(np.where(keep, batch.patches[0], np.nan), h, w, c, p)
    rec = unpatchify_array(res.vis_pred.data[0], h, w, c, p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    channels = range(c) if args.channel is None else [args.channel]
    for ch in channels:
        side = np.hstack([inp[..., ch], masked[..., ch], rec[..., ch]])
        _write_grid(out / f"vision_ch{ch}.tsv", side)
    n = region.n_tracts
    rows = ["tract_id\tmasked\t" + "\t".join(f"x{j}\trecon{j}" for j in range(region.tab_x.shape[1]))]
    for i in range(n):
        vals = "\t".join(f"{a:.6g}\t{b:.6g}" for a, b in
                         zip(region.tab_x[i], res.tab_pred.data[0, i]))
        rows.append(f"{region.tract_ids[i]}\t{int(masks.tab_masked[0, i])}\t{vals}")
    (out / "tabular.tsv").write_text("\n".join(rows) + "\n")
    print(f"wrote side-by-side grids (input | masked | reconstruction) to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set or [])
    grid = None
    if args.grid:
        grid = [parse_kv([f"v = {g}"])["v"] for g in args.grid.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    report = run_ablation(args.axis, grid, seeds, schedule=cfg.schedule, progress=print)
    text = report.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_attn_stats(args) -> int:
    data = Path(args.data)
    cfg = _data_config(data, args)
    world, _ = _load_data(data)
    if not args.checkpoint:
        raise CheckpointError("missing checkpoint: attn-stats needs --checkpoint")
    model = _joint_model(args.checkpoint)
    n = world.n_tracts if args.limit is None else min(args.limit, world.n_tracts)
    es = extraction_set(world, cfg.model.vit.patch, list(range(n)))
    stats = attention_locality(model, es, args.radius)
    text = "\n".join(f"{k} = {v}" for k, v in stats.items()) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geovista", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    g = sub.add_parser("generate", help="synthesise a world, splits and sample region files")
    common(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    for name, fn_help in (("pretrain", "MAE-pretrain the ViT"),
                          ("train", "joint masked-autoencoding training")):
        sp = sub.add_parser(name, help=fn_help)
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        if name == "train":
            sp.add_argument("--vit", help="pretrained ViT checkpoint")
            sp.add_argument("--resume", help="joint checkpoint to resume from")
            sp.add_argument("--tabular-only", action="store_true",
                            help="train the row-independent tabular MAE (late-fusion baseline)")

    e = sub.add_parser("embed", help="extract per-tract Z'_tab embeddings")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int)

    pr = sub.add_parser("probe", help="ridge linear probe on the planted target")
    common(pr)
    pr.add_argument("--data", required=True)
    pr.add_argument("--table", default="geovista",
                    choices=["geovista", "tab", "vis_mean", "concat", "late_fusion"])
    pr.add_argument("--checkpoint")
    pr.add_argument("--embeddings")
    pr.add_argument("--split", default="random", choices=["random", "region"])
    pr.add_argument("--split-seed", type=int, default=0)
    pr.add_argument("--test-fraction", type=float, default=0.2)
    pr.add_argument("--ridge", type=float)
    pr.add_argument("--out")

    pc = sub.add_parser("pca", help="principal components of an embedding table")
    pc.add_argument("--embeddings", required=True)
    pc.add_argument("--k", type=int, default=8)
    pc.add_argument("--out", required=True)

    rc = sub.add_parser("reconstruct", help="masked reconstruction grids for one val region")
    common(rc)
    rc.add_argument("--data", required=True)
    rc.add_argument("--checkpoint")
    rc.add_argument("--region", type=int, default=0)
    rc.add_argument("--mask-seed", type=int, default=0)
    rc.add_argument("--channel", type=int)
    rc.add_argument("--out", required=True)

    ab = sub.add_parser("ablate", help="train and probe an ablation grid")
    common(ab)
    ab.add_argument("--axis", required=True, choices=list(AXES))
    ab.add_argument("--grid", help="comma-separated values (default: "
                    + "; ".join(f"{k}: {v}" for k, v in DEFAULT_GRIDS.items()) + ")")
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--out")

    at = sub.add_parser("attn-stats", help="tab<-vis attention locality")
    common(at)
    at.add_argument("--data", required=True)
    at.add_argument("--checkpoint")
    at.add_argument("--radius", type=float, default=10.0)
    at.add_argument("--limit", type=int)
    at.add_argument("--out")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "embed": cmd_embed, "probe": cmd_probe, "pca": cmd_pca,
            "reconstruct": cmd_reconstruct, "ablate": cmd_ablate, "attn-stats": cmd_attn_stats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, formats.FormatError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
