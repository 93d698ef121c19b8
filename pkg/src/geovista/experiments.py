"""Seeded end-to-end runs: pretrain, joint variants, probes and ablation tables."""

from __future__ import annotations

import dataclasses as dc
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import (ModelConfig, TrainConfig, WorldConfig, config_hash, pretrain_defaults,
                     to_dict)
from .data import DatasetManifest, SyntheticWorld, generate_world, make_splits
from .evaluate import (ExtractionSet, attention_locality, baseline_embeddings, extract_embeddings,
                       extraction_set, fit_probe, random_split, region_holdout_split)
from .training import (InputScaling, RegionPool, TrainResult, build_joint_model, build_pool,
                       joint_train, pretrain_vit, train_tabular_mae)


@dataclass
class RunSchedule:
    """Training volumes for one seeded experiment."""

    pretrain_epochs: int = 10
    joint_epochs: int = 15
    regions_per_epoch: int = 250
    n_regions: int = 600
    val_regions: int = 32
    test_fraction: float = 0.2
    locality_tracts: int = 300
    locality_radius_km: float = 10.0


@dataclass
class SeedContext:
    seed: int
    world: SyntheticWorld
    manifest: DatasetManifest
    train: RegionPool
    val: RegionPool
    scaling: InputScaling
    model_cfg: ModelConfig
    schedule: RunSchedule
    pretrained: TrainResult | None = None
    extraction: ExtractionSet | None = None

    @property
    def random_split(self):
        ids = np.nonzero(~self.world.in_holdout())[0]
        return random_split(ids, self.schedule.test_fraction, self.seed)

    @property
    def holdout_split(self):
        return region_holdout_split(self.world)


def prepare_seed(seed: int, world_cfg: WorldConfig | None = None,
                 model_cfg: ModelConfig | None = None,
                 schedule: RunSchedule | None = None) -> SeedContext:
    world_cfg = world_cfg or WorldConfig()
    model_cfg = model_cfg or ModelConfig()
    schedule = schedule or RunSchedule()
    world = generate_world(world_cfg, seed)
    manifest = make_splits(world, schedule.n_regions, seed)
    patch = model_cfg.vit.patch
    train = build_pool(world, manifest.train, patch)
    val = build_pool(world, manifest.val, patch, limit=schedule.val_regions)
    scaling = InputScaling.fit(train.regions, world_cfg.region_km)
    return SeedContext(seed, world, manifest, train, val, scaling, model_cfg, schedule)


def pretrain_config(ctx: SeedContext) -> TrainConfig:
    return dc.replace(pretrain_defaults(), epochs=ctx.schedule.pretrain_epochs,
                      regions_per_epoch=ctx.schedule.regions_per_epoch, seed=ctx.seed)


def joint_config(ctx: SeedContext, **overrides) -> TrainConfig:
    return scheduled_joint_config(ctx.schedule, ctx.seed, **overrides)


def scheduled_joint_config(schedule: RunSchedule, seed: int, **overrides) -> TrainConfig:
    return dc.replace(TrainConfig(), epochs=schedule.joint_epochs,
                      regions_per_epoch=schedule.regions_per_epoch, seed=seed, **overrides)


def ensure_pretrained(ctx: SeedContext, log_dir: Path | None = None) -> TrainResult:
    if ctx.pretrained is None:
        ctx.pretrained = pretrain_vit(
            ctx.train, ctx.val, ctx.model_cfg, pretrain_config(ctx), ctx.scaling,
            log_path=log_dir / "pretrain_loss.tsv" if log_dir else None,
            val_log_path=log_dir / "pretrain_val.tsv" if log_dir else None)
    return ctx.pretrained


def ensure_extraction(ctx: SeedContext) -> ExtractionSet:
    if ctx.extraction is None:
        ctx.extraction = extraction_set(ctx.world, ctx.model_cfg.vit.patch)
    return ctx.extraction


# ------------------------------------------------------------- variants

def _with(cfg, path: str, value):
    head, _, rest = path.partition(".")
    if not rest:
        return dc.replace(cfg, **{head: value})
    return dc.replace(cfg, **{head: _with(getattr(cfg, head), rest, value)})


def variant(axis: str, value, model_cfg: ModelConfig, train_cfg: TrainConfig
            ) -> tuple[ModelConfig, TrainConfig]:
    """Map one ablation grid point onto configs."""
    if axis == "tab_dim":
        return _with(model_cfg, "tab.dim", int(value)), train_cfg
    if axis == "encodings":
        table = {"none": (False, False), "geom/loc": (True, False), "geom/loc+bias": (True, True)}
        if value not in table:
            raise ValueError(f"encodings must be one of {sorted(table)}")
        enc, bias = table[value]
        m = _with(_with(model_cfg, "tab.use_encodings", enc), "fusion.use_bias", bias)
        return m, train_cfg
    if axis == "fusion_capacity":
        return _with(model_cfg, "fusion.layers", int(value)), train_cfg
    if axis == "tab_mask":
        return model_cfg, dc.replace(train_cfg, tab_mask=float(value))
    if axis == "row_attn":
        on = value in (True, "yes", "on", 1, "true")
        return _with(model_cfg, "tab.row_attention", on), train_cfg
    raise ValueError(f"unknown ablation axis {axis!r}")


AXES = ("tab_dim", "encodings", "fusion_capacity", "tab_mask", "row_attn")
DEFAULT_GRIDS = {
    "tab_dim": [32, 64],
    "encodings": ["none", "geom/loc", "geom/loc+bias"],
    "fusion_capacity": [1, 2],
    "tab_mask": [0.5, 0.75],
    "row_attn": ["no", "yes"],
}


@dataclass
class VariantResult:
    label: str
    seed: int
    r2_random: float
    r2_holdout: float
    val_initial: dict
    val_final: dict
    locality: dict | None = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return dc.asdict(self)


def run_variant(ctx: SeedContext, model_cfg: ModelConfig, train_cfg: TrainConfig,
                label: str = "geovista", locality: bool = False,
                log_dir: Path | None = None) -> tuple[VariantResult, TrainResult]:
    t0 = time.time()
    pre = ensure_pretrained(ctx)
    model = build_joint_model(model_cfg, train_cfg, ctx.scaling, pre.checkpoint.params)
    res = joint_train(model, ctx.train, ctx.val, train_cfg,
                      log_path=log_dir / f"{label}_loss.tsv" if log_dir else None,
                      val_log_path=log_dir / f"{label}_val.tsv" if log_dir else None)
    es = ensure_extraction(ctx)
    emb = extract_embeddings(model, es, tag=label)
    y = ctx.world.target
    r_rand = fit_probe(emb, y, *ctx.random_split).r2_test
    r_hold = fit_probe(emb, y, *ctx.holdout_split, split="region").r2_test
    loc = None
    if locality and model.fusion is not None:
        k = min(ctx.schedule.locality_tracts, len(es.regions))
        sub = ExtractionSet(es.regions[:k], es.row[:k])
        loc = attention_locality(model, sub, ctx.schedule.locality_radius_km)
    return (VariantResult(label, ctx.seed, r_rand, r_hold, res.val_initial, res.val_final, loc,
                          time.time() - t0), res)


def baseline_scores(ctx: SeedContext, late_fusion: bool = False) -> dict[str, dict]:
    y = ctx.world.target
    out = {}
    kinds = ["tab", "vis_mean", "concat"]
    tabmae = None
    if late_fusion:
        rows = ctx.world.features[~ctx.world.in_holdout()]
        tabmae = train_tabular_mae(rows, ctx.model_cfg, joint_config(ctx), ctx.scaling).model
        kinds.append("late_fusion")
    for kind in kinds:
        emb = baseline_embeddings(ctx.world, kind, tabmae)
        out[kind] = {"r2_random": fit_probe(emb, y, *ctx.random_split).r2_test,
                     "r2_holdout": fit_probe(emb, y, *ctx.holdout_split).r2_test}
    return out


# ------------------------------------------------------------- ablations

@dataclass
class AblationReport:
    axis: str
    grid: list
    seeds: list[int]
    results: dict = field(default_factory=dict)  # str(value) -> [VariantResult per seed]

    def median(self, value, key: str = "r2_random") -> float:
        return float(np.median([getattr(r, key) for r in self.results[str(value)]]))

    def to_text(self) -> str:
        lines = [f"# ablation axis: {self.axis}", f"# seeds: {' '.join(map(str, self.seeds))}",
                 "value\tseed\tr2_random\tr2_holdout"]
        for v in self.grid:
            for r in self.results[str(v)]:
                lines.append(f"{v}\t{r.seed}\t{r.r2_random:.6f}\t{r.r2_holdout:.6f}")
        lines.append("value\tmedian_r2_random\tmedian_r2_holdout")
        for v in self.grid:
            lines.append(f"{v}\t{self.median(v):.6f}\t{self.median(v, 'r2_holdout'):.6f}")
        return "\n".join(lines) + "\n"


def run_ablation(axis: str, grid: list | None = None, seeds=(0, 1, 2),
                 contexts: dict[int, SeedContext] | None = None,
                 schedule: RunSchedule | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationReport:
    """Train every grid point with shared seeds and probe it."""
    grid = list(DEFAULT_GRIDS[axis] if grid is None else grid)
    contexts = {} if contexts is None else contexts
    report = AblationReport(axis, grid, list(seeds))
    for seed in seeds:
        if seed not in contexts:
            contexts[seed] = prepare_seed(seed, schedule=schedule)
        ctx = contexts[seed]
        for v in grid:
            m, t = variant(axis, v, ctx.model_cfg, joint_config(ctx))
            res, _ = run_variant(ctx, m, t, label=f"{axis}={v}")
            report.results.setdefault(str(v), []).append(res)
            if progress:
                progress(f"seed {seed} {axis}={v}: R2 {res.r2_random:.4f}")
    return report


# ------------------------------------------------------- desk and suites

def desk_run(world_cfg: WorldConfig, model_cfg: ModelConfig, pretrain_cfg: TrainConfig,
             train_cfg: TrainConfig, n_regions: int = 600, seed: int = 0,
             progress: Callable[[str], None] | None = None) -> dict:
    """Generate, pretrain and jointly train once; report validation losses and wall time."""
    t0 = time.time()
    world = generate_world(world_cfg, seed)
    manifest = make_splits(world, n_regions, seed)
    patch = model_cfg.vit.patch
    train = build_pool(world, manifest.train, patch)
    val = build_pool(world, manifest.val, patch, limit=train_cfg.val_regions)
    scaling = InputScaling.fit(train.regions, world_cfg.region_km)
    t_data = time.time()
    pre = pretrain_vit(train, val, model_cfg, dc.replace(pretrain_cfg, seed=seed), scaling,
                       progress=progress)
    t_pre = time.time()
    tcfg = dc.replace(train_cfg, seed=seed)
    model = build_joint_model(model_cfg, tcfg, scaling, pre.checkpoint.params)
    joint = joint_train(model, train, val, tcfg, progress=progress)
    t_end = time.time()
    return {"n_tracts": world.n_tracts, "raster": list(world.vision.shape),
            "pretrain_initial": pre.val_initial, "pretrain_final": pre.val_final,
            "joint_initial": joint.val_initial, "joint_final": joint.val_final,
            "seconds": {"data": t_data - t0, "pretrain": t_pre - t_data,
                        "joint": t_end - t_pre, "total": t_end - t0}}


SUITE_VARIANTS = (("geovista", None, None), ("row_attn=no", "row_attn", "no"),
                  ("encodings=none", "encodings", "none"), ("tab_mask=0.75", "tab_mask", 0.75))


def seed_suite(seed: int, cache_dir: Path | None = None, schedule: RunSchedule | None = None,
               progress: Callable[[str], None] | None = None) -> dict:
    """Baselines plus the default model and its ablations for one seed.

    Each entry is cached on its own; the world and the pretrained ViT are
    only built when some entry misses the cache.
    """
    schedule = schedule or RunSchedule()
    world_cfg, model_cfg = WorldConfig(), ModelConfig()
    shared = [seed, to_dict(schedule), to_dict(world_cfg)]
    ctx: list[SeedContext] = []

    def context() -> SeedContext:
        if not ctx:
            ctx.append(prepare_seed(seed, world_cfg, model_cfg, schedule))
        return ctx[0]

    out = {"baselines": cached(cache_dir, ["baselines", *shared],
                               lambda: baseline_scores(context()))}
    for label, axis, value in SUITE_VARIANTS:
        m, t = model_cfg, scheduled_joint_config(schedule, seed)
        if axis is not None:
            m, t = variant(axis, value, m, t)

        def run(m=m, t=t, label=label):
            res, _ = run_variant(context(), m, t, label, locality=axis is None)
            return res.to_dict()

        out[label] = cached(cache_dir, ["variant", label, to_dict(m), to_dict(t), *shared], run)
        if progress:
            r = out[label]
            progress(f"seed {seed} {label}: R2 random {r['r2_random']:.4f} "
                     f"holdout {r['r2_holdout']:.4f}")
    return out


# ---------------------------------------------------------------- caching

def source_digest() -> str:
    """Digest of the package sources, so cached results expire on code edits."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached(cache_dir: Path | None, key_parts: list, fn: Callable[[], dict]) -> dict:
    """JSON result cache keyed by configs plus the source digest."""
    if cache_dir is None:
        return fn()
    key = hashlib.sha256(json.dumps([source_digest(), *key_parts], sort_keys=True,
                                    default=str).encode()).hexdigest()[:20]
    path = Path(cache_dir) / f"{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    out = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(out, indent=1, default=float))
    tmp.replace(path)
    return out


def config_key(*cfgs) -> str:
    return config_hash(*cfgs)
