"""Joint model, batching, ViT pretraining, joint training and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core, formats
from .config import ConfigError, ModelConfig, TrainConfig, config_hash, from_dict, to_dict
from .core import Tensor, no_grad
from .data import (InsufficientTractsError, PreparedRegion, SyntheticWorld, prepare_region,
                   sample_region)
from .fusion import BilateralFusion
from .geo import KM_PER_DEG, DistanceBiasConfig, distance_bias, pairwise_distance_km
from .nn import Module
from .optim import AdamW
from .tabular import TabularMAE, TabularTransformer, pad_index
from .vision import ViT, sample_mask, vision_loss

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(formats.FormatError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ------------------------------------------------------------------- model

@dataclass
class InputScaling:
    """Fixed input standardisation for the positional MLPs (saved with checkpoints)."""

    offset_scale: float = 1.0
    summary_shift: np.ndarray = field(default_factory=lambda: np.zeros(5))
    summary_scale: np.ndarray = field(default_factory=lambda: np.ones(5))

    @classmethod
    def fit(cls, regions: Sequence[PreparedRegion], region_km: float) -> "InputScaling":
        u = np.concatenate([r.tab_u for r in regions])
        shift = u.mean(axis=0)
        scale = 1.0 / np.maximum(u.std(axis=0), 1e-6)
        # offsets share one scale so the km geometry is not distorted
        half_deg = region_km / 2 / KM_PER_DEG
        shift[:2] = 0.0
        scale[:2] = 1.0 / half_deg
        return cls(1.0 / half_deg, shift, scale)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"scaling.offset": np.array([self.offset_scale]),
                "scaling.shift": self.summary_shift, "scaling.scale": self.summary_scale}

    @classmethod
    def from_arrays(cls, a: dict) -> "InputScaling":
        return cls(float(a["scaling.offset"][0]), a["scaling.shift"], a["scaling.scale"])


class JointModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 scaling: InputScaling | None = None, freeze_vit: bool = True):
        if cfg.vit.grid % cfg.vit.patch:
            raise ConfigError("vision grid must be divisible by the patch size")
        self.cfg = cfg
        self.scaling = scaling or InputScaling()
        self.freeze_vit = freeze_vit
        s = self.scaling
        self.vit = ViT(cfg.vit, rng, offset_scale=s.offset_scale)
        self.tabt = TabularTransformer(cfg.tab, rng, s.summary_shift, s.summary_scale)
        self.fusion = (BilateralFusion(cfg.vit.dim, cfg.tab.dim, cfg.fusion, rng)
                       if cfg.fusion.enabled else None)

    @property
    def bias_cfg(self) -> DistanceBiasConfig:
        return DistanceBiasConfig(self.cfg.fusion.d0_km, self.cfg.fusion.tau_km)

    def trainable_parameters(self) -> dict[str, core.Parameter]:
        frozen = ({f"vit.{n}" for n in self.vit.encoder_parameter_names()}
                  if self.freeze_vit else set())
        return {n: p for n, p in self.named_parameters() if n not in frozen}


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    patches: np.ndarray  # (B, N_v, P^2 C)
    patch_lonlat: np.ndarray  # (B, N_v, 2)
    vis_offsets: np.ndarray  # (B, N_v, 2)
    tab_x: np.ndarray  # (B, N, F), zero padded
    tab_u: np.ndarray  # (B, N, 5)
    tab_lonlat: np.ndarray  # (B, N, 2)
    valid: np.ndarray  # (B, N) real tract rows
    lat0: np.ndarray  # (B,)
    tract_ids: list

    @property
    def size(self) -> int:
        return len(self.patches)

    @property
    def n_tracts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def collate(regions: Sequence[PreparedRegion]) -> Batch:
    if not regions:
        raise ValueError("empty batch")
    n = max(r.n_tracts for r in regions)
    b = len(regions)
    f = regions[0].tab_x.shape[1]
    tab_x = np.zeros((b, n, f))
    tab_u = np.zeros((b, n, 5))
    tab_ll = np.zeros((b, n, 2))
    valid = np.zeros((b, n), dtype=bool)
    for i, r in enumerate(regions):
        k = r.n_tracts
        tab_x[i, :k], tab_u[i, :k], tab_ll[i, :k] = r.tab_x, r.tab_u, r.tab_lonlat
        valid[i, :k] = True
    return Batch(np.stack([r.patches for r in regions]),
                 np.stack([r.patch_lonlat for r in regions]),
                 np.stack([r.vis_offsets for r in regions]), tab_x, tab_u, tab_ll, valid,
                 np.array([r.lat0 for r in regions]), [r.tract_ids for r in regions])


@dataclass
class JointMasks:
    vis_visible: np.ndarray  # (B, k_v)
    vis_masked: np.ndarray  # (B, N_v) bool
    tab_visible: np.ndarray  # (B, k_t) padded with -1
    tab_visible_valid: np.ndarray  # (B, k_t)
    tab_masked: np.ndarray  # (B, N) bool

    @classmethod
    def none(cls, batch: Batch) -> "JointMasks":
        """Everything visible (embedding extraction)."""
        b, nv = batch.patches.shape[:2]
        vis = np.tile(np.arange(nv), (b, 1))
        idx, ok = pad_index([np.arange(k) for k in batch.n_tracts])
        return cls(vis, np.zeros((b, nv), dtype=bool), idx, ok,
                   np.zeros(batch.valid.shape, dtype=bool))


def draw_masks(batch: Batch, vis_ratio: float, tab_ratio: float,
               rng: np.random.Generator) -> JointMasks:
    """Independent per-sample draws for patches and tract rows."""
    b, nv = batch.patches.shape[:2]
    vis_visible, vis_masked = [], np.zeros((b, nv), dtype=bool)
    tab_rows, tab_masked = [], np.zeros(batch.valid.shape, dtype=bool)
    for i in range(b):
        vp = sample_mask(nv, vis_ratio, rng)
        vis_visible.append(vp.visible)
        vis_masked[i, vp.masked] = True
        tp = sample_mask(int(batch.n_tracts[i]), tab_ratio, rng)
        tab_rows.append(tp.visible)
        tab_masked[i, tp.masked] = True
    idx, ok = pad_index(tab_rows)
    return JointMasks(np.stack(vis_visible), vis_masked, idx, ok, tab_masked)


def _gather(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return a[np.arange(len(a))[:, None], idx]


# ----------------------------------------------------------------- forward

@dataclass
class JointOutput:
    vis_pred: Tensor | None
    tab_pred: Tensor | None
    z_vis: Tensor
    z_tab: Tensor  # fused visible tract tokens, Z'_tab
    phi: np.ndarray | None  # (B, k_v, k_t)
    distances: np.ndarray  # (B, k_v, k_t) km
    tab_from_vis: np.ndarray | None  # (B, H, k_t, k_v)


def _frozen(fn: Callable[[], Tensor], frozen: bool) -> Tensor:
    if not frozen:
        return fn()
    with no_grad():
        return Tensor(fn().data)


def joint_forward(model: JointModel, batch: Batch, masks: JointMasks,
                  decode: bool = True) -> JointOutput:
    vit, tabt = model.vit, model.tabt
    frozen = model.freeze_vit
    e_vis = _frozen(lambda: vit.encode_positions(batch.vis_offsets), frozen)
    z_vis = _frozen(lambda: vit.encode_visible(batch.patches, masks.vis_visible, e_vis), frozen)

    e_tab = tabt.encode_positions(batch.tab_u)
    ti = masks.tab_visible
    e_tab_vis = None if e_tab is None else core.gather_rows(e_tab, ti)
    z_tab = tabt.encode(_gather(batch.tab_x, ti), e_tab_vis, masks.tab_visible_valid)

    vis_ll = _gather(batch.patch_lonlat, masks.vis_visible)
    tab_ll = _gather(batch.tab_lonlat, ti)
    dist = np.stack([pairwise_distance_km(vis_ll[i], tab_ll[i], float(batch.lat0[i]))
                     for i in range(batch.size)])
    phi = None
    weights = None
    if model.fusion is not None:
        use_bias = model.cfg.fusion.use_bias and model.cfg.tab.use_encodings
        if use_bias:
            phi = distance_bias(dist, model.bias_cfg)
        z_vis, z_tab = model.fusion(z_vis, z_tab, phi, masks.tab_visible_valid)
        weights = model.fusion.tab_from_vis_weights()

    vis_pred = tab_pred = None
    if decode:
        vis_pred = vit.decode(z_vis, masks.vis_visible, e_vis)
        tab_pred = tabt.decode(z_tab, ti, batch.valid.shape[1], e_tab, batch.valid)
    return JointOutput(vis_pred, tab_pred, z_vis, z_tab, phi, dist, weights)


@dataclass
class LossParts:
    joint: Tensor
    vis: float
    tab: float


def joint_loss(model: JointModel, batch: Batch, masks: JointMasks, lam: float = 1.0,
               beta: float = 0.0) -> tuple[LossParts, JointOutput]:
    out = joint_forward(model, batch, masks)
    lv = vision_loss(out.vis_pred, batch.patches, masks.vis_masked, beta)
    lt = core.masked_l1(out.tab_pred, batch.tab_x, masks.tab_masked)
    total = core.weighted_sum([(1.0, lv), (lam, lt)])
    return LossParts(total, float(lv.data), float(lt.data)), out


def pretrain_loss(vit: ViT, batch: Batch, vis_visible: np.ndarray, vis_masked: np.ndarray,
                  beta: float) -> tuple[Tensor, float, float]:
    e_vis = vit.encode_positions(batch.vis_offsets)
    z = vit.encode_visible(batch.patches, vis_visible, e_vis)
    pred = vit.decode(z, vis_visible, e_vis)
    mse = core.masked_mse(pred, batch.patches, vis_masked)
    if beta == 0.0:
        return mse, float(mse.data), 0.0
    cos = core.cosine_distance_loss(pred, batch.patches, vis_masked)
    return core.weighted_sum([(1.0, mse), (beta, cos)]), float(mse.data), float(cos.data)


# --------------------------------------------------------------- schedules

def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    t = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def schedule(cfg: TrainConfig) -> tuple[int, int, int]:
    """(steps per epoch, warmup steps, total steps)."""
    spe = max(1, math.ceil(cfg.regions_per_epoch / cfg.batch_size))
    return spe, int(round(cfg.warmup_epochs * spe)), spe * cfg.epochs


# -------------------------------------------------------------- region pool

@dataclass
class RegionPool:
    regions: list[PreparedRegion]
    skipped: int = 0

    def __len__(self):
        return len(self.regions)


def build_pool(world: SyntheticWorld, centers: np.ndarray, patch: int,
               limit: int | None = None) -> RegionPool:
    regions, skipped = [], 0
    for c in centers[:limit]:
        try:
            regions.append(prepare_region(sample_region(world, c), patch))
        except InsufficientTractsError:
            skipped += 1
    if skipped:
        log.warning("skipped %d region(s) with fewer than two tracts", skipped)
    if not regions:
        raise ValueError("no usable regions")
    return RegionPool(regions, skipped)


def epoch_batches(pool: RegionPool, cfg: TrainConfig, rng: np.random.Generator):
    """Per-epoch region draw (with replacement once the pool is exhausted)."""
    n = cfg.regions_per_epoch
    idx = (rng.permutation(len(pool))[:n] if n <= len(pool)
           else rng.integers(0, len(pool), size=n))
    for s in range(0, n, cfg.batch_size):
        yield collate([pool.regions[i] for i in idx[s:s + cfg.batch_size]])


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str  # "joint" | "vit" | "tabmae"
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict[str, np.ndarray]
    scaling: InputScaling
    step: int = 0
    epoch: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_cfg, self.train_cfg)


def save_checkpoint(path, ck: Checkpoint) -> None:
    arrays = {f"param.{k}": v for k, v in ck.params.items()}
    arrays.update(ck.optimizer)
    arrays.update(ck.scaling.arrays())
    meta = {"kind": ck.kind, "model": to_dict(ck.model_cfg), "train": to_dict(ck.train_cfg),
            "config_hash": ck.config_hash, "step": ck.step, "epoch": ck.epoch,
            "rng_state": ck.rng_state, "extra": ck.extra}
    formats.write(path, "checkpoint", arrays, meta)


def load_checkpoint(path, expect_hash: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"missing checkpoint: {p}")
    a, meta = formats.read(p, kind="checkpoint")
    mcfg = from_dict(ModelConfig, meta["model"])
    tcfg = from_dict(TrainConfig, meta["train"])
    ck = Checkpoint(meta["kind"], mcfg, tcfg,
                    {k[6:]: v for k, v in a.items() if k.startswith("param.")},
                    InputScaling.from_arrays(a), meta["step"], meta["epoch"],
                    {k: v for k, v in a.items() if k.startswith("opt.")},
                    meta["rng_state"], meta.get("extra", {}))
    if ck.config_hash != meta["config_hash"]:
        raise CheckpointError("stored config hash does not match stored configs")
    if expect_hash is not None and ck.config_hash != expect_hash:
        raise ConfigMismatchError(
            f"checkpoint config {ck.config_hash} does not match requested {expect_hash}")
    return ck


def model_from_checkpoint(ck: Checkpoint):
    rng = np.random.default_rng(0)
    if ck.kind == "joint":
        m = JointModel(ck.model_cfg, rng, ck.scaling, ck.train_cfg.freeze_vit)
    elif ck.kind == "vit":
        m = ViT(ck.model_cfg.vit, rng, offset_scale=ck.scaling.offset_scale)
    elif ck.kind == "tabmae":
        m = TabularMAE(ck.model_cfg.tab, rng)
    else:
        raise CheckpointError(f"unknown checkpoint kind {ck.kind!r}")
    m.load_state_dict(ck.params)
    return m


# ----------------------------------------------------------------- loggers

class LossLog:
    """Append-only tab-separated loss records."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path) if path is not None else None
        self.columns = list(columns)
        self.rows: list[list] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                self.path.write_text("\t".join(self.columns) + "\n")

    def append(self, *values) -> None:
        self.rows.append(list(values))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write("\t".join(_fmt(v) for v in values) + "\n")


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_loss_log(path) -> tuple[list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    return cols, np.array([[float(x) for x in ln.split("\t")] for ln in lines[1:]])


def _check_finite(step: int, **parts) -> None:
    bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss at step {step}: {bad}")


# ------------------------------------------------------------- pretraining

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    val_history: list[dict]
    model: Module

    @property
    def val_initial(self) -> dict:
        return self.val_history[0]

    @property
    def val_final(self) -> dict:
        return self.val_history[-1]


def _fixed_val_batches(pool: RegionPool, cfg: TrainConfig, vis_ratio: float,
                       tab_ratio: float | None, seed: int):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(0, len(pool), cfg.batch_size):
        b = collate(pool.regions[s:s + cfg.batch_size])
        if tab_ratio is None:
            vis = [sample_mask(b.patches.shape[1], vis_ratio, rng) for _ in range(b.size)]
            vm = np.zeros(b.patches.shape[:2], dtype=bool)
            for i, p in enumerate(vis):
                vm[i, p.masked] = True
            out.append((b, np.stack([p.visible for p in vis]), vm))
        else:
            out.append((b, draw_masks(b, vis_ratio, tab_ratio, rng)))
    return out


def _rng_pair(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def pretrain_vit(train: RegionPool, val: RegionPool, model_cfg: ModelConfig, cfg: TrainConfig,
                 scaling: InputScaling, log_path=None, val_log_path=None,
                 progress: Callable[[str], None] | None = None) -> TrainResult:
    """MAE pretraining of the ViT on vision crops with masked MSE + beta * cosine."""
    init_rng, data_rng = _rng_pair(cfg.seed)
    vit = ViT(model_cfg.vit, init_rng, offset_scale=scaling.offset_scale)
    opt = AdamW(vit.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    spe, warm, total = schedule(cfg)
    vb = _fixed_val_batches(val, cfg, cfg.vis_mask, None, cfg.seed + 1)

    def validate() -> dict:
        tot = mse = cos = 0.0
        with no_grad():
            for b, vis, vm in vb:
                loss, m, c = pretrain_loss(vit, b, vis, vm, cfg.beta_cos)
                tot += float(loss.data) * b.size
                mse += m * b.size
                cos += c * b.size
        n = sum(b.size for b, _, _ in vb)
        return {"loss": tot / n, "mse": mse / n, "cos": cos / n}

    history = [validate()]
    vlog = LossLog(val_log_path, ["epoch", "val_loss", "val_mse", "val_cos"])
    vlog.append(0, history[0]["loss"], history[0]["mse"], history[0]["cos"])
    tlog = LossLog(log_path, ["step", "lr", "L_mse", "L_cos", "L_pre"])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for batch in epoch_batches(train, cfg, data_rng):
            vis = [sample_mask(batch.patches.shape[1], cfg.vis_mask, data_rng)
                   for _ in range(batch.size)]
            vm = np.zeros(batch.patches.shape[:2], dtype=bool)
            for i, p in enumerate(vis):
                vm[i, p.masked] = True
            loss, m, c = pretrain_loss(vit, batch, np.stack([p.visible for p in vis]), vm,
                                       cfg.beta_cos)
            _check_finite(step, L_pre=float(loss.data))
            loss.backward()
            lr = lr_at(step, cfg.lr, warm, total)
            opt.step(lr)
            tlog.append(step, lr, m, c, float(loss.data))
            step += 1
        history.append(validate())
        h = history[-1]
        vlog.append(epoch, h["loss"], h["mse"], h["cos"])
        if progress:
            progress(f"pretrain epoch {epoch}/{cfg.epochs} val {h['loss']:.4f}")
    ck = Checkpoint("vit", model_cfg, cfg, vit.state_dict(), scaling, step, cfg.epochs,
                    opt.state_arrays(), data_rng.bit_generator.state)
    return TrainResult(ck, history, vit)


# ---------------------------------------------------------- joint training

def build_joint_model(model_cfg: ModelConfig, cfg: TrainConfig, scaling: InputScaling,
                      vit_params: dict[str, np.ndarray] | None = None) -> JointModel:
    init_rng, _ = _rng_pair(cfg.seed)
    model = JointModel(model_cfg, init_rng, scaling, cfg.freeze_vit)
    if vit_params is not None:
        enc = model.vit.encoder_parameter_names()
        model.vit.load_state_dict({k: v for k, v in vit_params.items() if k in enc},
                                  strict=False)
    return model


def joint_train(model: JointModel, train: RegionPool, val: RegionPool, cfg: TrainConfig,
                log_path=None, val_log_path=None, resume: Checkpoint | None = None,
                progress: Callable[[str], None] | None = None,
                max_steps: int | None = None, checkpoint_path=None) -> TrainResult:
    """Minimise L_vis + lam * L_tab with fresh independent masks per sample.

    With ``checkpoint_path`` set, a resumable checkpoint is written after
    every epoch.
    """
    if train.regions[0].tab_x.shape[1] != model.cfg.tab.features:
        raise ConfigError("feature count of the data does not match the model")
    if train.regions[0].patches.shape[-1] != model.cfg.vit.patch ** 2 * model.cfg.vit.channels:
        raise ConfigError("vision channels of the data do not match the model")
    _, data_rng = _rng_pair(cfg.seed)
    opt = AdamW(model.trainable_parameters().items(), cfg.lr, (cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    spe, warm, total = schedule(cfg)
    step, start_epoch = 0, 1
    if resume is not None:
        model.load_state_dict(resume.params)
        opt.load_state_arrays(resume.optimizer, resume.step)
        data_rng.bit_generator.state = resume.rng_state
        step, start_epoch = resume.step, resume.epoch + 1
    vb = _fixed_val_batches(val, cfg, cfg.vis_mask, cfg.tab_mask, cfg.seed + 1)

    def validate() -> dict:
        lv = lt = 0.0
        with no_grad():
            for b, m in vb:
                parts, _ = joint_loss(model, b, m, cfg.lam, cfg.beta_cos)
                lv += parts.vis * b.size
                lt += parts.tab * b.size
        n = sum(b.size for b, _ in vb)
        return {"vis": lv / n, "tab": lt / n, "joint": (lv + cfg.lam * lt) / n}

    history = [validate()] if resume is None else list(resume.extra.get("val_history", []))
    vlog = LossLog(val_log_path, ["epoch", "val_L_vis", "val_L_tab", "val_L_joint"])
    if resume is None:
        vlog.append(0, history[0]["vis"], history[0]["tab"], history[0]["joint"])
    tlog = LossLog(log_path, ["step", "lr", "L_vis", "L_tab", "L_joint"])
    epoch = start_epoch - 1

    def snapshot() -> Checkpoint:
        return Checkpoint("joint", model.cfg, cfg, model.state_dict(), model.scaling, step, epoch,
                          opt.state_arrays(), data_rng.bit_generator.state,
                          {"val_history": history})

    for epoch in range(start_epoch, cfg.epochs + 1):
        for batch in epoch_batches(train, cfg, data_rng):
            masks = draw_masks(batch, cfg.vis_mask, cfg.tab_mask, data_rng)
            parts, _ = joint_loss(model, batch, masks, cfg.lam, cfg.beta_cos)
            lj = float(parts.joint.data)
            _check_finite(step, L_vis=parts.vis, L_tab=parts.tab)
            parts.joint.backward()
            lr = lr_at(step, cfg.lr, warm, total)
            opt.step(lr)
            tlog.append(step, lr, parts.vis, parts.tab, lj)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        history.append(validate())
        h = history[-1]
        vlog.append(epoch, h["vis"], h["tab"], h["joint"])
        if progress:
            progress(f"joint epoch {epoch}/{cfg.epochs} val vis {h['vis']:.4f} "
                     f"tab {h['tab']:.4f}")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, snapshot())
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(snapshot(), history, model)


# --------------------------------------------------- tabular-only baseline

def train_tabular_mae(rows: np.ndarray, model_cfg: ModelConfig, cfg: TrainConfig,
                      scaling: InputScaling, log_path=None) -> TrainResult:
    """Row-independent MAE on tract feature rows (late-fusion baseline)."""
    init_rng, data_rng = _rng_pair(cfg.seed)
    mae = TabularMAE(model_cfg.tab, init_rng)
    opt = AdamW(mae.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)
    n, f = rows.shape
    bs = cfg.batch_size * 16
    spe = max(1, math.ceil(n / bs))
    total = spe * cfg.epochs
    warm = int(round(cfg.warmup_epochs * spe))
    tlog = LossLog(log_path, ["step", "lr", "L_tab"])
    n_mask = max(1, int(np.floor(cfg.tab_mask * f)))

    def draw(k):
        m = np.zeros((k, f), dtype=bool)
        for i in range(k):
            m[i, data_rng.permutation(f)[:n_mask]] = True
        return m

    def loss_on(x, m):
        pred = mae(x, m)
        return core.masked_l1(core.reshape(pred, (*pred.shape, 1)), x[..., None], m)

    val_mask = np.random.default_rng(cfg.seed + 1).permutation(f)[:n_mask]
    vm = np.zeros(rows.shape, dtype=bool)
    vm[:, val_mask] = True
    with no_grad():
        history = [{"tab": float(loss_on(rows, vm).data)}]
    step = 0
    for _ in range(cfg.epochs):
        perm = data_rng.permutation(n)
        for s in range(0, n, bs):
            x = rows[perm[s:s + bs]]
            loss = loss_on(x, draw(len(x)))
            _check_finite(step, L_tab=float(loss.data))
            loss.backward()
            lr = lr_at(step, cfg.lr, warm, total)
            opt.step(lr)
            tlog.append(step, lr, float(loss.data))
            step += 1
        with no_grad():
            history.append({"tab": float(loss_on(rows, vm).data)})
    ck = Checkpoint("tabmae", model_cfg, cfg, mae.state_dict(), scaling, step, cfg.epochs,
                    opt.state_arrays(), data_rng.bit_generator.state)
    return TrainResult(ck, history, mae)
