"""Embedding extraction, baselines, ridge probes, PCA and attention locality."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import no_grad
from .data import PreparedRegion, SyntheticWorld, prepare_region, sample_region, snap_center
from .tabular import TabularMAE
from .training import JointMasks, JointModel, collate, joint_forward

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray
    tag: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=float)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("embedding table has duplicate tract ids")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.ids):
            raise ValueError("one vector per tract is required")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def aligned(self, ids) -> np.ndarray:
        pos = {int(t): i for i, t in enumerate(self.ids)}
        return self.vectors[[pos[int(t)] for t in ids]]

    def concat(self, other: "EmbeddingTable", tag: str | None = None) -> "EmbeddingTable":
        return EmbeddingTable(self.ids, np.hstack([self.vectors, other.aligned(self.ids)]),
                              tag or f"{self.tag}+{other.tag}")

    def write(self, path) -> None:
        cols = "\t".join(f"e{j}" for j in range(self.dim))
        lines = [f"# provenance: {self.tag}", f"tract_id\t{cols}"]
        lines += [f"{t}\t" + "\t".join(repr(float(v)) for v in row)
                  for t, row in zip(self.ids, self.vectors)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "EmbeddingTable":
        lines = Path(path).read_text().splitlines()
        tag = lines[0].split(":", 1)[1].strip() if lines[0].startswith("#") else ""
        body = [ln.split("\t") for ln in lines[2:] if ln]
        return cls(np.array([int(r[0]) for r in body]),
                   np.array([[float(v) for v in r[1:]] for r in body]), tag)


# --------------------------------------------------------------- extraction

@dataclass
class ExtractionSet:
    """One region per tract, centred (after snapping) on its rep point."""

    regions: list[PreparedRegion]
    row: np.ndarray  # position of the tract within its region's tract list

    @property
    def tract_ids(self) -> np.ndarray:
        return np.array([r.tract_ids[i] for r, i in zip(self.regions, self.row)])


def extraction_set(world: SyntheticWorld, patch: int, tracts: Sequence[int] | None = None,
                   shifts_km: Sequence[tuple[float, float]] = ((0.0, 0.0),)) -> ExtractionSet:
    """Regions centred on each tract's rep point.

    Extra ``shifts_km`` add further regions per tract, offset from the rep
    point; their embeddings are averaged by ``extract_embeddings``.
    """
    tracts = range(world.n_tracts) if tracts is None else tracts
    regions, rows = [], []
    for t in tracts:
        if not (0 <= t < world.n_tracts):
            raise IndexError(f"tract {t} is outside the world")
        for shift in shifts_km:
            c = snap_center(world, world.rep_km[t] + np.asarray(shift, dtype=float))
            r = prepare_region(sample_region(world, c), patch)
            where = np.nonzero(r.tract_ids == t)[0]
            if len(where) != 1:
                raise ValueError(f"tract {t} missing from its region shifted by {shift}")
            regions.append(r)
            rows.append(int(where[0]))
    return ExtractionSet(regions, np.array(rows))


def _batches(es: ExtractionSet, batch_size: int):
    for s in range(0, len(es.regions), batch_size):
        yield s, collate(es.regions[s:s + batch_size])


def extract_embeddings(model: JointModel, es: ExtractionSet, batch_size: int = 16,
                       tag: str = "geovista") -> EmbeddingTable:
    """Z'_tab row of each tract from an unmasked joint forward pass, averaged
    over the tract's regions when the set holds several."""
    out = np.zeros((len(es.regions), model.cfg.tab.dim))
    with no_grad():
        for s, b in _batches(es, batch_size):
            res = joint_forward(model, b, JointMasks.none(b), decode=False)
            rows = es.row[s:s + b.size]
            out[s:s + b.size] = res.z_tab.data[np.arange(b.size), rows]
    ids, out = grouped_mean(out, es.tract_ids)
    return EmbeddingTable(ids, out, tag)


def attention_locality(model: JointModel, es: ExtractionSet, radius_km: float = 10.0,
                       batch_size: int = 16, layer: int = -1) -> dict:
    """Head-averaged tab<-vis attention mass on patches within ``radius_km``
    of each tract, against what uniform attention would place there."""
    if model.fusion is None:
        raise ValueError("model has no fusion blocks")
    mass, uni = [], []
    with no_grad():
        for s, b in _batches(es, batch_size):
            res = joint_forward(model, b, JointMasks.none(b), decode=False)
            w = model.fusion.tab_from_vis_weights(layer).mean(axis=1)  # (B, k_t, k_v)
            near = np.swapaxes(res.distances, 1, 2) <= radius_km
            rows = es.row[s:s + b.size]
            idx = np.arange(b.size)
            mass.append((w * near).sum(-1)[idx, rows])
            uni.append(near.mean(-1)[idx, rows])
    mass, uni = np.concatenate(mass), np.concatenate(uni)
    return {"attention_mass": float(mass.mean()), "uniform_mass": float(uni.mean()),
            "ratio": float(mass.mean() / uni.mean()), "n_tracts": int(len(mass))}


# ---------------------------------------------------------------- baselines

def tract_vision_means(world: SyntheticWorld) -> tuple[np.ndarray, np.ndarray]:
    """Mean raster value over cells whose centres fall inside each tract.

    Tracts with no cell centre take the cell nearest to their rep point and
    are flagged in the returned boolean array.
    """
    n = world.n_tracts
    lab = world.cell_tract.ravel()
    ok = lab >= 0
    counts = np.bincount(lab[ok], minlength=n)
    flat = world.vision.reshape(-1, world.vision.shape[-1])
    sums = np.stack([np.bincount(lab[ok], weights=flat[ok, c], minlength=n)
                     for c in range(flat.shape[1])], axis=1)
    means = sums / np.maximum(counts, 1)[:, None]
    fallback = counts == 0
    if fallback.any():
        xs, ys = world.cell_centers_km()
        for t in np.nonzero(fallback)[0]:
            j = int(np.argmin(np.abs(xs - world.rep_km[t, 0])))
            i = int(np.argmin(np.abs(ys - world.rep_km[t, 1])))
            means[t] = world.vision[i, j]
        log.warning("%d tract(s) contain no cell centre; used nearest cell", fallback.sum())
    return means, fallback


def baseline_embeddings(world: SyntheticWorld, kind: str,
                        tabmae: TabularMAE | None = None) -> EmbeddingTable:
    ids = np.arange(world.n_tracts)
    if kind == "tab":
        return EmbeddingTable(ids, world.features, "tab")
    vis, _ = tract_vision_means(world)
    if kind == "vis_mean":
        return EmbeddingTable(ids, vis, "vis_mean")
    if kind == "concat":
        return EmbeddingTable(ids, np.hstack([world.features, vis]), "concat")
    if kind == "late_fusion":
        if tabmae is None:
            raise ProbeError("late fusion needs a trained tabular MAE (missing checkpoint)")
        with no_grad():
            z = tabmae.latent(world.features).data
        return EmbeddingTable(ids, np.hstack([vis, z]), "late_fusion")
    raise ValueError(f"unknown baseline {kind!r}")


# -------------------------------------------------------------------- probes

def r_squared(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if len(y) < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for a constant target")
    return 1.0 - float(((y - y_hat) ** 2).sum()) / ss_tot


def default_ridge(x: np.ndarray) -> float:
    xc = x - x.mean(axis=0)
    return 1e-3 * float((xc * xc).sum()) / x.shape[1]


def ridge_fit(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Ridge with an unpenalised intercept, solved through the SVD of the
    centred design: coef = V diag(s / (s^2 + lam)) U^T y."""
    if lam < 0:
        raise ValueError("ridge strength must be non-negative")
    mx, my = x.mean(axis=0), y.mean()
    xc = x - mx
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if lam == 0.0:
        tol = s.max() * max(xc.shape) * np.finfo(float).eps if s.size else 0.0
        if s.size < x.shape[1] or s.min() <= tol:
            raise ProbeError("singular design at ridge 0; use a positive ridge strength")
    coef = vt.T @ ((s / (s * s + lam)) * (u.T @ (y - my)))
    return coef, float(my - mx @ coef)


@dataclass
class ProbeResult:
    r2_train: float
    r2_test: float
    ridge: float
    split: str
    coef: np.ndarray
    intercept: float
    n_train: int
    n_test: int


def fit_probe(table: EmbeddingTable | np.ndarray, targets: np.ndarray, train_idx, test_idx,
              lam: float | None = None, split: str = "random") -> ProbeResult:
    x = table.vectors if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=float)
    y = np.asarray(targets, dtype=float)
    tr, te = np.asarray(train_idx), np.asarray(test_idx)
    if np.intersect1d(tr, te).size:
        raise ProbeError("train and test rows overlap")
    lam = default_ridge(x[tr]) if lam is None else lam
    coef, b = ridge_fit(x[tr], y[tr], lam)
    return ProbeResult(r_squared(y[tr], x[tr] @ coef + b), r_squared(y[te], x[te] @ coef + b),
                       lam, split, coef, b, len(tr), len(te))


def random_split(ids: np.ndarray, test_fraction: float = 0.2, seed: int = 0):
    ids = np.asarray(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    k = int(round(test_fraction * len(ids)))
    return np.sort(ids[perm[k:]]), np.sort(ids[perm[:k]])


def region_holdout_split(world: SyntheticWorld):
    """(train, test): tracts outside / inside the holdout box."""
    inside = world.in_holdout()
    return np.nonzero(~inside)[0], np.nonzero(inside)[0]


def grouped_mean(values: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pool rows sharing a group label; returns (labels, pooled)."""
    labels, inv = np.unique(groups, return_inverse=True)
    values = np.asarray(values, dtype=float)
    v2 = values.reshape(len(values), -1)
    sums = np.zeros((len(labels), v2.shape[1]))
    np.add.at(sums, inv, v2)
    pooled = sums / np.bincount(inv)[:, None]
    return labels, pooled.reshape(len(labels), *values.shape[1:])


# ----------------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    components: np.ndarray  # (k, d), rows orthonormal
    explained_ratio: np.ndarray  # (k,)
    scores: np.ndarray  # (n, k)
    mean: np.ndarray


def pca(x, k: int) -> PCAResult:
    x = x.vectors if isinstance(x, EmbeddingTable) else np.asarray(x, dtype=float)
    n, d = x.shape
    if k > d:
        raise ValueError(f"k={k} exceeds dimension {d}")
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} samples for {k} components")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s * s
    total = var.sum()
    rank = int((s > s.max() * max(n, d) * np.finfo(float).eps).sum()) if s.size else 0
    if k > rank:
        warnings.warn(f"requested {k} components but rank is {rank}; returning {rank}")
        k = rank
    comps = vt[:k].copy()
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PCAResult(comps, ratio, xc @ comps.T, mean)
