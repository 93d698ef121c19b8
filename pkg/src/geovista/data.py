"""Synthetic co-registered world, region sampling, splits and on-disk formats.

The world is a planar km box anchored at ``(ref_lon, ref_lat)``. Four smooth
latent fields live on it (sums of isotropic Gaussian bumps, standardised):

* ``L0`` vision-dominant: drives the raster channels, and only enters the
  tract table through features that also carry per-tract nuisance noise;
* ``L1`` tabular-dominant: enters tract features only together with a
  spatially white nuisance, so a single tract cannot separate the two while
  an average over neighbouring tracts can;
* ``L2`` shared by both modalities;
* ``L3`` tabular-only smooth structure.

The planted probe target is ``L0(tract) + mean of L1 over tracts within
target_radius_km + noise``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, WorldConfig, config_hash, to_dict
from .geo import (GeoPoint, LocalProjection, location_offset, points_in_polygon,
                  polygon_centroid, polygon_intersects_box, tract_summary, TractPolygon)
from .vision import VisionGrid, patchify_array

N_LATENTS = 4


class InsufficientTractsError(ValueError):
    """Raised when a region box intersects fewer than two tracts."""


@dataclass
class LatentField:
    centers: np.ndarray  # (nb, 2) km
    amps: np.ndarray  # (nb,)
    length_km: float
    mean: float = 0.0
    std: float = 1.0

    def raw(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        flat = xy.reshape(-1, 2)
        out = np.zeros(len(flat))
        for s in range(0, len(flat), 4096):
            d2 = ((flat[s:s + 4096, None, :] - self.centers[None]) ** 2).sum(-1)
            out[s:s + 4096] = np.exp(-d2 / (2 * self.length_km ** 2)) @ self.amps
        return out.reshape(xy.shape[:-1])

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        return (self.raw(xy) - self.mean) / self.std

    def raster(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Separable evaluation on the (ys, xs) grid (rows follow ``ys``)."""
        two_l2 = 2 * self.length_km ** 2
        gx = np.exp(-(xs[None, :] - self.centers[:, 0:1]) ** 2 / two_l2)
        gy = np.exp(-(ys[None, :] - self.centers[:, 1:2]) ** 2 / two_l2)
        return (gy.T * self.amps) @ gx

    def lipschitz_bound(self) -> float:
        """Upper bound on |grad f| of the standardised field."""
        return float(np.abs(self.amps).sum() * math.exp(-0.5) / self.length_km / self.std)


@dataclass
class SyntheticWorld:
    config: WorldConfig
    seed: int
    projection: LocalProjection
    fields: list[LatentField]
    latents: np.ndarray  # (K, ny, nx)
    vision: np.ndarray  # (ny, nx, C)
    vision_mix: np.ndarray  # (C, 2)
    vision_offset: np.ndarray  # (C,)
    rings_km: list[np.ndarray]
    rep_km: np.ndarray  # (N, 2)
    cell_tract: np.ndarray  # (ny, nx) tract index of each cell centre
    tract_latents: np.ndarray  # (N, K)
    features_raw: np.ndarray  # (N, F)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target: np.ndarray  # (N,)
    holdout_box: tuple[float, float, float, float]
    feature_median: np.ndarray = None
    _bounds: np.ndarray = field(default=None, repr=False)

    @property
    def n_tracts(self) -> int:
        return len(self.rings_km)

    @property
    def features(self) -> np.ndarray:
        """Median-imputed, z-scored features (training-split statistics)."""
        raw = self.features_raw
        if self.feature_median is not None and np.isnan(raw).any():
            raw = np.where(np.isnan(raw), self.feature_median, raw)
        return (raw - self.feature_mean) / self.feature_std

    @property
    def extent(self) -> tuple[float, float, float, float]:
        w, h = self.config.extent_km
        return -w / 2, -h / 2, w / 2, h / 2

    @property
    def tract_bounds(self) -> np.ndarray:
        if self._bounds is None:
            self._bounds = np.array([[r[:, 0].min(), r[:, 1].min(), r[:, 0].max(), r[:, 1].max()]
                                     for r in self.rings_km])
        return self._bounds

    def cell_centers_km(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0, x1, y1 = self.extent
        c = self.config.cell_km
        ny, nx = self.vision.shape[:2]
        return x0 + (np.arange(nx) + 0.5) * c, y1 - (np.arange(ny) + 0.5) * c

    def rep_lonlat(self) -> np.ndarray:
        return self.projection.to_geo(self.rep_km)

    def ring_lonlat(self, i: int) -> np.ndarray:
        return self.projection.to_geo(self.rings_km[i])

    def in_holdout(self) -> np.ndarray:
        x0, y0, x1, y1 = self.holdout_box
        r = self.rep_km
        return (r[:, 0] >= x0) & (r[:, 0] <= x1) & (r[:, 1] >= y0) & (r[:, 1] <= y1)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(config_hash(self.config).encode())
        for a in (self.vision, self.features_raw, self.target, self.rep_km):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def _warp(n: int, warp: float, rng: np.random.Generator) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n + 1)
    psi = rng.uniform(0, 2 * np.pi)
    return t + warp / (2 * np.pi) * (np.sin(2 * np.pi * t + psi) - np.sin(psi))


def _tract_grid(cfg: WorldConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Jittered, warped grid of octagonal tracts that tiles the extent."""
    w, h = cfg.extent_km
    tx, ty = cfg.tracts_x, cfg.tracts_y
    gx = _warp(tx, cfg.warp, rng) * w - w / 2
    gy = _warp(ty, cfg.warp, rng) * h - h / 2
    sx = np.diff(gx).min()
    sy = np.diff(gy).min()
    s = min(sx, sy)
    vx, vy = np.meshgrid(gx, gy, indexing="ij")  # (tx+1, ty+1)
    corners = np.stack([vx, vy], axis=-1)
    jit = rng.uniform(-1, 1, size=corners.shape) * cfg.corner_jitter * s
    jit[0, :, :] = jit[-1, :, :] = 0.0
    jit[:, 0, :] = jit[:, -1, :] = 0.0
    corners = corners + jit

    hmid = 0.5 * (corners[:-1, :, :] + corners[1:, :, :])  # (tx, ty+1) edges along x
    hj = rng.uniform(-1, 1, size=hmid.shape) * cfg.edge_jitter * s
    hj[:, 0, 1] = hj[:, -1, 1] = 0.0
    hmid = hmid + hj
    vmid = 0.5 * (corners[:, :-1, :] + corners[:, 1:, :])  # (tx+1, ty) edges along y
    vj = rng.uniform(-1, 1, size=vmid.shape) * cfg.edge_jitter * s
    vj[0, :, 0] = vj[-1, :, 0] = 0.0
    vmid = vmid + vj

    rings = []
    for l in range(ty):
        for k in range(tx):
            rings.append(np.array([
                corners[k, l], hmid[k, l], corners[k + 1, l], vmid[k + 1, l],
                corners[k + 1, l + 1], hmid[k, l + 1], corners[k, l + 1], vmid[k, l],
            ]))
    return rings


def _label_cells(rings: list[np.ndarray], xs: np.ndarray, ys: np.ndarray, cell: float
                 ) -> np.ndarray:
    labels = np.full((len(ys), len(xs)), -1, dtype=np.int64)
    x0, y1 = xs[0] - cell / 2, ys[0] + cell / 2
    for t, ring in enumerate(rings):
        j0 = max(int(np.floor((ring[:, 0].min() - x0) / cell)), 0)
        j1 = min(int(np.ceil((ring[:, 0].max() - x0) / cell)), len(xs))
        i0 = max(int(np.floor((y1 - ring[:, 1].max()) / cell)), 0)
        i1 = min(int(np.ceil((y1 - ring[:, 1].min()) / cell)), len(ys))
        xx, yy = np.meshgrid(xs[j0:j1], ys[i0:i1])
        inside = points_in_polygon(np.stack([xx.ravel(), yy.ravel()], -1), ring)
        sub = labels[i0:i1, j0:j1].reshape(-1)
        sub[inside] = t
        labels[i0:i1, j0:j1] = sub.reshape(i1 - i0, j1 - j0)
    return labels


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> SyntheticWorld:
    cfg = config or WorldConfig()
    if cfg.tracts_x < 1 or cfg.tracts_y < 1:
        raise ConfigError("world needs at least one tract")
    if cfg.channels < 1 or cfg.features < 3:
        raise ConfigError("world needs >= 1 channel and >= 3 features")
    if len(cfg.length_scales_km) != N_LATENTS:
        raise ConfigError(f"expected {N_LATENTS} latent length scales")
    if not 0 < cfg.holdout_frac ** 2 <= 0.5:
        raise ConfigError("holdout box must cover at most half of the extent")
    w, h = cfg.extent_km
    nx, ny = w / cfg.cell_km, h / cfg.cell_km
    if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
        raise ConfigError("world extent must be a whole number of cells")
    nx, ny = int(round(nx)), int(round(ny))
    rng = np.random.default_rng(seed)
    proj = LocalProjection(cfg.ref_lon, cfg.ref_lat)
    xs = -w / 2 + (np.arange(nx) + 0.5) * cfg.cell_km
    ys = h / 2 - (np.arange(ny) + 0.5) * cfg.cell_km

    fields, latents = [], []
    for ell in cfg.length_scales_km:
        pad = 2 * ell
        nb = max(int(cfg.bump_density * (w + 2 * pad) * (h + 2 * pad) / ell ** 2), 4)
        centers = np.column_stack([rng.uniform(-w / 2 - pad, w / 2 + pad, nb),
                                   rng.uniform(-h / 2 - pad, h / 2 + pad, nb)])
        f = LatentField(centers, rng.normal(size=nb), float(ell))
        raw = f.raster(xs, ys)
        f.mean, f.std = float(raw.mean()), float(raw.std())
        fields.append(f)
        latents.append((raw - f.mean) / f.std)
    latents = np.stack(latents)

    c = cfg.channels
    mix = rng.normal(size=(c, 2))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    offset = rng.normal(0.0, 0.3, size=c)
    vis = np.tanh(0.8 * np.einsum("ck,kyx->yxc", mix, latents[[0, 2]]) + offset)
    vis = vis + cfg.vision_noise * rng.normal(size=vis.shape)
    vis = (vis - vis.mean(axis=(0, 1))) / vis.std(axis=(0, 1))

    rings = _tract_grid(cfg, rng)
    rep = np.array([polygon_centroid(r) for r in rings])
    if cfg.rep_jitter_km > 0:
        rep = rep + rng.normal(0.0, cfg.rep_jitter_km, size=rep.shape)
    labels = _label_cells(rings, xs, ys, cfg.cell_km)
    n = len(rings)
    counts = np.bincount(labels[labels >= 0], minlength=n)
    tl = np.stack([np.bincount(labels[labels >= 0], weights=latents[k][labels >= 0], minlength=n)
                   for k in range(N_LATENTS)], axis=1) / np.maximum(counts, 1)[:, None]
    empty = counts == 0
    if empty.any():
        rc = rep[empty]
        tl[empty] = np.stack([f(rc) for f in fields], axis=1)

    f_total = cfg.features
    g = np.array_split(np.arange(f_total), 3)
    feats = np.zeros((n, f_total))
    eta1 = rng.normal(0.0, cfg.nuisance_std, n)
    eta2 = rng.normal(0.0, cfg.nuisance_std, n)
    for j in g[0]:
        feats[:, j] = rng.choice([-1, 1]) * rng.uniform(0.7, 1.3) * (tl[:, 1] + eta1)
    for j in g[1]:
        feats[:, j] = rng.choice([-1, 1]) * rng.uniform(0.7, 1.3) * (tl[:, 0] + eta2)
    for j in g[2]:
        cd = rng.normal(size=2)
        cd /= np.linalg.norm(cd)
        feats[:, j] = cd[0] * tl[:, 2] + cd[1] * tl[:, 3]
    feats += cfg.feature_noise * rng.normal(size=feats.shape)
    if cfg.missing_frac > 0:
        feats[rng.random(feats.shape) < cfg.missing_frac] = np.nan

    d = np.sqrt(((rep[:, None, :] - rep[None, :, :]) ** 2).sum(-1))
    nbr = d <= cfg.target_radius_km
    l1_nbhd = (nbr * tl[None, :, 1]).sum(1) / nbr.sum(1)
    target = tl[:, 0] + l1_nbhd + cfg.target_noise * rng.normal(size=n)

    side_x, side_y = cfg.holdout_frac * w, cfg.holdout_frac * h
    holdout = (-w / 2, h / 2 - side_y, -w / 2 + side_x, h / 2)
    world = SyntheticWorld(cfg, seed, proj, fields, latents, vis, mix, offset, rings, rep,
                           labels, tl, feats, np.zeros(f_total), np.ones(f_total), target,
                           holdout)
    train_rows = ~world.in_holdout()
    world.feature_median = np.nanmedian(feats[train_rows], axis=0)
    filled = np.where(np.isnan(feats), world.feature_median, feats)
    world.feature_mean = filled[train_rows].mean(axis=0)
    world.feature_std = filled[train_rows].std(axis=0)
    return world


# ------------------------------------------------------------------- regions

@dataclass
class Region:
    center: GeoPoint
    size_km: float
    vision: VisionGrid
    tract_ids: np.ndarray
    features: np.ndarray  # (N, F) standardised
    rep_points: np.ndarray  # (N, 2) lon/lat
    rings: list[np.ndarray]  # lon/lat rings

    @property
    def n_tracts(self) -> int:
        return len(self.tract_ids)


def _aligned_crop(world: SyntheticWorld, box) -> np.ndarray | None:
    x0, y0, x1, y1 = box
    wx0, wy0, wx1, wy1 = world.extent
    c = world.config.cell_km
    j0 = (x0 - wx0) / c
    i0 = (wy1 - y1) / c
    nj = (x1 - x0) / c
    ni = (y1 - y0) / c
    vals = np.array([j0, i0, nj, ni])
    if np.all(np.abs(vals - np.round(vals)) < 1e-6):
        j0, i0, nj, ni = (int(round(v)) for v in vals)
        return world.vision[i0:i0 + ni, j0:j0 + nj]
    return None


def _bilinear(world: SyntheticWorld, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    wx0, wy0, wx1, wy1 = world.extent
    c = world.config.cell_km
    ny, nx = world.vision.shape[:2]
    fj = np.clip((xs - wx0) / c - 0.5, 0, nx - 1)
    fi = np.clip((wy1 - ys) / c - 0.5, 0, ny - 1)
    j0 = np.minimum(np.floor(fj).astype(int), nx - 2)
    i0 = np.minimum(np.floor(fi).astype(int), ny - 2)
    tj, ti = fj - j0, fi - i0
    ii, jj = np.meshgrid(i0, j0, indexing="ij")
    ti, tj = np.meshgrid(ti, tj, indexing="ij")
    v = world.vision
    return ((1 - ti)[..., None] * (1 - tj)[..., None] * v[ii, jj]
            + (1 - ti)[..., None] * tj[..., None] * v[ii, jj + 1]
            + ti[..., None] * (1 - tj)[..., None] * v[ii + 1, jj]
            + ti[..., None] * tj[..., None] * v[ii + 1, jj + 1])


def snap_center(world: SyntheticWorld, xy, size_km: float | None = None) -> np.ndarray:
    """Move a km centre so that its box edges fall on raster cell edges."""
    size_km = size_km or world.config.region_km
    c = world.config.cell_km
    x0, y0, x1, y1 = world.extent
    half = size_km / 2
    x = x0 + half + np.round((xy[0] - x0 - half) / c) * c
    y = y1 - half - np.round((y1 - half - xy[1]) / c) * c
    x = np.clip(x, x0 + half, x1 - half)
    y = np.clip(y, y0 + half, y1 - half)
    return np.array([x, y])


def tracts_in_box(world: SyntheticWorld, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    b = world.tract_bounds
    cand = np.nonzero((b[:, 2] >= x0) & (b[:, 0] <= x1) & (b[:, 3] >= y0) & (b[:, 1] <= y1))[0]
    keep = []
    for t in cand:
        inner = b[t, 0] >= x0 and b[t, 2] <= x1 and b[t, 1] >= y0 and b[t, 3] <= y1
        if inner or polygon_intersects_box(world.rings_km[t], box):
            keep.append(t)
    return np.array(keep, dtype=np.int64)


def sample_region(world: SyntheticWorld, p0, size_km: float | None = None,
                  grid: int | None = None) -> Region:
    """Crop the raster over the box centred at ``p0`` and collect every tract
    whose polygon intersects the box.

    ``p0`` is a GeoPoint or planar km coordinates.
    """
    size_km = size_km or world.config.region_km
    grid = grid or world.config.grid
    if isinstance(p0, GeoPoint):
        cxy = world.projection.to_km(np.array([p0.lon, p0.lat]))
    else:
        cxy = np.asarray(p0, dtype=float)
    half = size_km / 2
    box = (cxy[0] - half, cxy[1] - half, cxy[0] + half, cxy[1] + half)
    wx0, wy0, wx1, wy1 = world.extent
    tol = 1e-9
    if box[0] < wx0 - tol or box[1] < wy0 - tol or box[2] > wx1 + tol or box[3] > wy1 + tol:
        raise ValueError("region box leaves the world extent")
    crop = None
    if abs(size_km / grid - world.config.cell_km) < 1e-12:
        crop = _aligned_crop(world, box)
    if crop is None:
        cell = size_km / grid
        xs = box[0] + (np.arange(grid) + 0.5) * cell
        ys = box[3] - (np.arange(grid) + 0.5) * cell
        crop = _bilinear(world, xs, ys)
    ids = tracts_in_box(world, box)
    if len(ids) < 2:
        raise InsufficientTractsError(f"box intersects {len(ids)} tract(s)")
    nw = world.projection.to_geo(np.array([box[0], box[3]]))
    center = world.projection.to_geo(cxy)
    vg = VisionGrid(np.array(crop), GeoPoint(float(nw[0]), float(nw[1])), size_km / grid,
                    world.projection)
    return Region(GeoPoint(float(center[0]), float(center[1])), size_km, vg, ids,
                  world.features[ids], world.projection.to_geo(world.rep_km[ids]),
                  [world.ring_lonlat(t) for t in ids])


@dataclass
class PreparedRegion:
    """Model-ready arrays for one region."""

    patches: np.ndarray  # (N_v, P^2 C)
    patch_lonlat: np.ndarray  # (N_v, 2)
    vis_offsets: np.ndarray  # (N_v, 2)
    tab_x: np.ndarray  # (N, F)
    tab_u: np.ndarray  # (N, 5)
    tab_lonlat: np.ndarray  # (N, 2)
    lat0: float
    tract_ids: np.ndarray
    grid_shape: tuple

    @property
    def n_tracts(self) -> int:
        return len(self.tract_ids)


def prepare_region(region: Region, patch: int) -> PreparedRegion:
    p0 = region.center
    u = np.stack([tract_summary(rp, TractPolygon(ring, check=False), p0)
                  for rp, ring in zip(region.rep_points, region.rings)])
    centers = region.vision.patch_centers(patch)
    return PreparedRegion(patchify_array(region.vision.data, patch), centers,
                          location_offset(centers, p0), region.features, u,
                          region.rep_points, p0.lat, region.tract_ids, region.vision.data.shape)


# ------------------------------------------------------------------ file I/O

def write_region(path, region: Region) -> None:
    if region.n_tracts == 0:
        raise ValueError("refusing to write a region with no tracts")
    offsets = np.cumsum([0] + [len(r) for r in region.rings])
    arrays = {
        "vision": region.vision.data,
        "tract_ids": region.tract_ids,
        "features": region.features,
        "rep_points": region.rep_points,
        "ring_offsets": offsets,
        "ring_vertices": np.concatenate(region.rings),
    }
    meta = {
        "center": [region.center.lon, region.center.lat],
        "size_km": region.size_km,
        "origin": [region.vision.origin.lon, region.vision.origin.lat],
        "cell_km": region.vision.cell_km,
        "projection": [region.vision.projection.lon0, region.vision.projection.lat0],
    }
    formats.write(path, "region", arrays, meta)


def read_region(path) -> Region:
    a, meta = formats.read(path, kind="region")
    off = a["ring_offsets"]
    rings = [a["ring_vertices"][off[i]:off[i + 1]] for i in range(len(off) - 1)]
    vg = VisionGrid(a["vision"], GeoPoint(*meta["origin"]), meta["cell_km"],
                    LocalProjection(*meta["projection"]))
    return Region(GeoPoint(*meta["center"]), meta["size_km"], vg, a["tract_ids"],
                  a["features"], a["rep_points"], rings)


def save_world(path, world: SyntheticWorld) -> None:
    arrays = {"latents": world.latents, "vision": world.vision,
              "vision_mix": world.vision_mix, "vision_offset": world.vision_offset,
              "rep_km": world.rep_km, "cell_tract": world.cell_tract,
              "tract_latents": world.tract_latents, "features_raw": world.features_raw,
              "feature_mean": world.feature_mean, "feature_std": world.feature_std,
              "feature_median": world.feature_median,
              "target": world.target, "holdout_box": np.array(world.holdout_box),
              "ring_offsets": np.cumsum([0] + [len(r) for r in world.rings_km]),
              "ring_vertices": np.concatenate(world.rings_km)}
    for k, f in enumerate(world.fields):
        arrays[f"field{k}.centers"] = f.centers
        arrays[f"field{k}.amps"] = f.amps
        arrays[f"field{k}.params"] = np.array([f.length_km, f.mean, f.std])
    meta = {"config": to_dict(world.config), "seed": world.seed, "digest": world.digest()}
    formats.write(path, "world", arrays, meta)


def load_world(path) -> SyntheticWorld:
    from .config import from_dict
    a, meta = formats.read(path, kind="world")
    cfg = from_dict(WorldConfig, meta["config"])
    off = a["ring_offsets"]
    rings = [a["ring_vertices"][off[i]:off[i + 1]] for i in range(len(off) - 1)]
    fields = []
    for k in range(N_LATENTS):
        ell, mean, std = a[f"field{k}.params"]
        fields.append(LatentField(a[f"field{k}.centers"], a[f"field{k}.amps"], ell, mean, std))
    return SyntheticWorld(cfg, meta["seed"], LocalProjection(cfg.ref_lon, cfg.ref_lat), fields,
                          a["latents"], a["vision"], a["vision_mix"], a["vision_offset"], rings,
                          a["rep_km"], a["cell_tract"], a["tract_latents"], a["features_raw"],
                          a["feature_mean"], a["feature_std"], a["target"],
                          tuple(a["holdout_box"]), a["feature_median"])


# -------------------------------------------------------------------- splits

@dataclass
class DatasetManifest:
    seed: int
    world_digest: str
    region_km: float
    holdout_box: tuple[float, float, float, float]
    train: np.ndarray  # (n, 2) km centres
    val: np.ndarray

    def to_text(self) -> str:
        lines = ["format = geovista-manifest/1",
                 f"seed = {self.seed}",
                 f"world_digest = {self.world_digest}",
                 f"region_km = {self.region_km!r}",
                 "holdout_box_km = " + ", ".join(repr(float(v)) for v in self.holdout_box),
                 f"n_train = {len(self.train)}",
                 f"n_val = {len(self.val)}"]
        rows = [("train", c) for c in self.train] + [("val", c) for c in self.val]
        for i, (split, c) in enumerate(rows):
            lines.append(f"region.{i:05d} = {split} {float(c[0])!r} {float(c[1])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for raw in text.splitlines():
            if "=" in raw:
                k, v = raw.split("=", 1)
                kv[k.strip()] = v.strip()
        if kv.get("format") != "geovista-manifest/1":
            raise formats.VersionError(f"unsupported manifest format {kv.get('format')!r}")
        train, val = [], []
        for k in sorted(k for k in kv if k.startswith("region.")):
            split, x, y = kv[k].split()
            (train if split == "train" else val).append((float(x), float(y)))
        box = tuple(float(v) for v in kv["holdout_box_km"].split(","))
        return cls(int(kv["seed"]), kv["world_digest"], float(kv["region_km"]), box,
                   np.array(train).reshape(-1, 2), np.array(val).reshape(-1, 2))

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text())


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def make_splits(world: SyntheticWorld, n_regions: int = 600, seed: int = 0,
                val_fraction: float = 0.1) -> DatasetManifest:
    """Random region centres outside the holdout box, split 9:1 train/val.

    Training boxes stay clear of the holdout box grown by the largest tract
    radius, so no holdout tract polygon intersects a training region.
    """
    x0, y0, x1, y1 = world.extent
    hb = world.holdout_box
    if (hb[2] - hb[0]) * (hb[3] - hb[1]) > 0.5 * (x1 - x0) * (y1 - y0):
        raise ConfigError("holdout box covers more than half of the world")
    r = world.config.region_km
    margin = max(float(np.max(np.linalg.norm(ring - rp, axis=1)))
                 for ring, rp in zip(world.rings_km, world.rep_km))
    grown = (hb[0] - margin, hb[1] - margin, hb[2] + margin, hb[3] + margin)
    rng = np.random.default_rng(seed)
    centers = []
    tries = 0
    while len(centers) < n_regions:
        tries += 1
        if tries > 1000 * n_regions:
            raise ConfigError("could not place regions outside the holdout box")
        c = snap_center(world, (rng.uniform(x0 + r / 2, x1 - r / 2),
                                rng.uniform(y0 + r / 2, y1 - r / 2)))
        box = (c[0] - r / 2, c[1] - r / 2, c[0] + r / 2, c[1] + r / 2)
        if _boxes_overlap(box, grown):
            continue
        centers.append(c)
    centers = np.array(centers)
    n_val = int(round(val_fraction * n_regions))
    perm = rng.permutation(n_regions)
    return DatasetManifest(seed, world.digest(), r, hb, centers[perm[n_val:]],
                           centers[perm[:n_val]])
