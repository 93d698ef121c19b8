"""Local geographic math: offsets, distances, polygon summaries, spatial bias.

Everything works in a local equirectangular approximation. A point's offset
from a reference ``p0`` is ``[lat - lat0, (lon - lon0) * cos(lat0)]`` in
degrees; multiplying by ``KM_PER_DEG`` turns that into planar kilometres.
Distances, areas and perimeters all use this same map so they agree with
each other inside a region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Tensor
from .nn import MLP, Module

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise GeometryError("non-finite coordinate")
        if not -180.0 <= self.lon <= 180.0 or not -90.0 < self.lat < 90.0:
            raise GeometryError(f"coordinate out of range: ({self.lon}, {self.lat})")


@dataclass(frozen=True)
class DistanceBiasConfig:
    d0_km: float = 10.0
    tau_km: float = 25.0

    def __post_init__(self):
        if self.tau_km <= 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class LocalProjection:
    """Planar km <-> lon/lat around a fixed anchor (east = +x, north = +y)."""

    lon0: float
    lat0: float

    def to_geo(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        lat = self.lat0 + xy[..., 1] / KM_PER_DEG
        lon = self.lon0 + xy[..., 0] / (KM_PER_DEG * math.cos(math.radians(self.lat0)))
        return np.stack([lon, lat], axis=-1)

    def to_km(self, lonlat: np.ndarray) -> np.ndarray:
        lonlat = np.asarray(lonlat, dtype=float)
        y = (lonlat[..., 1] - self.lat0) * KM_PER_DEG
        x = (lonlat[..., 0] - self.lon0) * KM_PER_DEG * math.cos(math.radians(self.lat0))
        return np.stack([x, y], axis=-1)


def _lonlat(points) -> np.ndarray:
    if isinstance(points, GeoPoint):
        return np.array([points.lon, points.lat])
    if len(points) and isinstance(points[0], GeoPoint):
        return np.array([[p.lon, p.lat] for p in points])
    return np.asarray(points, dtype=float)


def location_offset(p, p0) -> np.ndarray:
    """Offset ``[dlat, dlon * cos(lat0)]`` in degrees; vectorised over ``p``.

    ``p`` may be a GeoPoint, a list of them, or an (..., 2) lon/lat array.
    """
    ll = _lonlat(p)
    l0 = _lonlat(p0)
    c = math.cos(math.radians(float(l0[1])))
    return np.stack([ll[..., 1] - l0[1], (ll[..., 0] - l0[0]) * c], axis=-1)


def pairwise_distance_km(a, b, lat0: float) -> np.ndarray:
    """Equirectangular distances (km) between two point sets; (Na, Nb)."""
    a = _lonlat(a)
    b = _lonlat(b)
    c = math.cos(math.radians(lat0))
    dlat = a[..., :, None, 1] - b[..., None, :, 1]
    dlon = (a[..., :, None, 0] - b[..., None, :, 0]) * c
    return KM_PER_DEG * np.sqrt(dlat * dlat + dlon * dlon)


def distance_bias(d, cfg: DistanceBiasConfig = DistanceBiasConfig()):
    """``tanh((d0 - d) / tau)``; zero at d0, decreasing, bounded in (-1, 1)."""
    return np.tanh((cfg.d0_km - np.asarray(d, dtype=float)) / cfg.tau_km)


def build_bias(query_points, key_points, lat0: float,
               cfg: DistanceBiasConfig = DistanceBiasConfig()) -> np.ndarray:
    return distance_bias(pairwise_distance_km(query_points, key_points, lat0), cfg)


# ----------------------------------------------------------------- polygons

def normalize_ring(ring: np.ndarray) -> np.ndarray:
    """Drop the closing duplicate vertex (if any) and repeated vertices."""
    ring = np.asarray(ring, dtype=float)
    if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    keep = np.ones(len(ring), dtype=bool)
    keep[1:] = np.any(np.diff(ring, axis=0) != 0, axis=1)
    return ring[keep]


def shoelace_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def perimeter(xy: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(xy, -1, axis=0) - xy, axis=1).sum())


def polygon_centroid(xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if abs(a) < 1e-15:
        raise GeometryError("degenerate polygon has no centroid")
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)


def convex_hull(xy: np.ndarray) -> np.ndarray:
    """Monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(xy, dtype=float))))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return ((o1 == 0 and on_seg(p1, p2, p3)) or (o2 == 0 and on_seg(p1, p2, p4))
            or (o3 == 0 and on_seg(p3, p4, p1)) or (o4 == 0 and on_seg(p3, p4, p2)))


def is_simple(xy: np.ndarray) -> bool:
    """Segment-pair self-intersection test (O(n^2); meant for small rings)."""
    n = len(xy)
    for i in range(n):
        a, b = xy[i], xy[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a, b, xy[j], xy[(j + 1) % n]):
                return False
    return True


class TractPolygon:
    """Exterior ring of a tract in lon/lat degrees."""

    def __init__(self, ring, check: bool = True):
        ring = normalize_ring(_lonlat(ring))
        if len(np.unique(ring, axis=0)) < 3:
            raise GeometryError("a polygon needs at least 3 distinct vertices")
        if check and len(ring) <= 64 and not is_simple(ring):
            raise GeometryError("polygon ring self-intersects")
        self.ring = ring

    def closed(self) -> np.ndarray:
        return np.vstack([self.ring, self.ring[:1]])

    def __len__(self):
        return len(self.ring)


@dataclass(frozen=True)
class GeometrySummary:
    area_km2: float
    perimeter_km: float
    hull_area_km2: float

    @property
    def log_area(self) -> float:
        return math.log1p(self.area_km2)

    @property
    def compactness(self) -> float:
        return 4.0 * math.pi * self.area_km2 / self.perimeter_km ** 2

    @property
    def hull_ratio(self) -> float:
        return self.area_km2 / self.hull_area_km2


def project_ring_km(ring_lonlat: np.ndarray, p0) -> np.ndarray:
    return location_offset(ring_lonlat, p0) * KM_PER_DEG


def geometry_summary(poly: TractPolygon, p0) -> GeometrySummary:
    xy = project_ring_km(poly.ring, p0)
    area = shoelace_area(xy)
    if area <= 1e-12:
        raise GeometryError("zero-area polygon")
    hull = shoelace_area(convex_hull(xy))
    return GeometrySummary(area, perimeter(xy), max(hull, area))


def tract_summary(rep_point, poly: TractPolygon, p0) -> np.ndarray:
    """5-vector ``[dlat, dlon cos(lat0), log(1+A), compactness, hull ratio]``."""
    g = geometry_summary(poly, p0)
    off = location_offset(rep_point, p0)
    return np.array([off[0], off[1], g.log_area, g.compactness, g.hull_ratio])


def points_in_polygon(points: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, vectorised over points."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    xi, yi = ring[:, 0][None, :], ring[:, 1][None, :]
    xj, yj = np.roll(ring[:, 0], 1)[None, :], np.roll(ring[:, 1], 1)[None, :]
    straddle = (yi > y) != (yj > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = (xj - xi) * (y - yi) / (yj - yi) + xi
    hits = straddle & (x < xcross)
    return (hits.sum(axis=1) % 2) == 1


def polygon_intersects_box(ring: np.ndarray, box: tuple[float, float, float, float]) -> bool:
    """True when a polygon and an axis-aligned box (x0, y0, x1, y1) overlap."""
    x0, y0, x1, y1 = box
    rx, ry = ring[:, 0], ring[:, 1]
    if rx.max() < x0 or rx.min() > x1 or ry.max() < y0 or ry.min() > y1:
        return False
    inside = (rx >= x0) & (rx <= x1) & (ry >= y0) & (ry <= y1)
    if inside.any():
        return True
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    if points_in_polygon(corners, ring).any():
        return True
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        for k in range(4):
            if _segments_cross(a, b, corners[k], corners[(k + 1) % 4]):
                return True
    return False


# ------------------------------------------------------- positional encoders

class PositionEncoder(Module):
    """Learned MLP from a geographic descriptor to a token-width encoding.

    Inputs are shifted and scaled by fixed constants before the MLP so that
    degree offsets (~0.1-1) and log-areas (~5) enter on a comparable scale.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 input_shift=None, input_scale=None):
        self.mlp = MLP(d_in, 4 * d_out, d_out, rng)
        self.input_shift = np.zeros(d_in) if input_shift is None else np.asarray(input_shift, float)
        self.input_scale = np.ones(d_in) if input_scale is None else np.asarray(input_scale, float)

    def __call__(self, u) -> Tensor:
        u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=float)
        return self.mlp(Tensor((u - self.input_shift) * self.input_scale))


def encode_vision_positions(offsets, f_vis: PositionEncoder) -> Tensor:
    return f_vis(offsets)


def encode_tract_positions(summaries, f_tab: PositionEncoder) -> Tensor:
    return f_tab(summaries)
