"""Spherical geometry: ERP <-> tangent-plane (gnomonic) sampling and fixed-FoV slabs.

ERP convention: column ``u`` is longitude ``2π(u+0.5)/W − π`` and row ``v`` is
latitude ``π/2 − π(v+0.5)/H``.  Tangent-plane coordinates have ``x`` to the
east and ``y`` to the north of the tangent point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .tensor import Tensor, concat, split

POLE_EPS = 1e-6
SUPPORTED_FFP_FOVS = (60, 72, 90, 120, 180, 360)
DEFAULT_PATCH_FOV_DEG = 96.0


@dataclass(frozen=True)
class TangentLayout:
    centers: tuple  # ((lat, lon), ...) in radians
    patch_fov: float  # radians per side
    patch_size: tuple = (64, 64)

    def __post_init__(self):
        if not 0.0 < self.patch_fov < math.pi:
            raise GeometryError(f"patch_fov must lie in (0, π), got {self.patch_fov}")


@dataclass(frozen=True)
class SampleGrid:
    """Fractional ERP coordinates for every output pixel."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    erp_dims: tuple

    @property
    def shape(self) -> tuple:
        return self.u.shape


@dataclass
class ErpImage:
    pixels: np.ndarray  # float32, 3×H×W in [0, 1]
    labels: Optional[np.ndarray] = None  # uint8 H×W

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DimensionError(f"ERP pixels must be C×H×W, got {self.pixels.shape}")
        _, h, w = self.pixels.shape
        if w % 4:
            raise DimensionError(f"ERP width {w} is not divisible by 4")
        if self.labels is not None and self.labels.shape != (h, w):
            raise DimensionError(f"label map {self.labels.shape} does not match ERP {(h, w)}")

    @property
    def dims(self) -> tuple:
        return self.pixels.shape[1:]


def default_layout(patch_fov_deg: float = DEFAULT_PATCH_FOV_DEG, patch_size=(64, 64)) -> TangentLayout:
    """18 tangent patches: latitudes −45°, 0°, +45° × 6 longitudes.

    The equatorial row sits at −180°, −120°, …, 120°; the two off-equator rows
    are staggered by +30°.
    """
    centers = []
    for lat in (-45.0, 0.0, 45.0):
        offset = 0.0 if lat == 0.0 else 30.0
        for k in range(6):
            lon = -180.0 + 60.0 * k + offset
            centers.append((math.radians(lat), math.radians(lon)))
    return TangentLayout(tuple(centers), math.radians(patch_fov_deg), tuple(patch_size))


LAYOUTS = {"default": default_layout}


def get_layout(name: str, patch_size=(64, 64)) -> TangentLayout:
    try:
        return LAYOUTS[name](patch_size=patch_size)
    except KeyError:
        raise ConfigError(f"unknown patch layout '{name}'") from None


# -- coordinate maps -----------------------------------------------------------
def wrap_lon(lon):
    return (np.asarray(lon) + np.pi) % (2 * np.pi) - np.pi


def erp_lonlat(h: int, w: int):
    """Longitude/latitude of every ERP pixel centre, each shaped H×W."""
    lon = 2 * np.pi * (np.arange(w) + 0.5) / w - np.pi
    lat = np.pi / 2 - np.pi * (np.arange(h) + 0.5) / h
    return np.meshgrid(lon, lat)


def lonlat_to_uv(lon, lat, erp_dims):
    h, w = erp_dims
    lat = np.clip(lat, -np.pi / 2 + POLE_EPS, np.pi / 2 - POLE_EPS)
    u = np.mod((np.asarray(lon) + np.pi) / (2 * np.pi) * w - 0.5, w)
    v = np.clip((np.pi / 2 - lat) / np.pi * h - 0.5, 0.0, h - 1)
    return u, v


def plane_coords(fov: float, patch_size) -> tuple:
    """Plane coordinates of pixel centres, spanning [−tan(fov/2), tan(fov/2)]."""
    h, w = patch_size
    t = math.tan(fov / 2)
    x = (2 * (np.arange(w) + 0.5) / w - 1) * t
    y = (1 - 2 * (np.arange(h) + 0.5) / h) * t
    return np.meshgrid(x, y)


def gnomonic_inverse(x, y, center):
    """Plane point(s) on the tangent plane at ``center`` -> (lat, lon)."""
    lat0, lon0 = center
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rho = np.hypot(x, y)
    c = np.arctan(rho)
    sin_c, cos_c = np.sin(c), np.cos(c)
    safe = np.where(rho > 0, rho, 1.0)
    sin_lat = cos_c * math.sin(lat0) + np.where(rho > 0, y * sin_c * math.cos(lat0) / safe, 0.0)
    lat = np.arcsin(np.clip(sin_lat, -1.0, 1.0))
    lon = lon0 + np.arctan2(x * sin_c, rho * math.cos(lat0) * cos_c - y * math.sin(lat0) * sin_c)
    lon = np.where(rho > 0, lon, lon0)
    return lat, wrap_lon(lon)


def gnomonic_forward(lat, lon, center):
    """Sphere direction(s) -> (x, y, cos_c); points with cos_c <= 0 are behind the plane."""
    lat0, lon0 = center
    lat = np.asarray(lat, dtype=np.float64)
    dlon = np.asarray(lon, dtype=np.float64) - lon0
    cos_c = math.sin(lat0) * np.sin(lat) + math.cos(lat0) * np.cos(lat) * np.cos(dlon)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.cos(lat) * np.sin(dlon) / cos_c
        y = (math.cos(lat0) * np.sin(lat) - math.sin(lat0) * np.cos(lat) * np.cos(dlon)) / cos_c
    return x, y, cos_c


def in_frustum(lat, lon, center, fov: float) -> np.ndarray:
    x, y, cos_c = gnomonic_forward(lat, lon, center)
    t = math.tan(fov / 2)
    with np.errstate(invalid="ignore"):
        return (cos_c > 0) & (np.abs(x) <= t) & (np.abs(y) <= t)


def layout_coverage(layout: TangentLayout, lat, lon) -> np.ndarray:
    """Number of layout patches containing each direction."""
    hits = np.zeros(np.shape(lat), dtype=int)
    for center in layout.centers:
        hits += in_frustum(lat, lon, center, layout.patch_fov)
    return hits


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@lru_cache(maxsize=256)
def _gnomonic_grid_cached(center, fov, patch_size, erp_dims) -> SampleGrid:
    x, y = plane_coords(fov, patch_size)
    lat, lon = gnomonic_inverse(x, y, center)
    u, v = lonlat_to_uv(lon, lat, erp_dims)
    valid = np.ones(u.shape, dtype=bool)
    _freeze(u, v, valid)
    return SampleGrid(u, v, valid, erp_dims)


def gnomonic_grid(center, fov: float, patch_size, erp_dims) -> SampleGrid:
    """Sampling grid for a tangent patch centred at ``center`` = (lat, lon)."""
    if not fov < math.pi:
        raise GeometryError("gnomonic projection is undefined for fov >= π")
    if abs(center[0]) >= math.pi / 2:
        raise GeometryError("tangent point latitude must satisfy |lat| < π/2")
    key = (
        (float(center[0]), float(center[1])),
        float(fov),
        tuple(int(s) for s in patch_size),
        tuple(int(s) for s in erp_dims),
    )
    return _gnomonic_grid_cached(*key)


def layout_grids(layout: TangentLayout, erp_dims) -> list:
    return [gnomonic_grid(c, layout.patch_fov, layout.patch_size, erp_dims) for c in layout.centers]


# -- sampling ------------------------------------------------------------------
def _pixels(erp):
    if isinstance(erp, ErpImage):
        return erp.pixels
    if isinstance(erp, Tensor):
        return erp.data
    return np.asarray(erp)


def project(erp, grid: SampleGrid) -> Tensor:
    """Bilinearly sample a C×H×W image on ``grid``; longitude wraps, latitude clamps."""
    img = _pixels(erp)
    if img.ndim != 3 or img.shape[1:] != tuple(grid.erp_dims):
        raise DimensionError(f"grid built for {grid.erp_dims}, image is {img.shape}")
    h, w = grid.erp_dims
    u = np.mod(grid.u, w)
    v = np.clip(grid.v, 0.0, h - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    u0 %= w
    u1 = (u0 + 1) % w
    v1 = np.minimum(v0 + 1, h - 1)
    src = img.astype(np.float64)
    top = src[:, v0, u0] * (1 - fu) + src[:, v0, u1] * fu
    bot = src[:, v1, u0] * (1 - fu) + src[:, v1, u1] * fu
    out = top * (1 - fv) + bot * fv
    return Tensor(out.astype(np.float32))


def project_labels(labels: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Nearest-neighbour sampling of an H×W label map."""
    h, w = grid.erp_dims
    if labels.shape != (h, w):
        raise DimensionError(f"grid built for {grid.erp_dims}, labels are {labels.shape}")
    u = np.floor(np.mod(grid.u, w) + 0.5).astype(int) % w
    v = np.clip(np.floor(grid.v + 0.5).astype(int), 0, h - 1)
    return labels[v, u]


def project_tp(erp, layout: TangentLayout) -> Tensor:
    """All tangent patches of one ERP image, stacked as P×C×h×w."""
    img = _pixels(erp)
    grids = layout_grids(layout, img.shape[1:])
    return Tensor(np.stack([project(img, g).data for g in grids]))


# -- fixed-FoV slabs -------------------------------------------------------------
def _slab_count(fov_deg) -> int:
    if fov_deg not in SUPPORTED_FFP_FOVS:
        raise ConfigError(f"unsupported FFP fov {fov_deg}; choose from {SUPPORTED_FFP_FOVS}")
    return math.ceil(360 / fov_deg)


def split_slabs(x, parts: int):
    """Split the last axis into ``parts`` contiguous slabs, left to right."""
    if isinstance(x, Tensor):
        return split(x, parts, axis=-1)
    x = np.asarray(x)
    if x.shape[-1] % parts:
        raise DimensionError(f"width {x.shape[-1]} not divisible by {parts}")
    return [s.copy() for s in np.split(x, parts, axis=-1)]


def erp_to_ffp(erp):
    """Four 90° slabs of an ERP (or of any tensor whose last axis is longitude)."""
    if isinstance(erp, ErpImage):
        erp = erp.pixels
    return split_slabs(erp, 4)


def stitch_ffp(patches: Sequence):
    """Width-wise concatenation of slabs in order; inverse of :func:`erp_to_ffp`."""
    if not patches:
        raise DimensionError("nothing to stitch")
    lead = [tuple(p.shape[:-1]) for p in patches]
    if len(set(lead)) != 1:
        raise DimensionError(f"slab shapes disagree on height/channels: {lead}")
    if all(isinstance(p, Tensor) for p in patches):
        return concat(list(patches), axis=-1)
    return np.concatenate([np.asarray(p.data if isinstance(p, Tensor) else p) for p in patches], axis=-1)


def ffp_split(x, fov_deg=90):
    return split_slabs(x, _slab_count(fov_deg))


def ffp_grid_for_fov(fov_deg, erp_dims) -> list:
    """Integer-coordinate sampling grids for the ``360/fov`` longitude slabs."""
    n = _slab_count(fov_deg)
    h, w = erp_dims
    if w % n:
        raise DimensionError(f"ERP width {w} is not divisible into {n} slabs")
    sw = w // n
    grids = []
    vv, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(sw, dtype=np.float64), indexing="ij")
    for k in range(n):
        u = jj + k * sw
        v = vv.copy()
        valid = np.ones(u.shape, dtype=bool)
        _freeze(u, v, valid)
        grids.append(SampleGrid(u, v, valid, (h, w)))
    return grids
