"""Procedural spherical scenes rendered as labelled panoramas and pinhole crops.

A scene is a function of viewing direction: a horizon, buildings rising from
it, a straight road on the ground plane, and small round objects.  Panoramas
rasterise the scene on the ERP lattice; pinhole crops are gnomonic views of a
higher-resolution ERP rendering, so both domains share class semantics but
differ in field of view, distortion and colour style.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import DimensionError
from .projection import ErpImage, erp_lonlat, gnomonic_grid, project, project_labels

CLASS_NAMES = ("sky", "ground", "building", "object", "road")
SKY, GROUND, BUILDING, OBJECT, ROAD = range(5)
CROP_FOV_DEG = 70.0
CROP_MAX_LAT_DEG = 20.0  # forward-looking camera near the horizon

BASE_COLORS = np.array(
    [
        [0.45, 0.65, 0.95],  # sky
        [0.35, 0.55, 0.25],  # ground
        [0.62, 0.50, 0.44],  # building
        [0.85, 0.22, 0.20],  # object
        [0.36, 0.36, 0.40],  # road
    ]
)


@dataclass(frozen=True)
class Style:
    hue_shift: float = 0.0
    noise: float = 0.0
    contrast: float = 1.0


SOURCE_STYLE = Style()
TARGET_STYLE = Style(hue_shift=0.1, noise=0.02, contrast=1.15)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 7
    num_classes: int = 5
    style: Style = field(default=TARGET_STYLE)


@dataclass
class Scene:
    horizon: float
    buildings: np.ndarray  # rows: lon centre, half width, top latitude
    objects: np.ndarray  # rows: lat, lon, angular radius
    road: tuple  # heading, lateral offset, half width
    colors: np.ndarray  # K×3
    texture_phase: np.ndarray

    @property
    def top_latitude(self) -> float:
        """Highest latitude reached by any non-sky structure."""
        tops = [self.horizon]
        if len(self.buildings):
            tops.append(self.buildings[:, 2].max())
        if len(self.objects):
            tops.append((self.objects[:, 0] + self.objects[:, 2]).max())
        return float(max(tops))


def sample_scene(seed) -> Scene:
    rng = np.random.default_rng(seed)
    rad = math.radians
    horizon = rng.uniform(rad(-5), rad(5))
    nb = rng.integers(3, 7)
    buildings = np.column_stack(
        [
            rng.uniform(-math.pi, math.pi, nb),
            rng.uniform(rad(8), rad(28), nb),
            horizon + rng.uniform(rad(8), rad(35), nb),
        ]
    )
    no = rng.integers(3, 8)
    objects = np.column_stack(
        [
            horizon + rng.uniform(rad(-14), rad(6), no),
            rng.uniform(-math.pi, math.pi, no),
            rng.uniform(rad(4), rad(9), no),
        ]
    )
    road = (rng.uniform(0, math.pi), rng.uniform(-1.0, 1.0), rng.uniform(0.8, 1.5))
    colors = np.clip(BASE_COLORS + rng.uniform(-0.06, 0.06, BASE_COLORS.shape), 0.0, 1.0)
    return Scene(horizon, buildings, objects, road, colors, rng.uniform(0, 2 * math.pi, 4))


def _angular_distance(lat1, lon1, lat2, lon2):
    cosd = np.sin(lat1) * np.sin(lat2) + np.cos(lat1) * np.cos(lat2) * np.cos(lon1 - lon2)
    return np.arccos(np.clip(cosd, -1.0, 1.0))


def label_directions(scene: Scene, lat, lon) -> np.ndarray:
    """Class id for each viewing direction."""
    labels = np.where(lat >= scene.horizon, SKY, GROUND).astype(np.uint8)

    below = lat < scene.horizon
    depression = np.maximum(scene.horizon - lat, 1e-6)
    dist = 1.0 / np.tan(np.minimum(depression, math.pi / 2 - 1e-6))
    heading, offset, half_width = scene.road
    lateral = dist * np.sin(lon - heading)
    labels[below & (np.abs(lateral - offset) < half_width)] = ROAD

    for lon_c, half, top in scene.buildings:
        dlon = np.abs((lon - lon_c + math.pi) % (2 * math.pi) - math.pi)
        labels[(dlon < half) & (lat >= scene.horizon) & (lat < top)] = BUILDING

    for lat_c, lon_c, radius in scene.objects:
        labels[_angular_distance(lat, lon, lat_c, lon_c) < radius] = OBJECT
    return labels


def shade_directions(scene: Scene, lat, lon, labels) -> np.ndarray:
    """Per-pixel RGB (3×…) before domain styling."""
    rgb = scene.colors[labels].astype(np.float64)
    p = scene.texture_phase
    shade = np.zeros(labels.shape)
    shade = np.where(labels == SKY, 0.15 * np.sin(np.maximum(lat, 0.0)), shade)
    windows = (np.sin(48 * lon + p[0]) > 0.3) & (np.sin(60 * lat + p[1]) > 0.0)
    shade = np.where(labels == BUILDING, -0.12 * windows, shade)
    shade = np.where(labels == GROUND, 0.05 * np.sin(5 * lon + p[2]) * np.cos(9 * lat + p[3]), shade)
    shade = np.where(labels == ROAD, -0.06 * np.cos(lat), shade)
    rgb = rgb + shade[..., None]
    return np.clip(np.moveaxis(rgb, -1, 0), 0.0, 1.0)


def apply_style(rgb: np.ndarray, style: Style, rng=None) -> np.ndarray:
    """Hue rotation, contrast stretch about 0.5 and additive Gaussian noise (3×h×w)."""
    out = np.asarray(rgb, dtype=np.float64)
    if style.hue_shift:
        hsv = rgb_to_hsv(np.moveaxis(out, 0, -1))
        hsv[..., 0] = (hsv[..., 0] + style.hue_shift) % 1.0
        out = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
    if style.contrast != 1.0:
        out = (out - 0.5) * style.contrast + 0.5
    if style.noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + rng.normal(0.0, style.noise, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_erp(scene: Scene, h: int, w: int):
    lon, lat = erp_lonlat(h, w)
    labels = label_directions(scene, lat, lon)
    return shade_directions(scene, lat, lon, labels), labels


def generate_erp(spec: SceneSpec, h: int = 64, w: int = 256) -> ErpImage:
    """Labelled panorama of the scene drawn from ``spec.seed``, in ``spec.style``."""
    if w % 8 or w % 4 or h % 8:
        raise DimensionError(f"ERP dims {h}×{w} must be divisible by 8")
    scene = sample_scene(np.random.SeedSequence([spec.seed, 1]))
    rgb, labels = render_erp(scene, h, w)
    pixels = apply_style(rgb, spec.style, np.random.default_rng([spec.seed, 2]))
    return ErpImage(pixels, labels)


def generate_pinhole_crops(
    spec: SceneSpec, n: int, size: int = 64, style: Style = SOURCE_STYLE, max_lat_deg: float = CROP_MAX_LAT_DEG
):
    """``n`` gnomonic 70° views of distinct scenes, returned as arrays.

    View centres have uniform latitude in ``±max_lat_deg`` and uniform longitude.
    Returns ``(images N×3×size×size, labels N×size×size, centres N×2)``.
    Scene ``i`` uses seed ``[spec.seed, i, 3]`` and is rendered at twice the crop
    resolution per degree.
    """
    if size % 8:
        raise DimensionError(f"crop size {size} must be divisible by 8")
    erp_dims = (2 * size, 8 * size)
    rng = np.random.default_rng([spec.seed, 1_000_003])
    images = np.empty((n, 3, size, size), np.float32)
    labels = np.empty((n, size, size), np.uint8)
    centres = np.empty((n, 2))
    for i in range(n):
        scene = sample_scene(np.random.SeedSequence([spec.seed, i, 3]))
        rgb, lab = render_erp(scene, *erp_dims)
        lat = rng.uniform(-math.radians(max_lat_deg), math.radians(max_lat_deg))
        centre = (lat, rng.uniform(-math.pi, math.pi))
        grid = gnomonic_grid(centre, math.radians(CROP_FOV_DEG), (size, size), erp_dims)
        images[i] = apply_style(project(rgb, grid).data, style, rng)
        labels[i] = project_labels(lab, grid)
        centres[i] = centre
    return images, labels, centres


def generate_erp_set(seed: int, n: int, h: int = 64, w: int = 256, style: Style = TARGET_STYLE, offset: int = 0):
    """Stack of ``n`` panoramas: ``(images N×3×H×W, labels N×H×W)``."""
    imgs = np.empty((n, 3, h, w), np.float32)
    labs = np.empty((n, h, w), np.uint8)
    for i in range(n):
        erp = generate_erp(SceneSpec(seed=seed * 100_000 + offset + i, style=style), h, w)
        imgs[i], labs[i] = erp.pixels, erp.labels
    return imgs, labs


def label_histogram(labels: np.ndarray, num_classes: int = 5) -> np.ndarray:
    return np.bincount(np.asarray(labels).reshape(-1), minlength=num_classes)
