"""PNG reading and writing for images (8-bit RGB) and label maps (8-bit class ids)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import DataError


def write_rgb(path, pixels: np.ndarray) -> None:
    """Write a 3×H×W float image in [0, 1]."""
    arr = np.clip(np.moveaxis(np.asarray(pixels), 0, -1), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="RGB").save(path)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def write_gray(path, values: np.ndarray) -> None:
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


def write_labels(path, labels: np.ndarray) -> None:
    write_gray(path, labels)


def read_labels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"{path}: label maps must be single-channel, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc


def list_images(directory) -> list:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"no such directory: {directory}")
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(".png"))
