"""Deterministic top-down rasterization, PSNR, and layout-difference feedback.

The camera is fixed: the tray center maps to the image center and a world
half-extent of 2.0 maps to the image half-width.  Rendering uses hard-edged
discs sampled at pixel centers, so identical layouts produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from .physics import CLASSES
from .scene_dsl import PALETTE

__all__ = [
    "IMAGE_SIZE",
    "WORLD_HALF_EXTENT",
    "PSNR_CAP_DB",
    "render_top_down",
    "raster_to_png",
    "psnr",
    "psnr_from_mse",
    "misplaced_colors",
    "export_convergence",
]

IMAGE_SIZE = 256
WORLD_HALF_EXTENT = 2.0
PSNR_CAP_DB = 99.0

TRAY_GRAY = (200, 200, 200)
BACKGROUND = (255, 255, 255)

_SCALE = IMAGE_SIZE / (2.0 * WORLD_HALF_EXTENT)  # pixels per world unit

# Pixel-center world coordinates, cached once.
_PIX = (np.arange(IMAGE_SIZE) + 0.5) / _SCALE - WORLD_HALF_EXTENT
_XX = _PIX[np.newaxis, :]
_YY = -_PIX[:, np.newaxis]  # +y is up in the world, rows grow downward


def _fill_disc(img: np.ndarray, cx: float, cy: float, radius: float, rgb) -> None:
    mask = (_XX - cx) ** 2 + (_YY - cy) ** 2 <= radius * radius
    img[mask] = rgb


def render_top_down(layout, tray_radius: float = 1.8) -> np.ndarray:
    """Rasterize a layout: gray tray disc on white ground, one filled disc of
    the class base radius per instance in its palette color."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    _fill_disc(img, 0.0, 0.0, tray_radius, TRAY_GRAY)
    from .physics import cell_center

    for obj in layout:
        x, y = cell_center(obj.row, obj.col)
        rgb = PALETTE.get(obj.color)
        if rgb is None:
            rgb = (0, 0, 0)  # out-of-palette colors render as black
        _fill_disc(img, x, y, CLASSES[obj.class_name].base_radius, rgb)
    return img


def raster_to_png(img: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0 * 255.0 / mse))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over all channels; identical images
    are capped at 99.0 dB."""
    if a.shape != b.shape:
        raise ValueError(f"raster dimensions differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return psnr_from_mse(float(np.mean(diff * diff)))


def misplaced_colors(predicted, reference) -> frozenset:
    """Colors whose placement disagrees between the two layouts.

    A color is misplaced when its cell or class differs from the reference,
    when the reference declares it and the prediction does not, or when the
    prediction invents it.  An empty result implies identical renders.
    """
    pred = {obj.color: (obj.cell, obj.class_name) for obj in predicted}
    ref = {obj.color: (obj.cell, obj.class_name) for obj in reference}
    bad = {color for color, where in pred.items() if ref.get(color) != where}
    bad.update(set(ref) - set(pred))
    return frozenset(bad)


def export_convergence(values, path) -> None:
    """Write an iteration/value/running-min CSV for one optimization run."""
    values = list(values)
    if not values:
        raise ValueError("cannot export an empty convergence log")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "value", "running_min"])
        best = math.inf
        for i, v in enumerate(values, start=1):
            best = min(best, v)
            writer.writerow([i, repr(float(v)), repr(float(best))])
