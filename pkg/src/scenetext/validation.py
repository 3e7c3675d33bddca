"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_probability(value: float, name: str) -> float:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value: int, name: str) -> int:
    if int(value) != value or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_polygon(points, *, min_points: int = 3) -> tuple[tuple[float, float], ...]:
    """Normalize a polygon to a tuple of (x, y) float pairs and check its arity."""
    poly = tuple((float(x), float(y)) for x, y in points)
    if len(poly) < min_points:
        raise ValueError(f"polygon needs at least {min_points} points, got {len(poly)}")
    for x, y in poly:
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError("polygon coordinates must be finite")
    return poly


def clamp_polygon(points, width: int, height: int) -> tuple[tuple[float, float], ...]:
    """Clamp every vertex into the image rectangle [0, width] x [0, height]."""
    return tuple(
        (min(max(float(x), 0.0), float(width)), min(max(float(y), 0.0), float(height)))
        for x, y in points
    )


def as_rgb_array(pixels) -> np.ndarray:
    """Coerce to an (H, W, 3) uint8 array, validating shape and dtype range."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.max(initial=0.0) <= 1.0:
            arr = (arr * 255.0).round()
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


def as_binary_mask(mask, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Coerce to an (H, W) uint8 mask with values in {0, 255}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {arr.shape}")
    if width is not None and height is not None and arr.shape != (height, width):
        raise ValueError(
            f"mask shape {arr.shape} does not match expected ({height}, {width})"
        )
    out = np.where(arr > 0, 255, 0).astype(np.uint8)
    return out
