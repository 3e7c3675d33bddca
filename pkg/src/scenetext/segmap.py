"""Binary segmentation maps marking guided text regions.

A map is a single-channel uint8 array with values in {0, 255}, the same size
as its source image. Rasterization rule: a pixel is set when its center
(col + 0.5, row + 0.5) lies strictly inside the polygon (even-odd rule) or
exactly on its boundary. Zero-area polygons rasterize to an all-zero map and
emit a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .manifest import DatasetManifest
from .validation import check_polygon, check_positive_int

_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class SegMap:
    """Immutable wrapper over an (H, W) uint8 array with values {0, 255}."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"segmentation map must be 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        bad = np.setdiff1d(np.unique(arr), [0, 255])
        if bad.size:
            raise ValueError(f"segmentation map values must be 0 or 255, found {bad[:4]}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def highlighted_count(self) -> int:
        return int(np.count_nonzero(self.data))

    def union(self, other: "SegMap") -> "SegMap":
        if self.data.shape != other.data.shape:
            raise ValueError("cannot union maps of different shapes")
        return SegMap(np.maximum(self.data, other.data))

    def __eq__(self, other) -> bool:
        return isinstance(other, SegMap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class Triplet:
    """One training example: an image id, a guided region map, and its text."""

    image_id: str
    segmap: SegMap
    text: str
    annotation_index: int = 0

    def __post_init__(self):
        if not self.text:
            raise ValueError("triplet text must be non-empty")


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def segmap_from_polygon(width: int, height: int, polygon) -> SegMap:
    """Rasterize a polygon into a binary map (pixel-center inclusion rule)."""
    check_positive_int(width, "width")
    check_positive_int(height, "height")
    poly = np.asarray(check_polygon(polygon), dtype=np.float64)

    if abs(_polygon_area(poly)) < _EDGE_EPS:
        warnings.warn("zero-area polygon rasterizes to an empty segmentation map")
        return SegMap(np.zeros((height, width), dtype=np.uint8))

    cx = np.arange(width, dtype=np.float64) + 0.5
    cy = np.arange(height, dtype=np.float64) + 0.5
    gx = cx[None, :]
    gy = cy[:, None]

    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    n = len(poly)
    scale = max(1.0, float(np.abs(poly).max()))
    eps = _EDGE_EPS * scale

    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]

        # even-odd crossing test with the half-open rule on y
        crosses = (y1 > gy) != (y2 > gy)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (gx < x_at)

        # boundary: center on the closed segment [P1, P2]
        ex, ey = x2 - x1, y2 - y1
        seg_len2 = ex * ex + ey * ey
        if seg_len2 < eps * eps:
            on_edge |= (np.abs(gx - x1) < eps) & (np.abs(gy - y1) < eps)
            continue
        cross = (gx - x1) * ey - (gy - y1) * ex
        t = (gx - x1) * ex + (gy - y1) * ey
        on_edge |= (np.abs(cross) < eps * np.sqrt(seg_len2)) & (t >= -eps) & (t <= seg_len2 + eps)

    data = np.where(inside | on_edge, 255, 0).astype(np.uint8)
    return SegMap(data)


def full_highlight(width: int, height: int) -> SegMap:
    """An all-255 map, used when no region guidance is available."""
    check_positive_int(width, "width")
    check_positive_int(height, "height")
    return SegMap(np.full((height, width), 255, dtype=np.uint8))


def generate_triplets(manifest: DatasetManifest) -> list[Triplet]:
    """One triplet per (image, annotation) pair, in manifest order.

    Images without annotations contribute nothing; the triplet count equals
    the total annotation count.
    """
    triplets: list[Triplet] = []
    for rec in manifest.records:
        w, h = rec.image.width, rec.image.height
        for k, ann in enumerate(rec.annotations):
            triplets.append(
                Triplet(
                    image_id=rec.image.id,
                    segmap=segmap_from_polygon(w, h, ann.polygon),
                    text=ann.text,
                    annotation_index=k,
                )
            )
    return triplets


def save_segmap(segmap: SegMap, path) -> None:
    Image.fromarray(segmap.data, mode="L").save(path, format="PNG")


def load_segmap(path) -> SegMap:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return SegMap(np.where(arr > 127, 255, 0).astype(np.uint8))


def mask_to_rle(mask: np.ndarray) -> dict:
    """Encode a binary mask as row-major run lengths.

    The wire format is ``{"width": W, "height": H, "counts": [...]}`` where
    counts are the lengths of alternating runs of zeros and ones over the
    row-major flattened mask, starting with the count of leading zeros
    (which may be 0). Counts always sum to W*H.
    """
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("mask must be 2-D")
    flat = (arr.reshape(-1) > 0).astype(np.int8)
    if flat.size == 0:
        return {"width": 0, "height": 0, "counts": []}
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "counts": counts}


def rle_to_mask(rle: dict) -> np.ndarray:
    """Decode the run-length format produced by :func:`mask_to_rle`."""
    try:
        width = int(rle["width"])
        height = int(rle["height"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed RLE mask: {exc}") from exc
    if width < 0 or height < 0 or any(c < 0 for c in counts):
        raise ValueError("malformed RLE mask: negative dimension or count")
    if sum(counts) != width * height:
        raise ValueError(
            f"malformed RLE mask: counts sum to {sum(counts)}, expected {width * height}"
        )
    flat = np.zeros(width * height, dtype=np.uint8)
    pos = 0
    value = 0
    for count in counts:
        if value:
            flat[pos : pos + count] = 255
        pos += count
        value ^= 1
    return flat.reshape(height, width)


def scale_mask_nearest(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbor rescale of a binary mask to (height, width)."""
    arr = np.asarray(mask)
    if arr.shape == (height, width):
        return np.where(arr > 0, 255, 0).astype(np.uint8)
    src_h, src_w = arr.shape
    rows = np.minimum((np.arange(height) + 0.5) * src_h / height, src_h - 1).astype(np.int64)
    cols = np.minimum((np.arange(width) + 0.5) * src_w / width, src_w - 1).astype(np.int64)
    out = arr[rows[:, None], cols[None, :]]
    return np.where(out > 0, 255, 0).astype(np.uint8)
