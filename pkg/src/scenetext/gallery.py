"""Retrieval gallery: (image, region map) pairs, their embeddings, queries.

Every detected region of an image becomes one pair; an image with no
detections contributes exactly one fallback pair whose map is fully
highlighted. An image's score for a query is the maximum similarity over its
pairs, and rankings order images by descending score with ascending-id
tie-breaks so evaluation is deterministic.

The persisted index is a little-endian binary file (see docs/formats.md):
magic ``STIX``, format version, row count, embedding dim, the model
fingerprint, the float32 row-major embedding matrix, and a JSON pair table.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorSpec, detect
from .manifest import DatasetManifest
from .segmap import SegMap, full_highlight, scale_mask_nearest, segmap_from_polygon
from .validation import as_binary_mask, clamp_polygon

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"STIX"
INDEX_FORMAT_VERSION = 1

FALLBACK_REGION_INDEX = -1


class GalleryError(RuntimeError):
    """Base error for gallery index problems."""


class IndexFormatError(GalleryError):
    """Unreadable, truncated, or wrong-version index file."""


class StaleIndexError(GalleryError):
    """Index was built with a different checkpoint than the one querying."""


class IndexBuildError(GalleryError):
    def __init__(self, message: str, failed_pairs: list[tuple[str, int]]):
        super().__init__(message)
        self.failed_pairs = failed_pairs


@dataclass
class GalleryPair:
    image_id: str
    region_index: int
    polygon: tuple[tuple[float, float], ...] | None = None
    segmap: SegMap | None = field(default=None, repr=False)

    @property
    def is_fallback(self) -> bool:
        return self.region_index == FALLBACK_REGION_INDEX

    def materialize_segmap(self, width: int, height: int) -> SegMap:
        if self.segmap is not None:
            return self.segmap
        if self.polygon is None:
            return full_highlight(width, height)
        return segmap_from_polygon(width, height, self.polygon)


@dataclass
class GalleryIndex:
    embeddings: np.ndarray  # (P, d) float32, unit-norm rows
    pair_table: list[GalleryPair]
    model_fingerprint: str
    use_global_fusion: bool = True

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if len(self.pair_table) != self.embeddings.shape[0]:
            raise ValueError("pair table length does not match embedding rows")
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)

    def image_ids(self) -> list[str]:
        seen = []
        known = set()
        for pair in self.pair_table:
            if pair.image_id not in known:
                known.add(pair.image_id)
                seen.append(pair.image_id)
        return seen

    def rows_for_image(self, image_id: str) -> list[int]:
        return [i for i, p in enumerate(self.pair_table) if p.image_id == image_id]


@dataclass
class QueryResult:
    """Ranked (image_id, score) pairs, scores non-increasing."""

    ranking: list[tuple[str, float]]

    def top(self) -> str:
        return self.ranking[0][0]

    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.ranking]


def build_pairs(
    manifest: DatasetManifest,
    detector: DetectorSpec,
    *,
    on_error: str = "abort",
) -> list[GalleryPair]:
    """One pair per detected region; a single full-highlight pair if none.

    ``on_error`` is "abort" (re-raise detector failures) or "skip" (log and
    fall back to the full-highlight pair for that image).
    """
    if on_error not in ("abort", "skip"):
        raise ValueError("on_error must be 'abort' or 'skip'")
    pairs: list[GalleryPair] = []
    for rec in manifest.records:
        image_id = rec.image.id
        try:
            pixels = manifest.pixels_for(image_id)
            regions = detect(detector, image_id, pixels)
        except Exception:
            if on_error == "abort":
                raise
            logger.exception("detector failed on image %s; using fallback pair", image_id)
            regions = []
        if regions:
            for k, region in enumerate(regions):
                pairs.append(GalleryPair(image_id=image_id, region_index=k, polygon=region.polygon))
        else:
            pairs.append(GalleryPair(image_id=image_id, region_index=FALLBACK_REGION_INDEX))
    return pairs


def build_index(
    pairs: list[GalleryPair],
    model,
    images,
    *,
    batch_size: int = 32,
    use_global_fusion: bool = True,
) -> GalleryIndex:
    """Encode every pair into the index matrix.

    ``images`` maps image_id -> (H, W, 3) pixels (a DatasetManifest works).
    """
    if not pairs:
        raise ValueError("cannot build an index from zero pairs")
    get_pixels = images.pixels_for if isinstance(images, DatasetManifest) else images.__getitem__

    rows = np.zeros((len(pairs), _embedding_dim(model)), dtype=np.float32)
    failures: list[tuple[str, int]] = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        for offset, pair in enumerate(chunk):
            try:
                pixels = get_pixels(pair.image_id)
                segmap = pair.materialize_segmap(pixels.shape[1], pixels.shape[0])
                rows[start + offset] = model.encode_image_guided(
                    pixels, segmap, use_global_fusion=use_global_fusion
                )
            except (OSError, KeyError, ValueError) as exc:
                logger.error("failed to encode pair (%s, %d): %s", pair.image_id, pair.region_index, exc)
                failures.append((pair.image_id, pair.region_index))
    if failures:
        raise IndexBuildError(f"{len(failures)} pairs failed to encode", failures)
    return GalleryIndex(
        embeddings=rows,
        pair_table=pairs,
        model_fingerprint=model.fingerprint(),
        use_global_fusion=use_global_fusion,
    )


def _embedding_dim(model) -> int:
    if hasattr(model, "cfg"):
        return model.cfg.embed_dim
    return int(model.embed_dim)


def _rank_images(
    pair_scores: np.ndarray, pair_table: list[GalleryPair]
) -> list[tuple[str, float]]:
    best: dict[str, float] = {}
    for score, pair in zip(pair_scores, pair_table):
        value = float(score)
        if pair.image_id not in best or value > best[pair.image_id]:
            best[pair.image_id] = value
    return sorted(best.items(), key=lambda item: (-item[1], item[0]))


def query(index: GalleryIndex, model, text: str, top_k: int = 10) -> QueryResult:
    """Rank all gallery images for a query string; return the top_k."""
    if not text:
        raise ValueError("query text must be non-empty")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if index.embeddings.shape[0] == 0:
        raise GalleryError("cannot query an empty index")
    fingerprint = model.fingerprint()
    if fingerprint != index.model_fingerprint:
        raise StaleIndexError(
            "index was built with a different checkpoint "
            f"({index.model_fingerprint[:12]}... vs {fingerprint[:12]}...)"
        )
    text_emb = np.asarray(model.encode_text(text), dtype=np.float32)
    pair_scores = index.embeddings @ text_emb
    ranking = _rank_images(pair_scores, index.pair_table)
    return QueryResult(ranking=ranking[:top_k])


def region_query(
    images,
    model,
    text: str,
    image_id: str,
    region,
    *,
    top_k: int = 10,
    scope: str = "gallery",
    candidate_ids: list[str] | None = None,
    use_global_fusion: bool = True,
) -> QueryResult:
    """Score images under a user-supplied region instead of detector output.

    ``region`` is either a polygon (list of points, interpreted on the target
    image and clamped to its bounds) or a binary mask array. With
    ``scope="gallery"`` the mask is rescaled (nearest-neighbor) onto every
    candidate image; with ``scope="image"`` only the target is scored. An
    empty region degrades to a full highlight with a warning.
    """
    if scope not in ("gallery", "image"):
        raise ValueError("scope must be 'gallery' or 'image'")
    if not text:
        raise ValueError("query text must be non-empty")
    if isinstance(images, DatasetManifest):
        get_pixels = images.pixels_for
        all_ids = images.image_ids()
    else:
        get_pixels = images.__getitem__
        all_ids = list(images.keys())
    if image_id not in all_ids:
        raise KeyError(image_id)

    target_pixels = get_pixels(image_id)
    th, tw = target_pixels.shape[:2]
    if isinstance(region, (list, tuple)):
        clamped = clamp_polygon(region, tw, th)
        if clamped != tuple((float(x), float(y)) for x, y in region):
            warnings.warn("region polygon extended outside the image; clamped")
        mask = segmap_from_polygon(tw, th, clamped).data
    else:
        mask = as_binary_mask(region, width=tw, height=th)
    if not mask.any():
        warnings.warn("empty region treated as a full highlight")
        mask = full_highlight(tw, th).data

    if scope == "image":
        candidates = [image_id]
    else:
        candidates = candidate_ids if candidate_ids is not None else all_ids

    text_emb = np.asarray(model.encode_text(text), dtype=np.float32)
    scores = []
    for cand in candidates:
        pixels = get_pixels(cand)
        h, w = pixels.shape[:2]
        cand_mask = mask if (h, w) == (th, tw) else scale_mask_nearest(mask, w, h)
        emb = model.encode_image_guided(pixels, cand_mask, use_global_fusion=use_global_fusion)
        scores.append(float(np.dot(np.asarray(emb, dtype=np.float32), text_emb)))

    ranking = sorted(zip(candidates, scores), key=lambda item: (-item[1], item[0]))
    return QueryResult(ranking=ranking[:top_k])


# ---- persistence -------------------------------------------------------------


def save_index(index: GalleryIndex, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = [
        {
            "image_id": pair.image_id,
            "region_index": pair.region_index,
            "polygon": [[x, y] for x, y in pair.polygon] if pair.polygon else None,
        }
        for pair in index.pair_table
    ]
    table_bytes = json.dumps(
        {"pairs": table, "use_global_fusion": index.use_global_fusion}, sort_keys=True
    ).encode("utf-8")
    fingerprint = index.model_fingerprint.encode("utf-8")
    rows, dim = index.embeddings.shape
    with path.open("wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IQI", INDEX_FORMAT_VERSION, rows, dim))
        fh.write(struct.pack("<I", len(fingerprint)))
        fh.write(fingerprint)
        fh.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(table_bytes)))
        fh.write(table_bytes)


def load_index(path: str | Path) -> GalleryIndex:
    path = Path(path)
    start = time.perf_counter()
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IndexFormatError(f"cannot read index {path}: {exc}") from exc
    try:
        if blob[:4] != INDEX_MAGIC:
            raise IndexFormatError(f"{path} is not a gallery index (bad magic)")
        version, rows, dim = struct.unpack_from("<IQI", blob, 4)
        if version != INDEX_FORMAT_VERSION:
            raise IndexFormatError(
                f"{path} has index format version {version}, expected {INDEX_FORMAT_VERSION}"
            )
        offset = 4 + struct.calcsize("<IQI")
        (fp_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        fingerprint = blob[offset : offset + fp_len].decode("utf-8")
        offset += fp_len
        matrix_bytes = rows * dim * 4
        matrix = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=offset).reshape(rows, dim)
        offset += matrix_bytes
        (table_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        table_obj = json.loads(blob[offset : offset + table_len].decode("utf-8"))
        if len(table_obj["pairs"]) != rows:
            raise IndexFormatError(f"{path}: pair table length disagrees with row count")
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise IndexFormatError(f"{path} is truncated or corrupt: {exc}") from exc
    pairs = [
        GalleryPair(
            image_id=p["image_id"],
            region_index=int(p["region_index"]),
            polygon=tuple((float(x), float(y)) for x, y in p["polygon"]) if p["polygon"] else None,
        )
        for p in table_obj["pairs"]
    ]
    index = GalleryIndex(
        embeddings=matrix.copy(),
        pair_table=pairs,
        model_fingerprint=fingerprint,
        use_global_fusion=bool(table_obj.get("use_global_fusion", True)),
    )
    logger.debug("loaded %d-row index in %.3fs", rows, time.perf_counter() - start)
    return index
