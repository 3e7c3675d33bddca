"""Dataset manifests: annotated images plus query relevance sets.

The on-disk format is line-delimited JSON (one image record per line) with a
sidecar ``<name>.queries.json`` file mapping each query string to the ids of
its relevant images. Image paths inside a manifest are relative to the
manifest's directory. See docs/formats.md for the documented layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import as_rgb_array, check_polygon


class ManifestError(ValueError):
    """Raised for malformed or internally inconsistent manifests."""


class Layout(str, Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    CROSS_LINE = "cross_line"
    PARTIAL = "partial"


@dataclass(frozen=True)
class TextAnnotation:
    """One annotated text line: a polygon outline and its transcription."""

    polygon: tuple[tuple[float, float], ...]
    text: str

    def __post_init__(self):
        object.__setattr__(self, "polygon", check_polygon(self.polygon))
        if not self.text:
            raise ManifestError("annotation transcription must be non-empty")

    def bbox(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass
class ImageRecord:
    """An image referenced by id, backed by in-memory pixels or a file path."""

    id: str
    width: int
    height: int
    image_path: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.id:
            raise ManifestError("image id must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"image {self.id!r} has non-positive dimensions")
        if self.pixels is not None:
            self.pixels = as_rgb_array(self.pixels)
            if self.pixels.shape[:2] != (self.height, self.width):
                raise ManifestError(
                    f"image {self.id!r}: pixel array shape {self.pixels.shape[:2]} "
                    f"does not match declared ({self.height}, {self.width})"
                )

    def load_pixels(self, base_dir: Path | None = None) -> np.ndarray:
        """Return the (H, W, 3) uint8 pixel array, reading from disk if needed."""
        if self.pixels is not None:
            return self.pixels
        if self.image_path is None:
            raise ManifestError(f"image {self.id!r} has neither pixels nor a path")
        path = Path(self.image_path)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != (self.height, self.width):
            raise ManifestError(
                f"image {self.id!r}: file {path} has shape {arr.shape[:2]}, "
                f"manifest declares ({self.height}, {self.width})"
            )
        return arr


@dataclass
class DatasetRecord:
    image: ImageRecord
    annotations: list[TextAnnotation] = field(default_factory=list)
    layout: Layout | None = None


@dataclass
class DatasetManifest:
    """A validated collection of records plus query -> relevant-image-ids map."""

    records: list[DatasetRecord] = field(default_factory=list)
    queries: dict[str, set[str]] = field(default_factory=dict)
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.image.id in seen:
                raise ManifestError(f"duplicate image id {rec.image.id!r}")
            seen.add(rec.image.id)
        for term, ids in self.queries.items():
            if not term:
                raise ManifestError("query term must be non-empty")
            missing = set(ids) - seen
            if missing:
                raise ManifestError(
                    f"query {term!r} references unknown image ids: {sorted(missing)}"
                )

    def image_ids(self) -> list[str]:
        return [rec.image.id for rec in self.records]

    def record_for(self, image_id: str) -> DatasetRecord:
        for rec in self.records:
            if rec.image.id == image_id:
                return rec
        raise KeyError(image_id)

    def pixels_for(self, image_id: str) -> np.ndarray:
        return self.record_for(image_id).image.load_pixels(self.base_dir)

    def subset(self, image_ids) -> "DatasetManifest":
        """Restrict to the given image ids; query relevance is intersected."""
        keep = set(image_ids)
        records = [rec for rec in self.records if rec.image.id in keep]
        queries = {}
        for term, ids in self.queries.items():
            inter = ids & keep
            if inter:
                queries[term] = inter
        return DatasetManifest(records=records, queries=queries, base_dir=self.base_dir)


def _queries_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".queries.json")


def _record_to_json(rec: DatasetRecord) -> dict:
    out: dict = {
        "id": rec.image.id,
        "width": rec.image.width,
        "height": rec.image.height,
        "annotations": [
            {"polygon": [[x, y] for x, y in ann.polygon], "text": ann.text}
            for ann in rec.annotations
        ],
    }
    if rec.image.image_path is not None:
        out["image_path"] = rec.image.image_path
    if rec.layout is not None:
        out["layout"] = rec.layout.value
    return out


def _record_from_json(obj: dict, lineno: int) -> DatasetRecord:
    try:
        image = ImageRecord(
            id=obj["id"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            image_path=obj.get("image_path"),
        )
        annotations = [
            TextAnnotation(
                polygon=tuple((float(x), float(y)) for x, y in a["polygon"]),
                text=a["text"],
            )
            for a in obj.get("annotations", [])
        ]
        layout = Layout(obj["layout"]) if "layout" in obj else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest line {lineno}: {exc}") from exc
    return DatasetRecord(image=image, annotations=annotations, layout=layout)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest (and its queries sidecar, if present) from disk."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"manifest line {lineno}: invalid JSON: {exc}") from exc
            records.append(_record_from_json(obj, lineno))
    queries: dict[str, set[str]] = {}
    qpath = _queries_path(path)
    if qpath.exists():
        try:
            qobj = json.loads(qpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"queries sidecar {qpath}: invalid JSON: {exc}") from exc
        if not isinstance(qobj, dict) or "queries" not in qobj:
            raise ManifestError(f"queries sidecar {qpath}: missing 'queries' object")
        queries = {term: set(ids) for term, ids in qobj["queries"].items()}
    return DatasetManifest(records=records, queries=queries, base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path, *, overwrite: bool = True) -> Path:
    """Write a manifest to disk as JSONL plus a queries sidecar.

    Records holding in-memory pixels are materialized as PNG files under an
    ``images/`` directory next to the manifest; their records gain a relative
    ``image_path``.
    """
    path = Path(path)
    qpath = _queries_path(path)
    if not overwrite and (path.exists() or qpath.exists()):
        raise FileExistsError(f"refusing to overwrite {path} (pass overwrite=True)")
    path.parent.mkdir(parents=True, exist_ok=True)

    records_out = []
    for rec in manifest.records:
        image = rec.image
        if image.pixels is not None:
            rel = image.image_path or f"images/{image.id}.png"
            target = path.parent / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(image.pixels).save(target, format="PNG")
            image = replace(image, image_path=rel)
            image.pixels = None
        records_out.append(DatasetRecord(image=image, annotations=rec.annotations, layout=rec.layout))

    with path.open("w", encoding="utf-8") as fh:
        for rec in records_out:
            fh.write(json.dumps(_record_to_json(rec), sort_keys=True, ensure_ascii=False))
            fh.write("\n")
    qdoc = {"queries": {term: sorted(ids) for term, ids in sorted(manifest.queries.items())}}
    qpath.write_text(json.dumps(qdoc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path
