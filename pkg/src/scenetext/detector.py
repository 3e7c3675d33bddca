"""Text-region proposal for gallery construction.

Three interchangeable detectors produce region polygons:

* ``oracle`` returns ground-truth annotation polygons from a manifest;
* ``heuristic`` finds high-contrast connected components (dependency-free,
  demo quality by design);
* ``external`` posts the image to an HTTP detection endpoint and parses the
  response (any OCR engine can be wrapped; contract in docs/http_api.md).

Scoring code never sees which detector produced a region list.
"""

from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass, field

import httpx
import numpy as np
from PIL import Image
from scipy import ndimage

from .manifest import DatasetManifest
from .validation import as_rgb_array, check_polygon, clamp_polygon

logger = logging.getLogger(__name__)

DETECTOR_KINDS = ("oracle", "heuristic", "external")


class DetectionTransportError(RuntimeError):
    """External endpoint unreachable after retries."""


class DetectionProtocolError(ValueError):
    """External endpoint answered with an unparseable payload."""


@dataclass(frozen=True)
class DetectedRegion:
    polygon: tuple[tuple[float, float], ...]
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "polygon", check_polygon(self.polygon))
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class DetectorSpec:
    kind: str = "oracle"
    manifest: DatasetManifest | None = field(default=None, repr=False)
    endpoint: str | None = None
    timeout: float = 10.0
    retries: int = 2
    confidence_threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "oracle" and self.manifest is None:
            raise ValueError("oracle detector requires a manifest with annotations")
        if self.kind == "external" and not self.endpoint:
            raise ValueError("external detector requires an endpoint URL")


def detect(spec: DetectorSpec, image_id: str, pixels: np.ndarray) -> list[DetectedRegion]:
    """Run the configured detector on one image."""
    pixels = as_rgb_array(pixels)
    height, width = pixels.shape[:2]
    if spec.kind == "oracle":
        regions = _detect_oracle(spec.manifest, image_id)
    elif spec.kind == "heuristic":
        regions = _detect_heuristic(pixels)
    else:
        regions = _detect_external(spec, pixels)
    out = []
    for region in regions:
        if region.confidence < spec.confidence_threshold:
            continue
        out.append(
            DetectedRegion(
                polygon=clamp_polygon(region.polygon, width, height),
                confidence=region.confidence,
            )
        )
    return out


def _detect_oracle(manifest: DatasetManifest, image_id: str) -> list[DetectedRegion]:
    rec = manifest.record_for(image_id)
    return [DetectedRegion(polygon=ann.polygon, confidence=1.0) for ann in rec.annotations]


def _detect_heuristic(
    pixels: np.ndarray, contrast: float = 24.0, min_area: int = 6
) -> list[DetectedRegion]:
    """Connected components of locally high-contrast pixels, as boxes."""
    gray = pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    local_mean = ndimage.uniform_filter(gray, size=15, mode="reflect")
    binary = np.abs(gray - local_mean) > contrast
    if not binary.any():
        return []
    # bridge nearby glyphs into line-level components
    binary = ndimage.binary_dilation(binary, structure=np.ones((3, 7), dtype=bool))
    labels, count = ndimage.label(binary)
    regions = []
    total = binary.size
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        area = (sl[0].stop - sl[0].start) * (sl[1].stop - sl[1].start)
        if area < min_area:
            continue
        y0, y1 = float(sl[0].start), float(sl[0].stop)
        x0, x1 = float(sl[1].start), float(sl[1].stop)
        conf = min(1.0, 0.5 + 0.5 * area / total)
        regions.append(
            DetectedRegion(polygon=((x0, y0), (x1, y0), (x1, y1), (x0, y1)), confidence=conf)
        )
    return regions


def _detect_external(spec: DetectorSpec, pixels: np.ndarray) -> list[DetectedRegion]:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    payload = buf.getvalue()

    last_error: Exception | None = None
    for attempt in range(spec.retries + 1):
        try:
            response = httpx.post(
                spec.endpoint,
                content=payload,
                headers={"Content-Type": "image/png"},
                timeout=spec.timeout,
            )
            if response.status_code >= 500:
                raise DetectionTransportError(
                    f"endpoint {spec.endpoint} returned {response.status_code}"
                )
            if response.status_code != 200:
                raise DetectionProtocolError(
                    f"endpoint {spec.endpoint} returned {response.status_code}: "
                    f"{response.text[:200]}"
                )
            return _parse_detection_response(response.json())
        except DetectionProtocolError:
            raise
        except (httpx.HTTPError, DetectionTransportError) as exc:
            last_error = exc
            if attempt < spec.retries:
                time.sleep(0.1 * 2**attempt)
    raise DetectionTransportError(
        f"endpoint {spec.endpoint} unreachable after {spec.retries + 1} attempts: {last_error}"
    )


def _parse_detection_response(obj) -> list[DetectedRegion]:
    try:
        regions = obj["regions"]
        return [
            DetectedRegion(
                polygon=tuple((float(x), float(y)) for x, y in r["polygon"]),
                confidence=float(r.get("confidence", 1.0)),
            )
            for r in regions
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DetectionProtocolError(f"malformed detection response: {exc}") from exc
