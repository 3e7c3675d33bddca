"""Random alignment-granularity processing for training triplets.

Three independent stochastic edits loosen the exact region<->text match so
the model learns multi-granularity alignment:

* text expansion (rate ``alpha``): merge in the text of the spatially
  nearest annotation, ordered by reading direction;
* text masking (rate ``beta``): keep a random contiguous substring of
  length >= 2 (inputs shorter than 4 characters are never masked);
* map splicing (rate ``theta``): union the region map with the nearest
  annotation's map.

Text edits compose as mask(expand(text)); the map edit draws independently.
None of this is applied at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifest import TextAnnotation
from .segmap import SegMap, Triplet, segmap_from_polygon
from .validation import check_probability


@dataclass(frozen=True)
class RagpConfig:
    alpha: float = 0.3
    beta: float = 0.2
    theta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        check_probability(self.alpha, "alpha")
        check_probability(self.beta, "beta")
        check_probability(self.theta, "theta")

    @property
    def active(self) -> bool:
        return self.alpha > 0 or self.beta > 0 or self.theta > 0


@dataclass(frozen=True)
class RagpOutcome:
    """Which edits actually fired during one application (for logging/tests)."""

    expanded: bool = False
    masked: bool = False
    spliced: bool = False


@dataclass
class AnnotationContext:
    """Per-image view of all annotations, as needed by the stochastic edits."""

    centroids: np.ndarray  # (K, 2) bbox centroids
    bboxes: np.ndarray  # (K, 4) as (x0, y0, x1, y1)
    texts: list[str]
    segmaps: list[SegMap] = field(repr=False)

    def __post_init__(self):
        k = len(self.texts)
        if k == 0:
            raise ValueError("annotation context needs at least one annotation")
        if self.centroids.shape != (k, 2) or self.bboxes.shape != (k, 4):
            raise ValueError("context arrays disagree with annotation count")
        if len(self.segmaps) != k:
            raise ValueError("context segmaps disagree with annotation count")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("annotation centroids must be finite")

    def __len__(self) -> int:
        return len(self.texts)

    @classmethod
    def from_annotations(
        cls, width: int, height: int, annotations: list[TextAnnotation]
    ) -> "AnnotationContext":
        bboxes = np.array([ann.bbox() for ann in annotations], dtype=np.float64)
        centroids = np.stack(
            [(bboxes[:, 0] + bboxes[:, 2]) / 2.0, (bboxes[:, 1] + bboxes[:, 3]) / 2.0], axis=1
        )
        segmaps = [segmap_from_polygon(width, height, ann.polygon) for ann in annotations]
        return cls(
            centroids=centroids,
            bboxes=bboxes,
            texts=[ann.text for ann in annotations],
            segmaps=segmaps,
        )


def nearest_neighbor(ctx: AnnotationContext, k: int) -> int | None:
    """Index of the annotation whose bbox centroid is closest to annotation k.

    Ties break toward the lowest index; a single-annotation context has no
    neighbor and returns None.
    """
    if len(ctx) < 2:
        return None
    deltas = ctx.centroids - ctx.centroids[k]
    dist2 = np.einsum("ij,ij->i", deltas, deltas)
    dist2[k] = np.inf
    return int(np.argmin(dist2))


def _reading_order_merge(ctx: AnnotationContext, k: int, p: int) -> str:
    """Merge texts k and p ordered along annotation k's dominant axis."""
    x0, y0, x1, y1 = ctx.bboxes[k]
    horizontal = (x1 - x0) >= (y1 - y0)
    axis = 0 if horizontal else 1
    neighbor_later = ctx.centroids[p][axis] >= ctx.centroids[k][axis]
    if neighbor_later:
        return ctx.texts[k] + ctx.texts[p]
    return ctx.texts[p] + ctx.texts[k]


def expand_text(ctx: AnnotationContext, k: int, alpha: float, rng: np.random.Generator) -> str:
    """With probability alpha, append/prepend the nearest annotation's text."""
    check_probability(alpha, "alpha")
    triggered = rng.random() < alpha
    p = nearest_neighbor(ctx, k)
    if not triggered or p is None:
        return ctx.texts[k]
    return _reading_order_merge(ctx, k, p)


def mask_text(text: str, beta: float, rng: np.random.Generator) -> str:
    """With probability beta, keep a random proper contiguous substring.

    The result length is uniform over [2, len-1] and the start offset uniform
    over the legal range, so every legal substring has nonzero probability.
    Inputs shorter than 4 characters pass through untouched.
    """
    check_probability(beta, "beta")
    if not text:
        raise ValueError("text must be non-empty")
    if len(text) < 4:
        return text
    if rng.random() >= beta:
        return text
    length = int(rng.integers(2, len(text)))
    start = int(rng.integers(0, len(text) - length + 1))
    return text[start : start + length]


def splice_segmaps(ctx: AnnotationContext, k: int, theta: float, rng: np.random.Generator) -> SegMap:
    """With probability theta, union map k with its nearest neighbor's map."""
    check_probability(theta, "theta")
    triggered = rng.random() < theta
    p = nearest_neighbor(ctx, k)
    if not triggered or p is None:
        return ctx.segmaps[k]
    return ctx.segmaps[k].union(ctx.segmaps[p])


def apply_ragp(
    triplet: Triplet, ctx: AnnotationContext, cfg: RagpConfig, rng: np.random.Generator
) -> Triplet:
    """Apply expansion, masking, and splicing to one triplet.

    The triplet's ``annotation_index`` selects its slot in the context. Text
    is expanded first and masked second; the map splice uses an independent
    draw. With all rates at zero this is the identity.
    """
    out, _ = apply_ragp_traced(triplet, ctx, cfg, rng)
    return out


def apply_ragp_traced(
    triplet: Triplet, ctx: AnnotationContext, cfg: RagpConfig, rng: np.random.Generator
) -> tuple[Triplet, RagpOutcome]:
    """Like :func:`apply_ragp` but also reports which edits fired."""
    k = triplet.annotation_index
    if not (0 <= k < len(ctx)):
        raise IndexError(f"annotation index {k} not present in context of size {len(ctx)}")

    text = expand_text(ctx, k, cfg.alpha, rng)
    expanded = text != ctx.texts[k]
    masked_text_value = mask_text(text, cfg.beta, rng)
    masked = masked_text_value != text
    segmap = splice_segmaps(ctx, k, cfg.theta, rng)
    spliced = segmap is not ctx.segmaps[k]

    out = Triplet(
        image_id=triplet.image_id,
        segmap=segmap,
        text=masked_text_value,
        annotation_index=k,
    )
    return out, RagpOutcome(expanded=expanded, masked=masked, spliced=spliced)
