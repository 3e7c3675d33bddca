"""Retrieval quality and throughput measurement.

Average precision is the non-interpolated variant: for a ranking and a
relevant set, AP = (1/|relevant|) * sum over relevant hits of
(hits_at_or_before_rank / rank). Queries with no relevant image in the
gallery are excluded (loudly) rather than scored zero.

Throughput (FPS) counts gallery images scored per wall-clock second over the
scoring phase only: text encoding + similarity + ranking, amortized over all
queries. Index construction is never part of the measured window.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .gallery import GalleryIndex, query
from .manifest import DatasetManifest, Layout

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    per_query: dict[str, float]
    map_score: float
    fps: float | None = None
    splits: dict[str, float] | None = None
    excluded_queries: list[str] = field(default_factory=list)
    gallery_size: int = 0

    def to_json(self) -> dict:
        return {
            "map": self.map_score,
            "fps": self.fps,
            "gallery_size": self.gallery_size,
            "per_query": dict(sorted(self.per_query.items())),
            "splits": self.splits,
            "excluded_queries": sorted(self.excluded_queries),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    def to_text(self) -> str:
        lines = [f"gallery: {self.gallery_size} images, {len(self.per_query)} queries scored"]
        for term, ap in sorted(self.per_query.items()):
            lines.append(f"  AP {ap:.4f}  {term}")
        if self.splits:
            for name, score in sorted(self.splits.items()):
                lines.append(f"split {name}: mAP {score:.4f}")
        if self.excluded_queries:
            lines.append(f"excluded (no relevant images): {', '.join(sorted(self.excluded_queries))}")
        if self.fps is not None:
            lines.append(f"throughput: {self.fps:.1f} images/s")
        lines.append(f"mAP: {self.map_score:.4f}")
        return "\n".join(lines)


def average_precision(ranking, relevant) -> float:
    """Non-interpolated AP of a full gallery ranking against a relevant set."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision is undefined for an empty relevant set")
    ranked = list(ranking)
    missing = relevant - set(ranked)
    if missing:
        raise ValueError(f"relevant ids missing from the ranking: {sorted(missing)[:4]}")
    hits = 0
    total = 0.0
    for rank, image_id in enumerate(ranked, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def evaluate(
    manifest: DatasetManifest,
    index: GalleryIndex,
    model,
    *,
    split_by_layout: bool = False,
) -> EvalReport:
    """Score every manifest query against the index and aggregate mAP.

    With ``split_by_layout``, each layout class is additionally evaluated as
    its own restricted gallery (both candidates and relevance limited to the
    split), mirroring per-layout benchmark tables.
    """
    gallery_ids = set(index.image_ids())
    missing = {rec.image.id for rec in manifest.records} - gallery_ids
    if missing:
        raise ValueError(f"index does not cover manifest images: {sorted(missing)[:4]}")

    per_query: dict[str, float] = {}
    excluded: list[str] = []
    started = time.perf_counter()
    images_scored = 0
    for term, relevant in manifest.queries.items():
        relevant = relevant & gallery_ids
        if not relevant:
            logger.warning("query %r has no relevant images in the gallery; excluded", term)
            excluded.append(term)
            continue
        result = query(index, model, term, top_k=len(gallery_ids))
        per_query[term] = average_precision(result.ids(), relevant)
        images_scored += len(gallery_ids)
    elapsed = time.perf_counter() - started
    fps = images_scored / elapsed if elapsed > 0 and images_scored else None

    if not per_query:
        raise ValueError("no query had relevant images; nothing to evaluate")
    report = EvalReport(
        per_query=per_query,
        map_score=sum(per_query.values()) / len(per_query),
        fps=fps,
        gallery_size=len(gallery_ids),
        excluded_queries=excluded,
    )

    if split_by_layout:
        splits = {}
        for layout in Layout:
            ids = [rec.image.id for rec in manifest.records if rec.layout is layout]
            if not ids:
                continue
            sub = evaluate_subset(manifest, index, model, ids)
            if sub is not None:
                splits[layout.value] = sub.map_score
        report.splits = splits
    return report


def evaluate_subset(
    manifest: DatasetManifest, index: GalleryIndex, model, image_ids
) -> EvalReport | None:
    """Evaluate on a restricted gallery (e.g. one layout class or a union).

    Returns None when no query has relevant images inside the subset.
    """
    keep = set(image_ids)
    rows = [i for i, pair in enumerate(index.pair_table) if pair.image_id in keep]
    if not rows:
        return None
    sub_index = GalleryIndex(
        embeddings=index.embeddings[rows],
        pair_table=[index.pair_table[i] for i in rows],
        model_fingerprint=index.model_fingerprint,
        use_global_fusion=index.use_global_fusion,
    )
    sub_manifest = manifest.subset(keep)
    if not sub_manifest.queries:
        return None
    return evaluate(sub_manifest, sub_index, model)


def measure_fps(
    index: GalleryIndex,
    model,
    queries: list[str],
    repetitions: int = 3,
) -> float:
    """Median scoring throughput in gallery images per second.

    One untimed warm-up pass runs first. Each repetition times the full
    scoring phase (text encoding + similarity + ranking) for every query;
    throughput is (gallery images x queries) / elapsed.
    """
    if not queries:
        raise ValueError("need at least one query to measure throughput")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if repetitions == 1:
        logger.warning("single-repetition FPS measurement; treat as low confidence")
    n_images = len(index.image_ids())

    for term in queries:  # warm-up
        query(index, model, term, top_k=n_images)

    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for term in queries:
            query(index, model, term, top_k=n_images)
        elapsed = time.perf_counter() - t0
        samples.append(n_images * len(queries) / elapsed)
    samples.sort()
    mid = len(samples) // 2
    if len(samples) % 2:
        return samples[mid]
    return 0.5 * (samples[mid - 1] + samples[mid])
