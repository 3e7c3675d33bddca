"""Two-stage contrastive training protocol.

Stage 1 teaches region-guided matching with the text tower frozen (after an
optional joint warm-up that gives the text tower usable features, since we
train from scratch rather than from pretrained weights). Stage 2 installs a
frozen snapshot of the stage-1 visual pathway as the global encoder, switches
fusion on, and augments every sampled triplet with the random granularity
edits.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .manifest import DatasetManifest
from .model import DualEncoder
from .ragp import AnnotationContext, RagpConfig, apply_ragp
from .segmap import SegMap, Triplet, full_highlight

logger = logging.getLogger(__name__)

CONTRASTIVE_STAGES = ("warmup_text", "stage1", "stage2")


@dataclass
class TrainConfig:
    stage: str
    epochs: int
    batch_size: int = 48
    learning_rate: float = 1e-6
    ragp: RagpConfig | None = None
    seed: int = 0
    use_textpos: bool = True
    train_image_encoder: bool = True
    use_global_fusion: bool = True
    log_path: str | None = None

    def __post_init__(self):
        if self.stage not in CONTRASTIVE_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or (self.stage != "warmup_text" and self.epochs < 1):
            raise ValueError("epochs must be >= 1 (warm-up may use 0)")
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainState:
    model: DualEncoder
    optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)

    def record(self, entry: dict, log_path: str | None) -> None:
        self.loss_history.append(entry)
        if log_path:
            with Path(log_path).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")


def init_state(model: DualEncoder) -> TrainState:
    return TrainState(model=model)


def nce_loss(image_embs, text_embs, tau) -> torch.Tensor:
    """Contrastive loss over a batch of matched image/text embedding pairs.

    Row i of the similarity matrix is a softmax over all texts with text i as
    the positive:  -(1/N) sum_i log softmax_j(i_emb . t_emb_j / tau)[i].
    """
    image_embs = torch.as_tensor(image_embs)
    text_embs = torch.as_tensor(text_embs)
    tau_value = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_value <= 0:
        raise ValueError(f"temperature must be positive, got {tau_value}")
    if image_embs.shape != text_embs.shape:
        raise ValueError("image and text embedding batches must have equal shapes")
    logits = image_embs @ text_embs.T / tau
    labels = torch.arange(image_embs.shape[0], device=logits.device)
    return torch.nn.functional.cross_entropy(logits, labels)


class _BatchSource:
    """Caches prepared image tensors and assembles training batches."""

    def __init__(self, model: DualEncoder, images: "ImageSource"):
        self.model = model
        self.images = images
        self._image_cache: dict[str, torch.Tensor] = {}

    def image_tensor(self, image_id: str) -> torch.Tensor:
        cached = self._image_cache.get(image_id)
        if cached is None:
            cached = self.model.prepare_image(self.images[image_id])
            self._image_cache[image_id] = cached
        return cached

    def batch(
        self, triplets: list[Triplet], segmaps: list[SegMap] | None
    ) -> tuple[torch.Tensor, torch.Tensor | None, list[str]]:
        image = torch.stack([self.image_tensor(t.image_id) for t in triplets])
        seg = None
        if segmaps is not None:
            seg = torch.stack([self.model.prepare_segmap(m) for m in segmaps])
        return image, seg, [t.text for t in triplets]


class ImageSource:
    """Uniform id -> pixels access over a manifest or plain dict."""

    def __init__(self, source):
        if isinstance(source, DatasetManifest):
            self._get = source.pixels_for
        elif isinstance(source, dict):
            self._get = source.__getitem__
        else:
            raise TypeError("image source must be a DatasetManifest or dict")

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self._get(image_id)


def build_context_index(manifest: DatasetManifest) -> dict[str, AnnotationContext]:
    """Per-image annotation contexts for the granularity edits."""
    index = {}
    for rec in manifest.records:
        if rec.annotations:
            index[rec.image.id] = AnnotationContext.from_annotations(
                rec.image.width, rec.image.height, rec.annotations
            )
    return index


def _epoch_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < batch_size:
        dropped = len(batches[-1])
        if dropped == 1:
            warnings.warn("dropping a size-1 batch at epoch end (degenerate for NCE)")
        else:
            logger.debug("dropping incomplete final batch of size %d", dropped)
        batches.pop()
    return batches


def _check_duplicates(texts: list[str]) -> None:
    if len(set(texts)) != len(texts):
        logger.debug("batch contains duplicate texts (contrastive label noise)")


def _set_trainable(model: DualEncoder, cfg: TrainConfig) -> list[torch.nn.Parameter]:
    """Freeze/unfreeze parameter sets for the given stage; return trainables."""
    for param in model.parameters():
        param.requires_grad_(False)

    trainable: list[torch.nn.Parameter] = [model.log_temperature]
    if cfg.stage == "warmup_text":
        trainable += list(model.guided.parameters())
        trainable += list(model.text.parameters())
    elif cfg.stage == "stage1":
        if cfg.train_image_encoder:
            trainable += list(model.guided.parameters())
        elif model.guided.textpos_stem is not None:
            trainable += list(model.guided.textpos_stem.parameters())
    elif cfg.stage == "stage2":
        trainable += list(model.guided.parameters())
        trainable += list(model.fusion.parameters())

    for param in trainable:
        param.requires_grad_(True)
    return trainable


def _run_epochs(
    state: TrainState,
    cfg: TrainConfig,
    triplets: list[Triplet],
    source: _BatchSource,
    *,
    segmap_for,
    use_fusion: bool,
    origin_features_for=None,
) -> TrainState:
    model = state.model
    model.invalidate_fingerprint()
    torch.manual_seed(cfg.seed)
    data_rng = np.random.default_rng(cfg.seed)

    trainable = _set_trainable(model, cfg)
    state.optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    model.train()

    use_seg = cfg.use_textpos
    for epoch in range(cfg.epochs):
        epoch_losses = []
        t0 = time.perf_counter()
        for batch_idx in _epoch_batches(len(triplets), cfg.batch_size, data_rng):
            batch = [triplets[i] for i in batch_idx]
            segmaps = [segmap_for(t) for t in batch] if use_seg else None
            image, seg, texts = source.batch(batch, segmaps)
            _check_duplicates(texts)

            origin_feats = None
            if use_fusion:
                origin_feats = origin_features_for(batch, image)

            state.optimizer.zero_grad()
            image_embs = model.encode_image_batch(
                image, seg, use_global_fusion=use_fusion, origin_features=origin_feats
            )
            text_embs = model.encode_text_batch(texts)
            loss = nce_loss(image_embs, text_embs, model.temperature)
            loss.backward()
            state.optimizer.step()

            state.step += 1
            epoch_losses.append(float(loss.detach()))
            state.record(
                {
                    "stage": cfg.stage,
                    "epoch": state.epoch,
                    "step": state.step,
                    "loss": float(loss.detach()),
                },
                cfg.log_path,
            )
        state.epoch += 1
        if epoch_losses:
            logger.info(
                "%s epoch %d/%d mean_loss=%.4f (%.1fs)",
                cfg.stage,
                epoch + 1,
                cfg.epochs,
                float(np.mean(epoch_losses)),
                time.perf_counter() - t0,
            )
    model.eval()
    model.invalidate_fingerprint()
    return state


def warmup_text_encoder(
    state: TrainState, triplets: list[Triplet], images, cfg: TrainConfig
) -> TrainState:
    """Brief joint contrastive warm-up before the text tower is frozen.

    Runs with full-highlight maps and fusion off. Zero epochs are allowed
    (the text tower then stays at random init, a documented degraded mode).
    """
    if cfg.stage != "warmup_text":
        raise ValueError("config stage must be 'warmup_text'")
    if cfg.epochs == 0:
        logger.warning("0 warm-up epochs: text tower keeps its random init")
        return state
    source = _BatchSource(state.model, ImageSource(images))
    full_maps: dict[tuple[int, int], SegMap] = {}

    def segmap_for(triplet: Triplet) -> SegMap:
        shape = triplet.segmap.data.shape
        if shape not in full_maps:
            full_maps[shape] = full_highlight(shape[1], shape[0])
        return full_maps[shape]

    return _run_epochs(
        state, cfg, triplets, source, segmap_for=segmap_for, use_fusion=False
    )


def train_stage1(
    state: TrainState, triplets: list[Triplet], images, cfg: TrainConfig
) -> TrainState:
    """Single-granularity alignment with the text tower frozen, fusion off."""
    if cfg.stage != "stage1":
        raise ValueError("config stage must be 'stage1'")
    if not triplets:
        raise ValueError("stage-1 training needs at least one triplet")
    source = _BatchSource(state.model, ImageSource(images))
    return _run_epochs(
        state, cfg, triplets, source, segmap_for=lambda t: t.segmap, use_fusion=False
    )


def train_stage2(
    state: TrainState,
    triplets: list[Triplet],
    images,
    ctx_index: dict[str, AnnotationContext],
    cfg: TrainConfig,
) -> TrainState:
    """Multi-granularity stage: granularity edits + frozen-global fusion.

    Installs the frozen global pathway from the current (stage-1) weights if
    not already present. The global tower's per-image stage features are
    cached across epochs, which is sound because both the tower and the raw
    images are constant for the whole stage.
    """
    if cfg.stage != "stage2":
        raise ValueError("config stage must be 'stage2'")
    if not triplets:
        raise ValueError("stage-2 training needs at least one triplet")
    for triplet in triplets:
        if triplet.image_id not in ctx_index:
            raise KeyError(f"no annotation context for image {triplet.image_id!r}")

    model = state.model
    if not model.has_global_encoder:
        model.install_global_encoder()

    source = _BatchSource(model, ImageSource(images))
    ragp_cfg = cfg.ragp if cfg.ragp is not None else RagpConfig(0.0, 0.0, 0.0)
    ragp_rng = np.random.default_rng([cfg.seed, 0x5EED])

    def prepare_batch(batch: list[Triplet]) -> list[Triplet]:
        if not ragp_cfg.active:
            return batch
        return [
            apply_ragp(t, ctx_index[t.image_id], ragp_cfg, ragp_rng) for t in batch
        ]

    origin_cache: dict[str, list[torch.Tensor]] = {}

    def origin_features_for(batch: list[Triplet], image: torch.Tensor) -> list[torch.Tensor]:
        missing = [i for i, t in enumerate(batch) if t.image_id not in origin_cache]
        if missing:
            feats = model.global_stage_features(image[missing])
            for slot, i in enumerate(missing):
                origin_cache[batch[i].image_id] = [f[slot].detach() for f in feats]
        per_stage = []
        for stage_idx in range(len(origin_cache[batch[0].image_id])):
            per_stage.append(
                torch.stack([origin_cache[t.image_id][stage_idx] for t in batch])
            )
        return per_stage

    original = triplets
    use_fusion = cfg.use_global_fusion

    # mirrors _run_epochs, plus per-batch augmentation before encoding
    model.invalidate_fingerprint()
    torch.manual_seed(cfg.seed)
    data_rng = np.random.default_rng(cfg.seed)
    trainable = _set_trainable(model, cfg)
    state.optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    model.train()
    if model.global_encoder is not None:
        model.global_encoder.eval()

    for epoch in range(cfg.epochs):
        epoch_losses = []
        t0 = time.perf_counter()
        for batch_idx in _epoch_batches(len(original), cfg.batch_size, data_rng):
            batch = prepare_batch([original[i] for i in batch_idx])
            segmaps = [t.segmap for t in batch] if cfg.use_textpos else None
            image, seg, texts = source.batch(batch, segmaps)
            _check_duplicates(texts)
            origin_feats = origin_features_for(batch, image) if use_fusion else None

            state.optimizer.zero_grad()
            image_embs = model.encode_image_batch(
                image, seg, use_global_fusion=use_fusion, origin_features=origin_feats
            )
            text_embs = model.encode_text_batch(texts)
            loss = nce_loss(image_embs, text_embs, model.temperature)
            loss.backward()
            state.optimizer.step()

            state.step += 1
            epoch_losses.append(float(loss.detach()))
            state.record(
                {
                    "stage": cfg.stage,
                    "epoch": state.epoch,
                    "step": state.step,
                    "loss": float(loss.detach()),
                },
                cfg.log_path,
            )
        state.epoch += 1
        if epoch_losses:
            logger.info(
                "stage2 epoch %d/%d mean_loss=%.4f (%.1fs)",
                epoch + 1,
                cfg.epochs,
                float(np.mean(epoch_losses)),
                time.perf_counter() - t0,
            )
    model.eval()
    model.invalidate_fingerprint()
    return state
