"""Scikit-learn style facade over the full retrieval pipeline.

``SceneTextRetriever`` wraps the two-stage training protocol behind the
familiar fit/predict surface, so the retriever composes with sklearn
tooling (``clone``, ``get_params``/``set_params``, pipelines operating on
query strings). ``fit`` expects a dataset manifest (or path to one);
``predict`` maps query strings to their top-ranked image id.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import gallery as gallery_mod
from .detector import DetectorSpec
from .manifest import DatasetManifest, load_manifest
from .model import DualEncoder, EncoderConfig
from .ragp import RagpConfig
from .segmap import full_highlight, generate_triplets
from .trainer import (
    TrainConfig,
    build_context_index,
    init_state,
    train_stage1,
    train_stage2,
    warmup_text_encoder,
)


def _as_manifest(X) -> DatasetManifest:
    if isinstance(X, DatasetManifest):
        return X
    if isinstance(X, (str, Path)):
        return load_manifest(X)
    raise TypeError("expected a DatasetManifest or a path to a manifest file")


class SceneTextRetriever(BaseEstimator):
    """Two-stage trained dual encoder with a gallery query surface.

    Parameters mirror the training configuration; all stochastic behavior
    flows from ``seed``. After ``fit`` the trained network lives in
    ``self.model_``; call ``index_gallery`` to build the searchable index
    (by default over the training manifest with the oracle detector).
    """

    def __init__(
        self,
        input_resolution: int = 64,
        embed_dim: int = 128,
        stage_channels: tuple[int, ...] = (16, 32, 64, 128),
        warmup_epochs: int = 3,
        stage1_epochs: int = 8,
        stage2_epochs: int = 8,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        ragp_alpha: float = 0.3,
        ragp_beta: float = 0.2,
        ragp_theta: float = 0.2,
        use_ragp: bool = True,
        use_global_fusion: bool = True,
        detector: str = "oracle",
        seed: int = 0,
    ):
        self.input_resolution = input_resolution
        self.embed_dim = embed_dim
        self.stage_channels = stage_channels
        self.warmup_epochs = warmup_epochs
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.ragp_alpha = ragp_alpha
        self.ragp_beta = ragp_beta
        self.ragp_theta = ragp_theta
        self.use_ragp = use_ragp
        self.use_global_fusion = use_global_fusion
        self.detector = detector
        self.seed = seed

    # ---- sklearn plumbing ---------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SceneTextRetriever is not fitted yet; call fit first")

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_resolution=self.input_resolution,
            embed_dim=self.embed_dim,
            stage_channels=tuple(self.stage_channels),
        )

    # ---- estimator API --------------------------------------------------------

    def fit(self, X, y=None) -> "SceneTextRetriever":
        """Run warm-up, stage 1, and stage 2 on a manifest's triplets."""
        manifest = _as_manifest(X)
        triplets = generate_triplets(manifest)
        if not triplets:
            raise ValueError("manifest has no annotations; nothing to train on")

        model = DualEncoder(self._encoder_config())
        state = init_state(model)
        if self.warmup_epochs > 0:
            state = warmup_text_encoder(
                state,
                triplets,
                manifest,
                TrainConfig(
                    stage="warmup_text",
                    epochs=self.warmup_epochs,
                    batch_size=self.batch_size,
                    learning_rate=self.learning_rate,
                    seed=self.seed,
                ),
            )
        state = train_stage1(
            state,
            triplets,
            manifest,
            TrainConfig(
                stage="stage1",
                epochs=self.stage1_epochs,
                batch_size=self.batch_size,
                learning_rate=self.learning_rate,
                seed=self.seed + 1,
            ),
        )
        if self.stage2_epochs > 0:
            ragp = (
                RagpConfig(self.ragp_alpha, self.ragp_beta, self.ragp_theta)
                if self.use_ragp
                else RagpConfig(0.0, 0.0, 0.0)
            )
            state = train_stage2(
                state,
                triplets,
                manifest,
                build_context_index(manifest),
                TrainConfig(
                    stage="stage2",
                    epochs=self.stage2_epochs,
                    batch_size=self.batch_size,
                    learning_rate=self.learning_rate,
                    ragp=ragp,
                    seed=self.seed + 2,
                    use_global_fusion=self.use_global_fusion,
                ),
            )
        self.model_ = state.model
        self.train_manifest_ = manifest
        self.loss_history_ = state.loss_history
        return self

    def index_gallery(self, X=None) -> "SceneTextRetriever":
        """Build the searchable index over a manifest (default: training set)."""
        self._check_fitted()
        manifest = self.train_manifest_ if X is None else _as_manifest(X)
        spec = DetectorSpec(kind=self.detector, manifest=manifest if self.detector == "oracle" else None)
        pairs = gallery_mod.build_pairs(manifest, spec)
        self.index_ = gallery_mod.build_index(
            pairs, self.model_, manifest, use_global_fusion=self.use_global_fusion and self.stage2_epochs > 0
        )
        self.gallery_manifest_ = manifest
        return self

    def retrieve(self, query_text: str, top_k: int = 10):
        self._check_fitted()
        if not hasattr(self, "index_"):
            raise NotFittedError("no gallery index; call index_gallery first")
        return gallery_mod.query(self.index_, self.model_, query_text, top_k=top_k)

    def predict(self, X) -> np.ndarray:
        """Top-1 image id for each query string in X."""
        results = [self.retrieve(text, top_k=1).top() for text in X]
        return np.asarray(results, dtype=object)

    def transform(self, X) -> np.ndarray:
        """Embed images (full-highlight guidance) into the shared space.

        X is a sequence of (H, W, 3) uint8 arrays; returns an (n, d) matrix.
        """
        self._check_fitted()
        rows = []
        for pixels in X:
            arr = np.asarray(pixels)
            mask = full_highlight(arr.shape[1], arr.shape[0])
            rows.append(
                self.model_.encode_image_guided(
                    arr, mask, use_global_fusion=self.model_.has_global_encoder
                )
            )
        return np.stack(rows)

    def score(self, X=None, y=None) -> float:
        """Mean average precision over a manifest's queries (default: indexed set)."""
        from .evaluation import evaluate

        self._check_fitted()
        if not hasattr(self, "index_"):
            raise NotFittedError("no gallery index; call index_gallery first")
        manifest = self.gallery_manifest_ if X is None else _as_manifest(X)
        return evaluate(manifest, self.index_, self.model_).map_score
