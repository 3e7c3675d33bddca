"""Dual-encoder network for region-guided scene text retrieval.

The image side is a small residual CNN whose stem sums an RGB branch and a
single-channel text-position branch, so a binary region map can steer
attention without cropping the image. A frozen copy of the RGB pathway (the
"global encoder") can be installed after stage-1 training; its per-stage
features are injected back through zero-initialized 1x1 fusion layers, so a
freshly fused model reproduces the unfused one exactly.

The text side is a character-level transformer. Both towers project into a
shared embedding space and L2-normalize, so similarity is a plain dot
product. Checkpoints are portable zip archives (JSON metadata + npz tensors)
documented in docs/formats.md.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmap import SegMap
from .validation import as_binary_mask, as_rgb_array

CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_CHARSET = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    " -_.,:;!?'\"()[]/&+#@%*"
)


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters shared by both towers.

    ``stage_channels[0]`` is the stem width; each later entry is one
    downsampling stage, so the total downsampling factor is
    ``2 ** (len(stage_channels) - 1)``.
    """

    input_resolution: int = 640
    embed_dim: int = 512
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    charset: str = DEFAULT_CHARSET
    max_text_len: int = 32
    temperature_init: float = 0.07
    pos_grid: tuple[int, int] | None = None
    fuse_stages: tuple[int, ...] | None = None
    text_layers: int = 2
    text_heads: int = 4
    text_width: int = 128

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if len(self.stage_channels) < 3:
            raise ValueError("need at least 2 visual stages after the stem")
        factor = self.downsample_factor
        if self.input_resolution % factor != 0:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by "
                f"total downsampling factor {factor}"
            )
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")
        if len(set(self.charset)) != len(self.charset):
            raise ValueError("charset contains duplicate characters")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels) - 1

    @property
    def downsample_factor(self) -> int:
        return 2**self.num_stages

    @property
    def final_grid(self) -> tuple[int, int]:
        if self.pos_grid is not None:
            return self.pos_grid
        side = self.input_resolution // self.downsample_factor
        return (side, side)

    @property
    def active_fuse_stages(self) -> tuple[int, ...]:
        if self.fuse_stages is None:
            return tuple(range(1, self.num_stages + 1))
        return self.fuse_stages

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        obj = dict(obj)
        for key in ("stage_channels", "pos_grid", "fuse_stages"):
            if obj.get(key) is not None:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 4
    while channels % groups != 0:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class _ResidualStage(nn.Module):
    """Stride-2 downsample followed by one residual block (SiLU activations)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm1 = _group_norm(cout)
        self.conv = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _group_norm(cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.norm1(self.down(x)))
        return F.silu(x + self.norm2(self.conv(x)))


class VisualPathway(nn.Module):
    """Residual CNN with an optional text-position stem branch.

    ``stage_features`` exposes per-stage outputs so a frozen twin pathway can
    contribute features through fusion layers; ``embed`` pools the last stage
    (after adding a learnable positional grid) into a unit-norm vector.
    """

    def __init__(self, cfg: EncoderConfig, with_textpos: bool):
        super().__init__()
        chans = cfg.stage_channels
        self.rgb_stem = nn.Conv2d(3, chans[0], 3, padding=1)
        self.textpos_stem = nn.Conv2d(1, chans[0], 3, padding=1) if with_textpos else None
        self.stages = nn.ModuleList(
            _ResidualStage(chans[i], chans[i + 1]) for i in range(len(chans) - 1)
        )
        gh, gw = cfg.final_grid
        self.pos_embedding = nn.Parameter(torch.zeros(chans[-1], gh, gw))
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        self.mix = nn.Conv2d(chans[-1], chans[-1], 3, padding=1)
        self.mix_norm = _group_norm(chans[-1])
        self.head = nn.Linear(chans[-1], cfg.embed_dim)

    def stem(self, image: torch.Tensor, segmap: torch.Tensor | None) -> torch.Tensor:
        x = self.rgb_stem(image)
        if segmap is not None:
            if self.textpos_stem is None:
                raise ValueError("this pathway has no text-position branch")
            if segmap.shape[-2:] != image.shape[-2:]:
                raise ValueError(
                    f"segmentation map shape {tuple(segmap.shape[-2:])} does not "
                    f"match image shape {tuple(image.shape[-2:])}"
                )
            x = x + self.textpos_stem(segmap)
        return x

    def stage_features(
        self,
        image: torch.Tensor,
        segmap: torch.Tensor | None = None,
        fusion: "FusionLayers | None" = None,
        origin_features: list[torch.Tensor] | None = None,
    ) -> list[torch.Tensor]:
        x = self.stem(image, segmap)
        feats = []
        for idx, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if fusion is not None and origin_features is not None and fusion.active(idx):
                x = x + fusion[idx](origin_features[idx - 1])
            feats.append(x)
        return feats

    def pool(self, last_stage: torch.Tensor) -> torch.Tensor:
        if last_stage.shape[-2:] != self.pos_embedding.shape[-2:]:
            raise ValueError(
                f"feature grid {tuple(last_stage.shape[-2:])} does not match the "
                f"positional grid {tuple(self.pos_embedding.shape[-2:])}; "
                "resize the positional encodings for this resolution"
            )
        x = last_stage + self.pos_embedding
        x = F.silu(self.mix_norm(self.mix(x)))
        x = x.mean(dim=(2, 3))
        return F.normalize(self.head(x), dim=-1)


class FusionLayers(nn.Module):
    """Per-stage 1x1 convolutions injecting frozen global features.

    Zero-initialized so that switching fusion on starts as an exact identity.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self._active = set(cfg.active_fuse_stages)
        layers = {}
        for idx in range(1, cfg.num_stages + 1):
            conv = nn.Conv2d(cfg.stage_channels[idx], cfg.stage_channels[idx], 1)
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            layers[str(idx)] = conv
        self.layers = nn.ModuleDict(layers)

    def active(self, stage_index: int) -> bool:
        return stage_index in self._active

    def __getitem__(self, stage_index: int) -> nn.Conv2d:
        return self.layers[str(stage_index)]


class TextEncoder(nn.Module):
    """Character-level transformer encoder with masked mean pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.charset = cfg.charset
        self.max_len = cfg.max_text_len
        self.char_to_id = {ch: i + 2 for i, ch in enumerate(cfg.charset)}  # 0=pad, 1=unk
        width = cfg.text_width
        self.embedding = nn.Embedding(len(cfg.charset) + 2, width, padding_idx=0)
        self.pos_embedding = nn.Parameter(torch.zeros(cfg.max_text_len, width))
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=cfg.text_heads,
            dim_feedforward=width * 2,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        # nested-tensor fast path is batch-size dependent; keep it off
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=cfg.text_layers, enable_nested_tensor=False
        )
        self.head = nn.Linear(width, cfg.embed_dim)

    def tokenize(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = torch.zeros(len(texts), self.max_len, dtype=torch.long)
        for row, text in enumerate(texts):
            if not text:
                raise ValueError("cannot encode empty text")
            if len(text) > self.max_len:
                warnings.warn(
                    f"text of length {len(text)} truncated to {self.max_len} characters"
                )
                text = text[: self.max_len]
            for col, ch in enumerate(text):
                ids[row, col] = self.char_to_id.get(ch, 1)
        padding_mask = ids == 0
        return ids, padding_mask

    def forward(self, texts: list[str]) -> torch.Tensor:
        ids, padding_mask = self.tokenize(texts)
        device = self.embedding.weight.device
        ids = ids.to(device)
        padding_mask = padding_mask.to(device)
        x = self.embedding(ids) + self.pos_embedding[None, :, :]
        x = self.transformer(x, src_key_padding_mask=padding_mask)
        keep = (~padding_mask).unsqueeze(-1).to(x.dtype)
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return F.normalize(self.head(pooled), dim=-1)


class DualEncoder(nn.Module):
    """Guided image tower + text tower + optional frozen global tower."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.guided = VisualPathway(cfg, with_textpos=True)
        self.text = TextEncoder(cfg)
        self.fusion = FusionLayers(cfg)
        self.global_encoder: VisualPathway | None = None
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(cfg.temperature_init), dtype=torch.float32)
        )
        self._fingerprint_cache: str | None = None

    @property
    def temperature(self) -> torch.Tensor:
        # clamp keeps the contrastive logits finite early in training
        return self.log_temperature.clamp(math.log(1e-2), math.log(1.0)).exp()

    @property
    def has_global_encoder(self) -> bool:
        return self.global_encoder is not None

    def install_global_encoder(self, source: VisualPathway | None = None) -> None:
        """Install a frozen snapshot of the (current) guided RGB pathway.

        The snapshot never sees segmentation maps; it supplies the per-stage
        global features consumed by the fusion layers.
        """
        source = source if source is not None else self.guided
        snapshot = copy.deepcopy(source)
        snapshot.textpos_stem = None
        for param in snapshot.parameters():
            param.requires_grad_(False)
        snapshot.eval()
        self.global_encoder = snapshot
        self.invalidate_fingerprint()

    def global_stage_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        if self.global_encoder is None:
            raise RuntimeError("no global encoder installed; run stage-2 setup first")
        with torch.no_grad():
            return self.global_encoder.stage_features(image)

    def encode_image_batch(
        self,
        image: torch.Tensor,
        segmap: torch.Tensor | None,
        use_global_fusion: bool = False,
        origin_features: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        fusion = None
        if use_global_fusion:
            if origin_features is None:
                origin_features = self.global_stage_features(image)
            fusion = self.fusion
        feats = self.guided.stage_features(
            image, segmap, fusion=fusion, origin_features=origin_features
        )
        return self.guided.pool(feats[-1])

    def encode_text_batch(self, texts: list[str]) -> torch.Tensor:
        return self.text(texts)

    # ---- numpy-facing convenience API -------------------------------------

    def _param_dtype(self) -> torch.dtype:
        return self.guided.rgb_stem.weight.dtype

    def prepare_image(self, pixels: np.ndarray) -> torch.Tensor:
        """(H, W, 3) uint8 -> normalized (3, R, R) tensor at input resolution."""
        arr = as_rgb_array(pixels)
        res = self.cfg.input_resolution
        tensor = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float() / 255.0
        tensor = tensor.unsqueeze(0)
        if tensor.shape[-2:] != (res, res):
            tensor = F.interpolate(tensor, size=(res, res), mode="bilinear", align_corners=False)
        return ((tensor - 0.5) / 0.5).squeeze(0).to(self._param_dtype())

    def prepare_segmap(self, segmap: SegMap | np.ndarray) -> torch.Tensor:
        """Binary map -> (1, R, R) tensor scaled to [0, 1] (nearest resize)."""
        data = segmap.data if isinstance(segmap, SegMap) else as_binary_mask(segmap)
        res = self.cfg.input_resolution
        tensor = torch.from_numpy(np.ascontiguousarray(data)).float().unsqueeze(0).unsqueeze(0)
        if tensor.shape[-2:] != (res, res):
            tensor = F.interpolate(tensor, size=(res, res), mode="nearest")
        return (tensor / 255.0).squeeze(0).to(self._param_dtype())

    @torch.no_grad()
    def encode_image_guided(
        self,
        pixels: np.ndarray,
        segmap: SegMap | np.ndarray,
        use_global_fusion: bool = False,
    ) -> np.ndarray:
        """Encode one image under region guidance; returns a unit d-vector."""
        arr = as_rgb_array(pixels)
        mask = segmap.data if isinstance(segmap, SegMap) else as_binary_mask(segmap)
        if mask.shape != arr.shape[:2]:
            raise ValueError(
                f"segmentation map shape {mask.shape} does not match image shape {arr.shape[:2]}"
            )
        was_training = self.training
        self.eval()
        try:
            image = self.prepare_image(arr).unsqueeze(0)
            seg = self.prepare_segmap(mask).unsqueeze(0)
            emb = self.encode_image_batch(image, seg, use_global_fusion=use_global_fusion)
        finally:
            self.train(was_training)
        return emb.squeeze(0).cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def encode_text(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot encode empty text")
        was_training = self.training
        self.eval()
        try:
            emb = self.encode_text_batch([text])
        finally:
            self.train(was_training)
        return emb.squeeze(0).cpu().numpy().astype(np.float32)

    def resize_positional_grid(self, input_resolution: int) -> None:
        """Adapt the learnable positional grids to a new input resolution.

        Existing entries are regridded with nearest-neighbor interpolation and
        re-registered as learnable parameters.
        """
        import dataclasses

        new_cfg = dataclasses.replace(self.cfg, input_resolution=input_resolution, pos_grid=None)
        target = new_cfg.final_grid
        pathways = [self.guided]
        if self.global_encoder is not None:
            pathways.append(self.global_encoder)
        for pathway in pathways:
            table = pathway.pos_embedding.detach().cpu().numpy()
            regridded = resize_positional_encodings(table, target)
            param = nn.Parameter(torch.from_numpy(np.ascontiguousarray(regridded)))
            param.requires_grad_(pathway.pos_embedding.requires_grad)
            pathway.pos_embedding = param
        self.cfg = new_cfg
        self.invalidate_fingerprint()

    # ---- identity ----------------------------------------------------------

    def invalidate_fingerprint(self) -> None:
        self._fingerprint_cache = None

    def fingerprint(self) -> str:
        """SHA-256 over the config and all named parameters/buffers."""
        if self._fingerprint_cache is not None:
            return self._fingerprint_cache
        digest = hashlib.sha256()
        digest.update(json.dumps(self.cfg.to_json(), sort_keys=True).encode())
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        self._fingerprint_cache = digest.hexdigest()
        return self._fingerprint_cache


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine score of two unit embeddings (a plain dot product)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def resize_positional_encodings(table: np.ndarray, target_grid: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor regrid of a (C, H, W) positional table.

    Each target cell copies its nearest source cell measured between cell
    centers; exact ties resolve toward the lower index.
    """
    c, src_h, src_w = table.shape
    tgt_h, tgt_w = target_grid
    if tgt_h <= 0 or tgt_w <= 0:
        raise ValueError("target grid dimensions must be positive")

    def _nearest(src: int, tgt: int) -> np.ndarray:
        positions = (np.arange(tgt) + 0.5) * src / tgt
        idx = np.ceil(positions - 1.0 - 1e-12).astype(np.int64)
        return np.clip(idx, 0, src - 1)

    rows = _nearest(src_h, tgt_h)
    cols = _nearest(src_w, tgt_w)
    return table[:, rows[:, None], cols[None, :]]


def param_fingerprint(module: nn.Module) -> str:
    """SHA-256 over a module's named parameters (frozen-weight checks)."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---- checkpoint archive -----------------------------------------------------


def save_checkpoint(model: DualEncoder, path: str | Path) -> str:
    """Write a portable checkpoint: zip(meta.json + weights.npz).

    Returns the model fingerprint recorded in the archive.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    fingerprint = model.fingerprint()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_json(),
        "has_global_encoder": model.has_global_encoder,
        "fingerprint": fingerprint,
    }
    buf = io.BytesIO()
    np.savez(buf, **state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        zf.writestr("weights.npz", buf.getvalue())
    return fingerprint


class CheckpointError(ValueError):
    """Raised for unreadable, mismatched, or wrong-version checkpoints."""


def load_checkpoint(path: str | Path) -> DualEncoder:
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            weights = np.load(io.BytesIO(zf.read("weights.npz")))
            state = {k: torch.from_numpy(weights[k]) for k in weights.files}
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    cfg = EncoderConfig.from_json(meta["config"])
    model = DualEncoder(cfg)
    if meta.get("has_global_encoder"):
        model.install_global_encoder()
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint {path} does not match the model: "
            f"missing={sorted(missing)[:4]} unexpected={sorted(unexpected)[:4]}"
        )
    model.eval()
    model.invalidate_fingerprint()
    recorded = meta.get("fingerprint")
    if recorded and model.fingerprint() != recorded:
        raise CheckpointError(f"checkpoint {path} failed its fingerprint self-check")
    return model
