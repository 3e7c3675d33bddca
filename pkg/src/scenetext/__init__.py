"""Layout-robust scene text retrieval with region-guided dual encoders."""

from .estimator import SceneTextRetriever
from .evaluation import EvalReport, average_precision, evaluate, measure_fps
from .gallery import (
    GalleryIndex,
    GalleryPair,
    QueryResult,
    build_index,
    build_pairs,
    load_index,
    query,
    region_query,
    save_index,
)
from .manifest import (
    DatasetManifest,
    DatasetRecord,
    ImageRecord,
    Layout,
    TextAnnotation,
    load_manifest,
    save_manifest,
)
from .model import (
    DualEncoder,
    EncoderConfig,
    load_checkpoint,
    resize_positional_encodings,
    save_checkpoint,
    similarity,
)
from .ragp import (
    AnnotationContext,
    RagpConfig,
    apply_ragp,
    expand_text,
    mask_text,
    nearest_neighbor,
    splice_segmaps,
)
from .segmap import SegMap, Triplet, full_highlight, generate_triplets, segmap_from_polygon
from .synth import random_vocab, synthesize_corpus
from .trainer import (
    TrainConfig,
    TrainState,
    init_state,
    nce_loss,
    train_stage1,
    train_stage2,
    warmup_text_encoder,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationContext",
    "DatasetManifest",
    "DatasetRecord",
    "DualEncoder",
    "EncoderConfig",
    "EvalReport",
    "GalleryIndex",
    "GalleryPair",
    "ImageRecord",
    "Layout",
    "QueryResult",
    "RagpConfig",
    "SceneTextRetriever",
    "SegMap",
    "TextAnnotation",
    "TrainConfig",
    "TrainState",
    "Triplet",
    "apply_ragp",
    "average_precision",
    "build_index",
    "build_pairs",
    "evaluate",
    "expand_text",
    "full_highlight",
    "generate_triplets",
    "init_state",
    "load_checkpoint",
    "load_index",
    "load_manifest",
    "mask_text",
    "measure_fps",
    "nce_loss",
    "nearest_neighbor",
    "query",
    "random_vocab",
    "region_query",
    "resize_positional_encodings",
    "save_checkpoint",
    "save_index",
    "save_manifest",
    "segmap_from_polygon",
    "similarity",
    "splice_segmaps",
    "synthesize_corpus",
    "train_stage1",
    "train_stage2",
    "warmup_text_encoder",
]
