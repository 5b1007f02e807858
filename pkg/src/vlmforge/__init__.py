"""Desk-scale visual-language pre-training pipeline."""

from .corpus import (
    BlendSampler,
    CorpusStats,
    ImageSegment,
    InterleavedDocument,
    PairSample,
    TextSegment,
    compute_stats,
    parse_corpus,
    reformat_images_first,
    subsample_topk,
    to_pairs,
)
from .diagnostics import AlignmentProfile, alignment_profile, chamfer_cosine
from .model import (
    Downsample,
    ForwardTrace,
    Linear,
    Model,
    ModelConfig,
    TransformerBlockProjector,
)
from .packing import (
    ByteTokenizer,
    PackedSample,
    pack_document,
    pack_sft,
    read_shard,
    tokens_per_image,
    write_shard,
)
from .trainer import FreezePolicy, RunLog, StagePlan, StageSpec, run_recipe, run_stage

__version__ = "0.1.0"
