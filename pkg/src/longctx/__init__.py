"""Desk-scale long-context training stack.

Exact blockwise attention with a rotating ring of sequence-parallel
workers, masked sequence packing that reproduces padded-batch training to
numerical identity, rotary embeddings with proportional base scaling for
progressive context extension, synthetic fact-retrieval data and
evaluation, and a small autoregressive transformer trained end to end on
one CPU.
"""

from .attention import (
    AttentionSaved,
    AttentionState,
    MaskSpec,
    attention_backward,
    causal_mask,
    full_attention,
    full_attention_with_stats,
)
from .model import ModelConfig, Transformer, DecodeSession
from .needle import (
    MultiNeedleConfig,
    NeedleSpec,
    OracleModel,
    RandomDigitModel,
    build_haystack,
    grid_eval,
    make_needle_case,
    score_response,
    score_tokens,
)
from .packing import (
    Example,
    PackedSequence,
    SpecialTokens,
    build_multimodal_stream,
    default_special_tokens,
    mask_from_segments,
    pack_examples,
    pack_stream,
    parse_multimodal_stream,
    unpack,
)
from .ring import (
    InProcessTransport,
    RingTopology,
    SocketTransport,
    ring_attention,
    ring_attention_full,
    shard_sequence,
)
from .rope import (
    REFERENCE_SCHEDULE,
    TOY_SCHEDULE,
    RopeConfig,
    ThetaSchedule,
    theta_for_context,
)
from .trainer import (
    AdamW,
    Checkpoint,
    StagePlan,
    TrainAbort,
    load_checkpoint,
    progressive_run,
    resume_stage,
    sample,
    save_checkpoint,
    train_stage,
)
from .vocab import DEFAULT_VOCAB, Vocab

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AttentionSaved",
    "AttentionState",
    "Checkpoint",
    "DecodeSession",
    "DEFAULT_VOCAB",
    "Example",
    "InProcessTransport",
    "MaskSpec",
    "ModelConfig",
    "MultiNeedleConfig",
    "NeedleSpec",
    "OracleModel",
    "PackedSequence",
    "RandomDigitModel",
    "REFERENCE_SCHEDULE",
    "RingTopology",
    "RopeConfig",
    "SocketTransport",
    "SpecialTokens",
    "StagePlan",
    "ThetaSchedule",
    "TOY_SCHEDULE",
    "TrainAbort",
    "Transformer",
    "Vocab",
    "attention_backward",
    "build_haystack",
    "build_multimodal_stream",
    "causal_mask",
    "default_special_tokens",
    "full_attention",
    "full_attention_with_stats",
    "grid_eval",
    "load_checkpoint",
    "make_needle_case",
    "mask_from_segments",
    "pack_examples",
    "pack_stream",
    "parse_multimodal_stream",
    "progressive_run",
    "resume_stage",
    "ring_attention",
    "ring_attention_full",
    "sample",
    "save_checkpoint",
    "score_response",
    "score_tokens",
    "shard_sequence",
    "theta_for_context",
    "train_stage",
    "unpack",
]
