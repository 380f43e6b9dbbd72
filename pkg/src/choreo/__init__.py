"""Toy decoder-only transformer with a choreographed, append-only KV cache.

Two engines share one call surface. `Engine` appends every message to a
global cache, controls visibility per call through parent lists, and
repositions cached messages by rotating their keys in place. It decodes
several messages at once, step-synchronously, over interleaved cache slots.
`BaselineEngine` re-encodes each decode prompt from scratch (with an exact
prefix cache) and is the correctness oracle the choreographed engine is
checked against.
"""

from .baseline import BaselineEngine, PrefixTrie
from .cache import GlobalKvCache, MessageSpan
from .config import (
    BOS_MSG,
    DEFAULT_CONFIG,
    EOS_MSG,
    N_BYTE_TOKENS,
    ModelConfig,
)
from .engine import CallStats, DecodeCall, Engine, PrefillCall, SamplingParams
from .errors import (
    AllMaskedError,
    CapacityError,
    ChoreoError,
    DeltaRangeError,
    EmptyHeaderError,
    InvalidCallError,
    NondeterminismError,
    OffsetConflictError,
    ScriptError,
    ShapeError,
    TraceMismatchError,
    UnknownMessageError,
    WindowOverflowError,
)
from .masking import VisibilitySpec, build_dense_mask, visible, visible_cache_indices
from .model import (
    FlopTally,
    WeightSet,
    encode_flops,
    forward_step,
    init_weights,
    load_weights,
    save_weights,
)
from .script import Trace, diff_traces, load_script, run_script
from .tensor import RotationTable, count_matmul_flops, matmul
from .tokenizer import decode_tokens, encode_text, frame_header, frame_message
from .workflows import WORKFLOWS

__version__ = "0.1.0"

__all__ = [
    "AllMaskedError",
    "BOS_MSG",
    "BaselineEngine",
    "CallStats",
    "CapacityError",
    "ChoreoError",
    "DEFAULT_CONFIG",
    "DecodeCall",
    "DeltaRangeError",
    "EmptyHeaderError",
    "Engine",
    "EOS_MSG",
    "FlopTally",
    "GlobalKvCache",
    "InvalidCallError",
    "MessageSpan",
    "ModelConfig",
    "N_BYTE_TOKENS",
    "NondeterminismError",
    "OffsetConflictError",
    "PrefillCall",
    "PrefixTrie",
    "RotationTable",
    "SamplingParams",
    "ScriptError",
    "ShapeError",
    "Trace",
    "TraceMismatchError",
    "UnknownMessageError",
    "VisibilitySpec",
    "WORKFLOWS",
    "WeightSet",
    "WindowOverflowError",
    "build_dense_mask",
    "count_matmul_flops",
    "decode_tokens",
    "diff_traces",
    "encode_flops",
    "encode_text",
    "forward_step",
    "frame_header",
    "frame_message",
    "init_weights",
    "load_script",
    "load_weights",
    "matmul",
    "run_script",
    "save_weights",
    "visible",
    "visible_cache_indices",
]
