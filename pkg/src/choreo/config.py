"""Model shape configuration and reserved token ids."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

# Token id layout: one token per byte, then reserved specials.
N_BYTE_TOKENS = 256
BOS_MSG = 256
EOS_MSG = 257
# Role markers are reserved but unused: the call API carries roles as text.
ROLE_MARKERS = (258, 259, 260, 261)
N_RESERVED = 262


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the toy decoder-only transformer.

    model_dim is always n_heads * head_dim; there is no independent knob.
    """

    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    vocab_size: int = 512
    context_window: int = 2048
    rope_base: float = 10000.0
    seed: int = 0

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.n_heads < 1 or self.ffn_dim < 1:
            raise ValueError("n_layers, n_heads, ffn_dim must be >= 1")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even (rotations act on pairs)")
        if self.vocab_size < N_RESERVED:
            raise ValueError(f"vocab_size must cover the {N_RESERVED} reserved token ids")
        if self.context_window < 1:
            raise ValueError("context_window must be >= 1")
        if self.rope_base <= 1.0:
            raise ValueError("rope_base must be > 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_CONFIG = ModelConfig()
