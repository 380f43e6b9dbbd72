"""Toy decoder-only transformer.

Pre-norm blocks with RMS normalization, SiLU-gated FFN, no biases, untied
embeddings. Queries and keys are rotated by their logical position at
creation; the forward step reads visible context straight out of the shared
cache, so freshly computed keys/values can be appended by the caller without
recomputation.

The analytic FLOP tally mirrors the executed matmuls exactly: projections and
FFN per new token, attention over the visible cached columns plus the dense
within-batch block, and the output head for the rows logits were computed on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cache import GlobalKvCache
from .config import ModelConfig
from .errors import ShapeError, WindowOverflowError
from .tensor import RotationTable, masked_softmax_rows, matmul, rms_norm, silu

RMS_EPS = 1e-6


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class WeightSet:
    config: ModelConfig
    embed: np.ndarray  # (vocab, D)
    layers: list[LayerWeights]
    out_norm: np.ndarray  # (D,)
    out_head: np.ndarray  # (D, vocab)

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("embed", self.embed)]
        for i, lw in enumerate(self.layers):
            for name in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm",
                         "w_gate", "w_up", "w_down"):
                out.append((f"layers.{i}.{name}", getattr(lw, name)))
        out.append(("out_norm", self.out_norm))
        out.append(("out_head", self.out_head))
        return out


def init_weights(config: ModelConfig, dtype=np.float64) -> WeightSet:
    """Seeded scaled-uniform init; same seed gives bitwise-identical weights.

    Draw order is fixed: embed, then per layer wq, wk, wv, wo, w_gate, w_up,
    w_down, then out_head. Norm weights are ones and consume no randomness.
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dtype = np.dtype(dtype)

    def draw(fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    d = config.model_dim
    embed = draw(config.vocab_size, d, (config.vocab_size, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            attn_norm=np.ones(d, dtype=dtype),
            wq=draw(d, d, (d, d)),
            wk=draw(d, d, (d, d)),
            wv=draw(d, d, (d, d)),
            wo=draw(d, d, (d, d)),
            ffn_norm=np.ones(d, dtype=dtype),
            w_gate=draw(d, config.ffn_dim, (d, config.ffn_dim)),
            w_up=draw(d, config.ffn_dim, (d, config.ffn_dim)),
            w_down=draw(config.ffn_dim, d, (config.ffn_dim, d)),
        ))
    out_head = draw(d, config.vocab_size, (d, config.vocab_size))
    return WeightSet(config=config, embed=embed, layers=layers,
                     out_norm=np.ones(d, dtype=dtype), out_head=out_head)


# -- forward ------------------------------------------------------------------


@dataclass
class BatchGroup:
    """One message's new tokens for a forward step.

    visible_idx holds the physical cache indices this message may attend to
    (its parents' tokens plus its own already-cached tokens), ascending.
    Within the group, attention is causal in token order; tokens of other
    groups in the same step are never visible.
    """

    message_id: int
    token_ids: np.ndarray
    positions: np.ndarray
    visible_idx: np.ndarray


@dataclass
class StepResult:
    logits: list[np.ndarray | None]  # per group; shape (rows, vocab)
    keys: list[np.ndarray]  # per group (L, T, H, D), post-rotation
    values: list[np.ndarray]


def forward_step(weights: WeightSet, cache: GlobalKvCache, groups: list[BatchGroup],
                 rotation: RotationTable, logit_rows: str = "all") -> StepResult:
    """Encode new tokens against the cache; does not mutate the cache.

    logit_rows: "all" computes logits for every new token, "last" only for each
    group's final token, "none" skips the output head.
    """
    if logit_rows not in ("all", "last", "none"):
        raise ValueError(f"bad logit_rows {logit_rows!r}")
    logits: list[np.ndarray | None] = []
    keys: list[np.ndarray] = []
    values: list[np.ndarray] = []
    for group in groups:
        lo, k, v = _forward_group(weights, cache, group, rotation, logit_rows)
        logits.append(lo)
        keys.append(k)
        values.append(v)
    return StepResult(logits=logits, keys=keys, values=values)


def _forward_group(weights: WeightSet, cache: GlobalKvCache, group: BatchGroup,
                   rotation: RotationTable, logit_rows: str):
    cfg = weights.config
    ids = np.asarray(group.token_ids, dtype=np.int64)
    pos = np.asarray(group.positions, dtype=np.int64)
    vis = np.asarray(group.visible_idx, dtype=np.int64)
    t_new, n_ctx = len(ids), len(vis)
    if t_new == 0:
        raise ShapeError("empty batch group")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError("token id outside vocab")
    if pos.min() < 0 or pos.max() >= cfg.context_window:
        raise WindowOverflowError("token position outside context window")

    n_heads, head_dim, d = cfg.n_heads, cfg.head_dim, cfg.model_dim
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    x = weights.embed[ids]
    out_keys = np.empty((cfg.n_layers, t_new, n_heads, head_dim), dtype=weights.dtype)
    out_values = np.empty_like(out_keys)
    # visible cached columns are fully attendable; the within-group block is causal
    mask = np.concatenate(
        [np.ones((t_new, n_ctx), dtype=bool), np.tril(np.ones((t_new, t_new), dtype=bool))],
        axis=1)

    for layer, lw in enumerate(weights.layers):
        h = rms_norm(x, lw.attn_norm, RMS_EPS)
        q = rotation.rotate_positions(matmul(h, lw.wq).reshape(t_new, n_heads, head_dim), pos)
        k = rotation.rotate_positions(matmul(h, lw.wk).reshape(t_new, n_heads, head_dim), pos)
        v = matmul(h, lw.wv).reshape(t_new, n_heads, head_dim)
        out_keys[layer] = k
        out_values[layer] = v
        k_ctx = cache.keys[layer][vis]
        v_ctx = cache.values[layer][vis]
        attn = np.empty((t_new, n_heads, head_dim), dtype=weights.dtype)
        for head in range(n_heads):
            k_full = np.concatenate([k_ctx[:, head], k[:, head]], axis=0)
            v_full = np.concatenate([v_ctx[:, head], v[:, head]], axis=0)
            scores = matmul(q[:, head], k_full.T) * inv_sqrt
            attn[:, head] = matmul(masked_softmax_rows(scores, mask), v_full)
        x = x + matmul(attn.reshape(t_new, d), lw.wo)
        hh = rms_norm(x, lw.ffn_norm, RMS_EPS)
        x = x + matmul(silu(matmul(hh, lw.w_gate)) * matmul(hh, lw.w_up), lw.w_down)

    if logit_rows == "none":
        return None, out_keys, out_values
    xn = rms_norm(x, weights.out_norm, RMS_EPS)
    rows = xn if logit_rows == "all" else xn[-1:]
    return matmul(rows, weights.out_head), out_keys, out_values


# -- analytic FLOP accounting --------------------------------------------------


@dataclass
class FlopTally:
    projections: int = 0
    attention: int = 0
    ffn: int = 0
    head: int = 0

    @property
    def total(self) -> int:
        return self.projections + self.attention + self.ffn + self.head

    def __iadd__(self, other: "FlopTally") -> "FlopTally":
        self.projections += other.projections
        self.attention += other.attention
        self.ffn += other.ffn
        self.head += other.head
        return self


def encode_flops(config: ModelConfig, t_new: int, ctx_cached: int,
                 logit_rows: str = "all") -> FlopTally:
    """Multiply-accumulate count of one forward group, mirroring the matmuls.

    ctx_cached is the number of visible cached tokens; the within-group block
    contributes t_new dense columns per query row (the implementation computes
    the full block and masks).
    """
    if t_new == 0:
        return FlopTally()
    d, f, v, layers = config.model_dim, config.ffn_dim, config.vocab_size, config.n_layers
    rows = {"all": t_new, "last": 1, "none": 0}[logit_rows]
    return FlopTally(
        projections=layers * 8 * t_new * d * d,
        attention=layers * 4 * t_new * d * (ctx_cached + t_new),
        ffn=layers * 6 * t_new * d * f,
        head=2 * rows * d * v,
    )


# -- weight file I/O -----------------------------------------------------------

WEIGHTS_MAGIC = "choreo-weights"


def save_weights(weights: WeightSet, path: str | Path) -> None:
    """One JSON header line (config + tensor manifest), then float32 LE blobs."""
    tensors = weights.named_tensors()
    header = {
        "format": WEIGHTS_MAGIC,
        "version": 1,
        "dtype": "float32",
        "config": weights.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str | Path, dtype=np.float64) -> WeightSet:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != WEIGHTS_MAGIC:
            raise ValueError(f"{path} is not a weight file")
        blob = fh.read()
    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(dtype)
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        arrays[spec["name"]] = arr.astype(dtype)
        off += n * 4
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")

    layers = [
        LayerWeights(**{name: arrays[f"layers.{i}.{name}"]
                        for name in ("attn_norm", "wq", "wk", "wv", "wo",
                                     "ffn_norm", "w_gate", "w_up", "w_down")})
        for i in range(config.n_layers)
    ]
    return WeightSet(config=config, embed=arrays["embed"], layers=layers,
                     out_norm=arrays["out_norm"], out_head=arrays["out_head"])
