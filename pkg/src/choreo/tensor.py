"""Dense numerics for the toy transformer.

All matrix products in the engine go through `matmul` so tests can count the
multiply-accumulates actually executed and compare them to the analytic
formulas. The rotation table implements position encoding as per-pair plane
rotations of query/key vectors; rotating a stored key by a position delta is
the repositioning primitive, and rotations compose additively, so scores
depend only on relative positions.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import AllMaskedError, DeltaRangeError, ShapeError


class FlopCounter:
    """Tally of multiply-accumulate FLOPs observed inside matmul (2*m*k*n per call)."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0


_counters: list[FlopCounter] = []


@contextmanager
def count_matmul_flops():
    """Count FLOPs of every `matmul` executed in the body. Nestable."""
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product with shape checking and optional FLOP counting."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if _counters:
        flops = 2 * a.shape[0] * a.shape[1] * b.shape[1]
        for c in _counters:
            c.total += flops
    return a @ b


def softmax_masked(logits: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Softmax over the visible entries only; masked entries get weight 0."""
    logits = np.asarray(logits)
    visible = np.asarray(visible, dtype=bool)
    if logits.shape != visible.shape or logits.ndim != 1:
        raise ShapeError(f"logits {logits.shape} and visible {visible.shape} must be equal 1-D shapes")
    return masked_softmax_rows(logits[None, :], visible[None, :])[0]


def masked_softmax_rows(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax; every row must have at least one visible entry."""
    if scores.shape != mask.shape:
        raise ShapeError(f"scores {scores.shape} and mask {mask.shape} differ")
    if not mask.any(axis=-1).all():
        raise AllMaskedError("softmax row with no visible entries")
    neg = np.where(mask, scores, -np.inf)
    neg = neg - neg.max(axis=-1, keepdims=True)
    ex = np.exp(neg)
    ex[~mask] = 0.0
    return ex / ex.sum(axis=-1, keepdims=True)


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x / scale * weight


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


class RotationTable:
    """Precomputed per-pair sines/cosines for signed position deltas in [-W, W].

    Vector dims are paired (0,1), (2,3), ...; pair i rotates by
    delta * base**(-2i/d). Applying a position j to a fresh vector is a
    rotation by delta=j from position 0; moving a stored key from j to j'
    is a further rotation by j'-j.
    """

    def __init__(self, head_dim: int, max_delta: int, base: float = 10000.0,
                 dtype=np.float64) -> None:
        if head_dim % 2 != 0:
            raise ShapeError("head_dim must be even")
        self.head_dim = head_dim
        self.max_delta = int(max_delta)
        self.base = float(base)
        inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        deltas = np.arange(-self.max_delta, self.max_delta + 1, dtype=np.float64)
        angles = deltas[:, None] * inv_freq[None, :]
        self.cos = np.cos(angles).astype(dtype)
        self.sin = np.sin(angles).astype(dtype)

    def _check(self, delta: int) -> int:
        delta = int(delta)
        if abs(delta) > self.max_delta:
            raise DeltaRangeError(f"delta {delta} outside [-{self.max_delta}, {self.max_delta}]")
        return delta

    def rotate(self, vecs: np.ndarray, delta: int) -> np.ndarray:
        """Rotate vectors (..., head_dim) by one shared delta."""
        delta = self._check(delta)
        if vecs.shape[-1] != self.head_dim:
            raise ShapeError(f"last dim {vecs.shape[-1]} != head_dim {self.head_dim}")
        c = self.cos[delta + self.max_delta]
        s = self.sin[delta + self.max_delta]
        return self._apply(vecs, c, s)

    def rotate_positions(self, vecs: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Rotate row t of vecs (T, ..., head_dim) by positions[t] (from position 0)."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.min(initial=0) < -self.max_delta or positions.max(initial=0) > self.max_delta:
            raise DeltaRangeError("position outside rotation table")
        c = self.cos[positions + self.max_delta]
        s = self.sin[positions + self.max_delta]
        # broadcast (T, d/2) across any middle axes, e.g. heads
        extra = vecs.ndim - 2
        shape = (c.shape[0],) + (1,) * extra + (c.shape[1],)
        return self._apply(vecs, c.reshape(shape), s.reshape(shape))

    @staticmethod
    def _apply(vecs: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        even = vecs[..., 0::2]
        odd = vecs[..., 1::2]
        out = np.empty_like(vecs)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out


def rope_rotate(key: np.ndarray, delta: int, table: RotationTable) -> np.ndarray:
    """Move a stored key vector by a signed position delta."""
    return table.rotate(key, delta)


def apply_rope_query(query: np.ndarray, position: int, table: RotationTable) -> np.ndarray:
    """Encode a fresh query (or key) at a logical position."""
    if position < 0:
        raise DeltaRangeError("position must be >= 0")
    return table.rotate(query, position)
