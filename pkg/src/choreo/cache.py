"""Append-only global key/value store shared by every call on an engine.

Each cached token carries (message id m, logical position j) alongside its
per-layer K and V tensors. Physical order is append order and never changes;
logical positions are rewritten in place when a message is repositioned, by
rotating its stored keys by the position delta. Values are never touched on
reposition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import (
    CapacityError,
    ShapeError,
    UnknownMessageError,
    WindowOverflowError,
)
from .tensor import RotationTable


@dataclass
class MessageSpan:
    """Where one message lives: logical offset plus its physical cache rows."""

    message_id: int
    kind: str  # "prefilled" | "decoded"
    offset: int
    length: int
    physical: np.ndarray  # int64, append order == within-message token order
    token_ids: np.ndarray
    text: str
    header: str | None = None


@dataclass
class _Entry:
    kind: str
    offset: int
    text: str
    header: str | None
    physical: list[int] = field(default_factory=list)


class GlobalKvCache:
    """Preallocated token store: K/V per layer plus (m, j, token id) metadata."""

    def __init__(self, config: ModelConfig, capacity: int = 65536, dtype=np.float64) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.config = config
        self.capacity = int(capacity)
        self.dtype = np.dtype(dtype)
        shape = (config.n_layers, self.capacity, config.n_heads, config.head_dim)
        # zeros() maps lazily; untouched capacity costs no physical memory
        self.keys = np.zeros(shape, dtype=self.dtype)
        self.values = np.zeros(shape, dtype=self.dtype)
        self.token_ids = np.zeros(self.capacity, dtype=np.int64)
        self.msg_ids = np.full(self.capacity, -1, dtype=np.int64)
        self.positions = np.zeros(self.capacity, dtype=np.int64)
        self.token_count = 0
        self._messages: dict[int, _Entry] = {}

    # -- message registry ---------------------------------------------------

    def register_message(self, message_id: int, kind: str, offset: int,
                         text: str = "", header: str | None = None) -> None:
        if message_id in self._messages:
            raise ValueError(f"message {message_id} already registered")
        self._messages[message_id] = _Entry(kind=kind, offset=offset, text=text, header=header)

    def set_text(self, message_id: int, text: str) -> None:
        self._entry(message_id).text = text

    def _entry(self, message_id: int) -> _Entry:
        try:
            return self._messages[message_id]
        except KeyError:
            raise UnknownMessageError(f"unknown message id {message_id}") from None

    def __contains__(self, message_id: int) -> bool:
        return message_id in self._messages

    def message_ids(self) -> list[int]:
        return list(self._messages)

    def message_length(self, message_id: int) -> int:
        return len(self._entry(message_id).physical)

    # -- appends ------------------------------------------------------------

    def append_tokens(self, message_id: int, token_ids: np.ndarray, positions: np.ndarray,
                      keys: np.ndarray, values: np.ndarray) -> range:
        """Append one message's tokens; keys/values are (L, T, H, D), post-rotation.

        Tokens must continue the message: consecutive j values in token order.
        Returns the physical index range they landed in.
        """
        entry = self._entry(message_id)
        token_ids = np.asarray(token_ids, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        n = len(token_ids)
        cfg = self.config
        if keys.shape != (cfg.n_layers, n, cfg.n_heads, cfg.head_dim) or values.shape != keys.shape:
            raise ShapeError(f"bad K/V shape {keys.shape} for {n} tokens")
        if n == 0:
            return range(self.token_count, self.token_count)
        if self.token_count + n > self.capacity:
            raise CapacityError(
                f"append of {n} tokens exceeds capacity {self.capacity} "
                f"(token_count {self.token_count})")
        if positions.min() < 0 or positions.max() >= cfg.context_window:
            raise WindowOverflowError(
                f"position outside context window [0, {cfg.context_window})")
        expected_start = (entry.offset if not entry.physical
                          else self.positions[entry.physical[-1]] + 1)
        if not np.array_equal(positions, np.arange(expected_start, expected_start + n)):
            raise ValueError(f"message {message_id} tokens must continue at j={expected_start}")

        lo = self.token_count
        hi = lo + n
        self.keys[:, lo:hi] = keys
        self.values[:, lo:hi] = values
        self.token_ids[lo:hi] = token_ids
        self.msg_ids[lo:hi] = message_id
        self.positions[lo:hi] = positions
        entry.physical.extend(range(lo, hi))
        self.token_count = hi
        return range(lo, hi)

    # -- repositioning ------------------------------------------------------

    def reposition_message(self, message_id: int, new_offset: int, table: RotationTable) -> int:
        """Destructively move a message: rotate its keys by the delta, rewrite j.

        Zero delta leaves the cache bitwise unchanged. Returns the delta applied.
        """
        entry = self._entry(message_id)
        new_offset = int(new_offset)
        if new_offset < 0:
            raise ValueError("offset must be >= 0")
        if new_offset + len(entry.physical) > self.config.context_window:
            raise WindowOverflowError(
                f"message {message_id} (len {len(entry.physical)}) does not fit at {new_offset}")
        delta = new_offset - entry.offset
        if delta == 0:
            return 0
        idx = np.asarray(entry.physical, dtype=np.int64)
        if len(idx):
            for layer in range(self.config.n_layers):
                self.keys[layer, idx] = table.rotate(self.keys[layer, idx], delta)
            self.positions[idx] += delta
        entry.offset = new_offset
        return delta

    # -- queries ------------------------------------------------------------

    def message_span(self, message_id: int) -> MessageSpan:
        entry = self._entry(message_id)
        idx = np.asarray(entry.physical, dtype=np.int64)
        return MessageSpan(
            message_id=message_id,
            kind=entry.kind,
            offset=entry.offset,
            length=len(idx),
            physical=idx,
            token_ids=self.token_ids[idx].copy(),
            text=entry.text,
            header=entry.header,
        )

    def dump_jsonl(self, path: str | Path) -> None:
        """One line per cached token: {physical_index, m, j, token_id}."""
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(self.token_count):
                fh.write(json.dumps({
                    "physical_index": i,
                    "m": int(self.msg_ids[i]),
                    "j": int(self.positions[i]),
                    "token_id": int(self.token_ids[i]),
                }) + "\n")

    def clone(self) -> "GlobalKvCache":
        """Deep copy of the occupied prefix (fresh zero pages beyond it)."""
        other = GlobalKvCache(self.config, self.capacity, self.dtype)
        n = self.token_count
        other.keys[:, :n] = self.keys[:, :n]
        other.values[:, :n] = self.values[:, :n]
        other.token_ids[:n] = self.token_ids[:n]
        other.msg_ids[:n] = self.msg_ids[:n]
        other.positions[:n] = self.positions[:n]
        other.token_count = n
        other._messages = {
            m: _Entry(kind=e.kind, offset=e.offset, text=e.text, header=e.header,
                      physical=list(e.physical))
            for m, e in self._messages.items()
        }
        return other
