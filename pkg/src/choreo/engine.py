"""Message-level cache choreography engine.

Every call appends one or more messages to a shared append-only KV cache and
returns fresh message ids. `prefill` encodes known text in one batched step;
`decode` force-feeds a non-empty header and then generates autoregressively,
seeding the first free token from the top-layer encoding of the last header
token. Parent lists control what each new message may attend to (all of a
parent's tokens; never parents-of-parents), and per-parent offsets reposition
cached messages destructively by rotating their stored keys.

Parallel forms batch several calls against the same cache snapshot. Parallel
decodes of two or more messages run step-synchronously, one token per active
message per step, so their tokens interleave physically; a message drops out
of the batch early when it samples EOS or hits its token limit, and the rest
continue. Calls in one batch may share parents only at identical offsets and
may not reference each other.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cache import GlobalKvCache
from .config import EOS_MSG, ModelConfig
from .errors import (
    CapacityError,
    EmptyHeaderError,
    InvalidCallError,
    OffsetConflictError,
    UnknownMessageError,
    WindowOverflowError,
)
from .masking import VisibilitySpec, visible_cache_indices
from .model import BatchGroup, WeightSet, encode_flops, forward_step
from .tensor import RotationTable
from .tokenizer import decode_tokens, encode_text, frame_header, frame_message, generatable_mask

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class SamplingParams:
    """How decode picks tokens. Greedy ignores temperature/top_p/seed.

    Temperature mode draws from the nucleus (smallest prefix of the
    probability-sorted vocab reaching top_p) using a counter-based stream
    keyed by (engine seed, this seed, message id, selection index), so a
    message draws the same randomness decoded alone or inside a batch.
    """

    mode: str = "greedy"  # "greedy" | "temperature"
    temperature: float = 0.7
    top_p: float = 0.95
    seed: int = 0
    max_tokens: int = 64

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "temperature"):
            raise InvalidCallError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "temperature" and self.temperature <= 0:
            raise InvalidCallError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise InvalidCallError("top_p must be in (0, 1]")
        if self.max_tokens < 0:
            raise InvalidCallError("max_tokens must be >= 0")


@dataclass(frozen=True)
class PrefillCall:
    """Encode known text as one new message attending to `parents`."""

    message: str
    parents: Sequence[int] = ()
    offsets: Sequence[int | None] | None = None
    new_offset: int | None = None


@dataclass(frozen=True)
class DecodeCall:
    """Generate one new message, starting from a forced non-empty header."""

    header: str
    parents: Sequence[int] = ()
    offsets: Sequence[int | None] | None = None
    new_offset: int | None = None
    sampling: SamplingParams = field(default_factory=SamplingParams)


@dataclass
class CallStats:
    """Per-call instrumentation appended to engine.stats."""

    op: str
    ids: list[int]
    prefill_flops: int = 0
    decode_flops: int = 0
    tokens_encoded: int = 0
    cache_hit_tokens: int = 0
    repositioned_tokens: int = 0
    ttft: dict[int, float] = field(default_factory=dict)
    wall: float = 0.0
    logits: dict[int, list[np.ndarray]] | None = None


class _DecodeState:
    """Mutable per-message progress inside one decode batch."""

    __slots__ = ("msg_id", "call", "header_ids", "new_off", "fed", "appended",
                 "generated", "forced", "vis", "pending", "finishing",
                 "last_logits", "sel_index")

    def __init__(self, msg_id: int, call: DecodeCall, header_ids: list[int],
                 new_off: int, forced: list[int] | None, vis: np.ndarray) -> None:
        self.msg_id = msg_id
        self.call = call
        self.header_ids = header_ids
        self.new_off = new_off
        self.fed = 0  # header tokens handed out for encoding
        self.appended = 0  # tokens of this message in the cache
        self.generated: list[int] = []
        self.forced = forced
        self.vis = vis
        self.pending: int | None = None  # token to encode next step
        self.finishing = False  # encode pending, then stop without selecting
        self.last_logits: np.ndarray | None = None
        self.sel_index = 0


class Engine:
    """Cache-choreography engine bound to one weight set and one global cache."""

    kind = "choreo"

    def __init__(self, weights: WeightSet, *, capacity: int = 65536, seed: int = 0,
                 record_logits: bool = False) -> None:
        self.weights = weights
        self.config: ModelConfig = weights.config
        self.seed = int(seed)
        self.record_logits = record_logits
        self.cache = GlobalKvCache(self.config, capacity=capacity, dtype=weights.dtype)
        self.rotation = RotationTable(self.config.head_dim, self.config.context_window,
                                      self.config.rope_base, dtype=weights.dtype)
        self._generatable = generatable_mask(self.config.vocab_size)
        self._next_id = 0
        self.stats: list[CallStats] = []

    # -- public API -----------------------------------------------------------

    def prefill(self, call: PrefillCall) -> int:
        return self._prefill_batch([call], op="prefill")[0]

    def prefill_parallel(self, calls: Sequence[PrefillCall]) -> list[int]:
        return self._prefill_batch(list(calls), op="prefill_parallel")

    def decode(self, call: DecodeCall, force_tokens: Sequence[int] | str | None = None) -> int:
        return self._decode_batch([call], [force_tokens], op="decode")[0]

    def decode_parallel(self, calls: Sequence[DecodeCall],
                        force_tokens: Sequence[Sequence[int] | str | None] | None = None,
                        ) -> list[int]:
        forces = list(force_tokens) if force_tokens is not None else [None] * len(calls)
        if len(forces) != len(calls):
            raise InvalidCallError("force_tokens length must match calls")
        return self._decode_batch(list(calls), forces, op="decode_parallel")

    def message_text(self, message_id: int) -> str:
        """Message content without framing: the prefilled text, or header + generation."""
        return self.cache.message_span(message_id).text

    def message_token_count(self, message_id: int) -> int:
        return self.cache.message_length(message_id)

    def generated_token_ids(self, message_id: int) -> list[int]:
        span = self.cache.message_span(message_id)
        if span.kind != "decoded":
            raise InvalidCallError(f"message {message_id} was not decoded")
        return [int(t) for t in span.token_ids[len(frame_header(span.header)):]]

    def clone(self) -> "Engine":
        """Independent engine continuing from this cache state (weights shared)."""
        other = Engine.__new__(Engine)
        other.weights = self.weights
        other.config = self.config
        other.seed = self.seed
        other.record_logits = self.record_logits
        other.cache = self.cache.clone()
        other.rotation = self.rotation
        other._generatable = self._generatable
        other._next_id = self._next_id
        other.stats = []
        return other

    @property
    def last_stats(self) -> CallStats:
        return self.stats[-1]

    # -- call validation and layout ---------------------------------------------

    def _resolve_calls(self, calls, new_lens: list[int]):
        """Validate parents/offsets for a batch; returns (agreed offsets, per-call layout).

        Omitted offsets default to right after the preceding parent (first
        parent to 0); omitted new_offset to right after the last parent. All
        checks happen before any cache mutation.
        """
        window = self.config.context_window
        agreed: dict[int, int] = {}
        layouts: list[tuple[list[int], int]] = []
        for call, new_len in zip(calls, new_lens):
            parents = [int(p) for p in call.parents]
            if len(set(parents)) != len(parents):
                raise InvalidCallError(f"duplicate parents {parents}")
            for p in parents:
                if p not in self.cache:
                    raise UnknownMessageError(f"unknown parent id {p}")
            offsets = list(call.offsets) if call.offsets is not None else [None] * len(parents)
            if len(offsets) != len(parents):
                raise InvalidCallError(
                    f"offsets length {len(offsets)} != parents length {len(parents)}")
            prev_end = 0
            for p, off in zip(parents, offsets):
                o = prev_end if off is None else int(off)
                if o < 0:
                    raise InvalidCallError(f"negative offset {o} for parent {p}")
                plen = self.cache.message_length(p)
                if o + plen > window:
                    raise WindowOverflowError(
                        f"parent {p} (len {plen}) does not fit at offset {o}")
                if p in agreed and agreed[p] != o:
                    raise OffsetConflictError(
                        f"parent {p} placed at both {agreed[p]} and {o} in one batch")
                agreed[p] = o
                prev_end = o + plen
            new_off = int(call.new_offset) if call.new_offset is not None else prev_end
            if new_off < 0:
                raise InvalidCallError(f"negative new_offset {new_off}")
            if new_off + new_len > window:
                raise WindowOverflowError(
                    f"new message (len {new_len}) does not fit at offset {new_off}")
            layouts.append((parents, new_off))
        return agreed, layouts

    def _reposition(self, agreed: dict[int, int]) -> int:
        moved = 0
        for p, o in agreed.items():
            if self.cache.reposition_message(p, o, self.rotation) != 0:
                moved += self.cache.message_length(p)
        return moved

    def _check_capacity(self, n_tokens: int) -> None:
        if self.cache.token_count + n_tokens > self.cache.capacity:
            raise CapacityError(
                f"{n_tokens} new tokens exceed capacity {self.cache.capacity} "
                f"(token_count {self.cache.token_count})")

    # -- prefill ------------------------------------------------------------------

    def _prefill_batch(self, calls: list[PrefillCall], op: str) -> list[int]:
        t0 = time.perf_counter()
        if not calls:
            return []
        framed = [frame_message(c.message) for c in calls]
        agreed, layouts = self._resolve_calls(calls, [len(f) for f in framed])
        self._check_capacity(sum(len(f) for f in framed))

        stats = CallStats(op=op, ids=[])
        stats.repositioned_tokens = self._reposition(agreed)
        ids = [self._alloc_id() for _ in calls]
        stats.ids = ids
        groups = []
        for msg_id, call, tokens, (parents, new_off) in zip(ids, calls, framed, layouts):
            self.cache.register_message(msg_id, "prefilled", new_off, text=call.message)
            vis = visible_cache_indices(self.cache, VisibilitySpec(msg_id, tuple(parents)))
            groups.append(BatchGroup(
                message_id=msg_id,
                token_ids=np.asarray(tokens, dtype=np.int64),
                positions=np.arange(new_off, new_off + len(tokens), dtype=np.int64),
                visible_idx=vis,
            ))
            stats.prefill_flops += encode_flops(self.config, len(tokens), len(vis), "none").total
            stats.cache_hit_tokens += len(vis)

        result = forward_step(self.weights, self.cache, groups, self.rotation, logit_rows="none")
        for group, keys, values in zip(groups, result.keys, result.values):
            self.cache.append_tokens(group.message_id, group.token_ids, group.positions,
                                     keys, values)
            stats.tokens_encoded += len(group.token_ids)
        stats.wall = time.perf_counter() - t0
        self.stats.append(stats)
        return ids

    # -- decode ---------------------------------------------------------------------

    def _decode_batch(self, calls: list[DecodeCall], forces: list, op: str) -> list[int]:
        t0 = time.perf_counter()
        if not calls:
            return []
        for call in calls:
            if not call.header:
                raise EmptyHeaderError("decode header must be non-empty")
        headers = [frame_header(c.header) for c in calls]
        agreed, layouts = self._resolve_calls(calls, [len(h) for h in headers])
        self._check_capacity(sum(len(h) for h in headers))

        stats = CallStats(op=op, ids=[], logits={} if self.record_logits else None)
        stats.repositioned_tokens = self._reposition(agreed)
        ids = [self._alloc_id() for _ in calls]
        stats.ids = ids
        states = []
        for msg_id, call, header_ids, force, (parents, new_off) in zip(
                ids, calls, headers, forces, layouts):
            self.cache.register_message(msg_id, "decoded", new_off, header=call.header)
            vis = visible_cache_indices(self.cache, VisibilitySpec(msg_id, tuple(parents)))
            forced = list(encode_text(force)) if isinstance(force, str) else (
                None if force is None else [int(t) for t in force])
            states.append(_DecodeState(msg_id, call, header_ids, new_off, forced, vis))
            stats.cache_hit_tokens += len(vis)
            if self.record_logits:
                stats.logits[msg_id] = []

        if len(states) == 1:
            self._decode_single(states[0], stats, t0)
        else:
            self._decode_sync(states, stats, t0)

        for st in states:
            self.cache.set_text(st.msg_id, st.call.header + decode_tokens(st.generated))
        stats.wall = time.perf_counter() - t0
        self.stats.append(stats)
        return ids

    def _encode(self, state: _DecodeState, token_ids: list[int], stats: CallStats,
                logit_rows: str) -> np.ndarray | None:
        """Forward + append this message's next tokens; returns the logits block."""
        start = state.new_off + state.appended
        positions = np.arange(start, start + len(token_ids), dtype=np.int64)
        group = BatchGroup(
            message_id=state.msg_id,
            token_ids=np.asarray(token_ids, dtype=np.int64),
            positions=positions,
            visible_idx=state.vis,
        )
        result = forward_step(self.weights, self.cache, [group], self.rotation,
                              logit_rows=logit_rows)
        appended = self.cache.append_tokens(state.msg_id, group.token_ids, positions,
                                            result.keys[0], result.values[0])
        state.vis = np.concatenate([state.vis, np.arange(appended.start, appended.stop,
                                                         dtype=np.int64)])
        state.appended += len(token_ids)
        stats.decode_flops += encode_flops(self.config, len(token_ids),
                                           len(state.vis) - len(token_ids), logit_rows).total
        stats.tokens_encoded += len(token_ids)
        return result.logits[0]

    def _select(self, state: _DecodeState, stats: CallStats, t0: float) -> int | None:
        """One sampling decision; None means a forced list ran out (treated as EOS)."""
        if stats.logits is not None:
            stats.logits[state.msg_id].append(np.array(state.last_logits, copy=True))
        if state.sel_index == 0:
            stats.ttft[state.msg_id] = time.perf_counter() - t0
        sel = state.sel_index
        state.sel_index += 1
        if state.forced is not None:
            return state.forced[sel] if sel < len(state.forced) else None
        params = state.call.sampling
        if params.mode == "greedy":
            return int(np.argmax(np.where(self._generatable, state.last_logits, -np.inf)))
        return self._sample_nucleus(state.last_logits, params, state.msg_id, sel)

    def _sample_nucleus(self, logits: np.ndarray, params: SamplingParams,
                        msg_id: int, sel_index: int) -> int:
        z = np.where(self._generatable, logits / params.temperature, -np.inf)
        z = z - z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        order = np.lexsort((np.arange(len(probs)), -probs))  # prob desc, ties by id
        csum = np.cumsum(probs[order])
        cut = min(int(np.searchsorted(csum, params.top_p, side="left")), len(order) - 1)
        kept = order[:cut + 1]
        kcs = np.cumsum(probs[kept] / probs[kept].sum())
        u = self._stream_uniform(params.seed, msg_id, sel_index)
        return int(kept[min(int(np.searchsorted(kcs, u, side="right")), len(kept) - 1)])

    def _stream_uniform(self, sampling_seed: int, msg_id: int, sel_index: int) -> float:
        key = np.array([np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF),
                        np.uint64(sampling_seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
        counter = np.array([sel_index, msg_id, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=key)).random()

    def _may_accept(self, state: _DecodeState) -> bool:
        """May the just-selected token be placed? Window edge discards it."""
        if len(state.generated) >= state.call.sampling.max_tokens:
            return False
        next_pos = state.new_off + state.appended
        return next_pos < self.config.context_window

    def _decode_single(self, state: _DecodeState, stats: CallStats, t0: float) -> None:
        """Batched header encode, then one token per step."""
        state.last_logits = self._encode(state, state.header_ids, stats, "last")[-1]
        state.fed = len(state.header_ids)
        while True:
            token = self._select(state, stats, t0)
            if token is None or token == EOS_MSG or not self._may_accept(state):
                break
            logits = self._encode(state, [token], stats, "all")
            state.generated.append(token)
            if len(state.generated) >= state.call.sampling.max_tokens:
                break
            state.last_logits = logits[-1]

    def _decode_sync(self, states: list[_DecodeState], stats: CallStats, t0: float) -> None:
        """Step-synchronous interleaved decode, headers included.

        Each step encodes one pending token per active message (physically
        appended in call order) and then decides each message's next token:
        the next header token while any remain, otherwise a sampling decision.
        """
        for st in states:
            st.pending = st.header_ids[0]
            st.fed = 1
        while True:
            active = [st for st in states if st.pending is not None]
            if not active:
                return
            groups = [BatchGroup(
                message_id=st.msg_id,
                token_ids=np.asarray([st.pending], dtype=np.int64),
                positions=np.asarray([st.new_off + st.appended], dtype=np.int64),
                visible_idx=st.vis,
            ) for st in active]
            result = forward_step(self.weights, self.cache, groups, self.rotation,
                                  logit_rows="all")
            for st, group, keys, values, logits in zip(
                    active, groups, result.keys, result.values, result.logits):
                appended = self.cache.append_tokens(st.msg_id, group.token_ids,
                                                    group.positions, keys, values)
                st.vis = np.concatenate([st.vis, np.arange(appended.start, appended.stop,
                                                           dtype=np.int64)])
                st.appended += 1
                st.last_logits = logits[-1]
                stats.decode_flops += encode_flops(self.config, 1, len(st.vis) - 1, "all").total
                stats.tokens_encoded += 1

            for st in active:
                if st.finishing:
                    st.pending = None
                    continue
                if st.fed < len(st.header_ids):
                    st.pending = st.header_ids[st.fed]
                    st.fed += 1
                    continue
                token = self._select(st, stats, t0)
                if token is None or token == EOS_MSG or not self._may_accept(st):
                    st.pending = None
                    continue
                st.generated.append(token)
                st.pending = token
                if len(st.generated) >= st.call.sampling.max_tokens:
                    st.finishing = True

    def _alloc_id(self) -> int:
        msg_id = self._next_id
        self._next_id += 1
        return msg_id
