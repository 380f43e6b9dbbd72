"""Naive reference engine: re-encode everything, reuse nothing but exact prefixes.

`prefill` just records text and returns a fresh id; no model work happens
until a decode. `decode` rebuilds its prompt by concatenating the framed
token sequences of its parents in list order at consecutive positions
starting from 0 (offsets and new_offset are accepted and ignored), re-encodes
the prompt, feeds the header, and generates with the same sampling and
stopping rules as the choreography engine.

An exact-token prefix cache (a trie storing per-token K/V) makes repeat
prompts cheaper without changing any output: a cached prefix is spliced in
and only the tail is re-encoded. The trie lives for the engine's lifetime;
use one engine per workflow to compare like with like.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache import GlobalKvCache
from .config import EOS_MSG, ModelConfig
from .engine import CallStats, DecodeCall, PrefillCall, SamplingParams
from .errors import (
    EmptyHeaderError,
    InvalidCallError,
    UnknownMessageError,
    WindowOverflowError,
)
from .model import BatchGroup, WeightSet, encode_flops, forward_step
from .tensor import RotationTable
from .tokenizer import (
    decode_tokens,
    encode_text,
    frame_header,
    frame_message,
    generatable_mask,
)


@dataclass
class TextMessage:
    """Baseline message record: text only, plus its framed token rendering."""

    message_id: int
    kind: str  # "prefilled" | "decoded"
    text: str
    tokens: list[int]
    header: str | None = None


class _TrieNode:
    __slots__ = ("children", "k", "v")

    def __init__(self) -> None:
        self.children: dict[int, "_TrieNode"] = {}
        self.k: np.ndarray | None = None  # (L, H, D)
        self.v: np.ndarray | None = None


class PrefixTrie:
    """Exact-token prefix store of per-token K/V stacks."""

    def __init__(self) -> None:
        self.root = _TrieNode()

    def lookup(self, tokens: Sequence[int]) -> int:
        """Length of the longest stored prefix of tokens."""
        node = self.root
        n = 0
        for t in tokens:
            nxt = node.children.get(int(t))
            if nxt is None or nxt.k is None:
                break
            node = nxt
            n += 1
        return n

    def gather(self, tokens: Sequence[int], n: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (L, n, H, D) keys and values for a prefix of length n."""
        ks, vs = [], []
        node = self.root
        for t in tokens[:n]:
            node = node.children[int(t)]
            ks.append(node.k)
            vs.append(node.v)
        keys = np.stack(ks, axis=1) if ks else None
        values = np.stack(vs, axis=1) if vs else None
        return keys, values

    def insert(self, tokens: Sequence[int], keys: np.ndarray, values: np.ndarray) -> None:
        """Store K/V along the token path; existing nodes keep their arrays."""
        node = self.root
        for i, t in enumerate(tokens):
            node = node.children.setdefault(int(t), _TrieNode())
            if node.k is None:
                node.k = np.array(keys[:, i], copy=True)
                node.v = np.array(values[:, i], copy=True)


class BaselineEngine:
    """Re-encoding reference with the same call surface as the choreography engine."""

    kind = "baseline"

    def __init__(self, weights: WeightSet, *, seed: int = 0, prefix_cache: bool = True,
                 record_logits: bool = False) -> None:
        self.weights = weights
        self.config: ModelConfig = weights.config
        self.seed = int(seed)
        self.prefix_cache = prefix_cache
        self.record_logits = record_logits
        self.rotation = RotationTable(self.config.head_dim, self.config.context_window,
                                      self.config.rope_base, dtype=weights.dtype)
        self._generatable = generatable_mask(self.config.vocab_size)
        self.trie = PrefixTrie()
        self.messages: dict[int, TextMessage] = {}
        self._next_id = 0
        self.stats: list[CallStats] = []

    # -- public API ------------------------------------------------------------

    def prefill(self, call: PrefillCall) -> int:
        return self._prefill_one(call, op="prefill")

    def prefill_parallel(self, calls: Sequence[PrefillCall]) -> list[int]:
        t0 = time.perf_counter()
        ids = []
        for call in calls:
            msg_id = self._alloc_id()
            self.messages[msg_id] = TextMessage(msg_id, "prefilled", call.message,
                                                frame_message(call.message))
            ids.append(msg_id)
        self.stats.append(CallStats(op="prefill_parallel", ids=ids,
                                    wall=time.perf_counter() - t0))
        return ids

    def decode(self, call: DecodeCall, force_tokens: Sequence[int] | str | None = None) -> int:
        t0 = time.perf_counter()
        stats = CallStats(op="decode", ids=[], logits={} if self.record_logits else None)
        msg_id = self._decode_one(call, force_tokens, stats, t0)
        stats.ids = [msg_id]
        stats.wall = time.perf_counter() - t0
        self.stats.append(stats)
        return msg_id

    def decode_parallel(self, calls: Sequence[DecodeCall],
                        force_tokens: Sequence[Sequence[int] | str | None] | None = None,
                        ) -> list[int]:
        """Naively sequential: each call decoded independently in list order."""
        t0 = time.perf_counter()
        forces = list(force_tokens) if force_tokens is not None else [None] * len(calls)
        if len(forces) != len(calls):
            raise InvalidCallError("force_tokens length must match calls")
        for call in calls:
            if not call.header:
                raise EmptyHeaderError("decode header must be non-empty")
            for p in call.parents:
                if int(p) not in self.messages:
                    raise UnknownMessageError(f"unknown parent id {p}")
        stats = CallStats(op="decode_parallel", ids=[],
                          logits={} if self.record_logits else None)
        ids = [self._decode_one(call, force, stats, t0) for call, force in zip(calls, forces)]
        stats.ids = ids
        stats.wall = time.perf_counter() - t0
        self.stats.append(stats)
        return ids

    def message_text(self, message_id: int) -> str:
        return self._message(message_id).text

    def message_token_count(self, message_id: int) -> int:
        return len(self._message(message_id).tokens)

    def generated_token_ids(self, message_id: int) -> list[int]:
        msg = self._message(message_id)
        if msg.kind != "decoded":
            raise InvalidCallError(f"message {message_id} was not decoded")
        return msg.tokens[len(frame_header(msg.header)):]

    @property
    def last_stats(self) -> CallStats:
        return self.stats[-1]

    # -- internals ----------------------------------------------------------------

    def _message(self, message_id: int) -> TextMessage:
        try:
            return self.messages[message_id]
        except KeyError:
            raise UnknownMessageError(f"unknown message id {message_id}") from None

    def _alloc_id(self) -> int:
        msg_id = self._next_id
        self._next_id += 1
        return msg_id

    def _prefill_one(self, call: PrefillCall, op: str) -> int:
        t0 = time.perf_counter()
        msg_id = self._alloc_id()
        self.messages[msg_id] = TextMessage(msg_id, "prefilled", call.message,
                                            frame_message(call.message))
        self.stats.append(CallStats(op=op, ids=[msg_id], wall=time.perf_counter() - t0))
        return msg_id

    def _decode_one(self, call: DecodeCall, force: Sequence[int] | str | None,
                    stats: CallStats, t0: float) -> int:
        if not call.header:
            raise EmptyHeaderError("decode header must be non-empty")
        prompt: list[int] = []
        for p in call.parents:
            prompt.extend(self._message(int(p)).tokens)
        header_ids = frame_header(call.header)
        known = prompt + header_ids
        window = self.config.context_window
        if len(known) > window:
            raise WindowOverflowError(
                f"prompt+header of {len(known)} tokens exceeds window {window}")

        msg_id = self._alloc_id()
        if self.record_logits:
            stats.logits[msg_id] = []
        forced = list(encode_text(force)) if isinstance(force, str) else (
            None if force is None else [int(t) for t in force])

        # working cache for this one decode; message 0 is the linear sequence
        work = GlobalKvCache(self.config, capacity=window, dtype=self.weights.dtype)
        work.register_message(0, "prompt", 0)
        match = 0
        if self.prefix_cache:
            match = min(self.trie.lookup(known), len(known) - 1)
            if match:
                mk, mv = self.trie.gather(known, match)
                work.append_tokens(0, np.asarray(known[:match], dtype=np.int64),
                                   np.arange(match, dtype=np.int64), mk, mv)
        stats.cache_hit_tokens += match

        def encode(tokens: list[int], logit_rows: str) -> np.ndarray | None:
            start = work.token_count
            group = BatchGroup(
                message_id=0,
                token_ids=np.asarray(tokens, dtype=np.int64),
                positions=np.arange(start, start + len(tokens), dtype=np.int64),
                visible_idx=np.arange(start, dtype=np.int64),
            )
            result = forward_step(self.weights, work, [group], self.rotation,
                                  logit_rows=logit_rows)
            work.append_tokens(0, group.token_ids, group.positions,
                               result.keys[0], result.values[0])
            return result.logits[0]

        # prompt tail not covered by the prefix cache: old content, prefill bucket
        if match < len(prompt):
            tail = prompt[match:]
            stats.prefill_flops += encode_flops(self.config, len(tail), match, "none").total
            stats.tokens_encoded += len(tail)
            encode(tail, "none")
        # header tail: new content, decode bucket
        header_tail = known[max(match, len(prompt)):]
        stats.decode_flops += encode_flops(self.config, len(header_tail),
                                           work.token_count, "last").total
        stats.tokens_encoded += len(header_tail)
        logits = encode(header_tail, "last")[-1]

        generated: list[int] = []
        sel_index = 0
        max_tokens = call.sampling.max_tokens
        while True:
            if stats.logits is not None:
                stats.logits[msg_id].append(np.array(logits, copy=True))
            if sel_index == 0:
                stats.ttft[msg_id] = time.perf_counter() - t0
            if forced is not None:
                token = forced[sel_index] if sel_index < len(forced) else None
            elif call.sampling.mode == "greedy":
                token = int(np.argmax(np.where(self._generatable, logits, -np.inf)))
            else:
                token = self._sample_nucleus(logits, call.sampling, msg_id, sel_index)
            sel_index += 1
            if token is None or token == EOS_MSG:
                break
            if len(generated) >= max_tokens or work.token_count >= window:
                break
            stats.decode_flops += encode_flops(self.config, 1, work.token_count, "all").total
            stats.tokens_encoded += 1
            block = encode([token], "all")
            generated.append(token)
            if len(generated) >= max_tokens:
                break
            logits = block[-1]

        n = work.token_count
        if self.prefix_cache:
            self.trie.insert(list(work.token_ids[:n]), work.keys[:, :n], work.values[:, :n])
        text = call.header + decode_tokens(generated)
        self.messages[msg_id] = TextMessage(msg_id, "decoded", text,
                                            header_ids + generated, header=call.header)
        return msg_id

    def _sample_nucleus(self, logits: np.ndarray, params: SamplingParams,
                        msg_id: int, sel_index: int) -> int:
        z = np.where(self._generatable, logits / params.temperature, -np.inf)
        z = z - z.max()
        probs = np.exp(z)
        probs /= probs.sum()
        order = np.lexsort((np.arange(len(probs)), -probs))
        csum = np.cumsum(probs[order])
        cut = min(int(np.searchsorted(csum, params.top_p, side="left")), len(order) - 1)
        kept = order[:cut + 1]
        kcs = np.cumsum(probs[kept] / probs[kept].sum())
        key = np.array([np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF),
                        np.uint64(params.seed & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
        counter = np.array([sel_index, msg_id, 0, 0], dtype=np.uint64)
        u = np.random.Generator(np.random.Philox(counter=counter, key=key)).random()
        return int(kept[min(int(np.searchsorted(kcs, u, side="right")), len(kept) - 1)])
