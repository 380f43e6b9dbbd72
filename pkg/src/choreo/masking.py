"""Visibility rules for dynamic attention masks.

A query token in message m sees a key token iff the key's message is one of
m's parents (all of the parent's tokens, regardless of position), or the key
belongs to m itself and does not come after the query in within-message token
order. Visibility is not transitive: parents of parents are invisible unless
listed. It depends only on message ids and within-message order, never on
physical cache order; within one message, logical positions are consecutive
in token order, so comparing j values is exactly the order comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import GlobalKvCache
from .errors import InvalidCallError


@dataclass(frozen=True)
class VisibilitySpec:
    """Per-message attention rule: the message id plus its parent ids."""

    message_id: int
    parents: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(set(self.parents)) != len(self.parents):
            raise InvalidCallError(f"duplicate parents in {self.parents}")
        if self.message_id in self.parents:
            raise InvalidCallError("a message cannot be its own parent")


def visible(spec: VisibilitySpec, query_j: int, key_m: int, key_j: int) -> bool:
    """May a query of spec.message_id at logical position query_j see this key?"""
    if key_m in spec.parents:
        return True
    return key_m == spec.message_id and key_j <= query_j


def visible_cache_indices(cache: GlobalKvCache, spec: VisibilitySpec) -> np.ndarray:
    """Physical indices (ascending) of cached tokens visible to new tokens of spec.

    Cached tokens of spec.message_id always precede any new token of the same
    message in token order, so they are all visible.
    """
    m = cache.msg_ids[:cache.token_count]
    mask = m == spec.message_id
    if spec.parents:
        mask = mask | np.isin(m, np.asarray(spec.parents, dtype=np.int64))
    return np.nonzero(mask)[0]


def build_dense_mask(batch: list[tuple[int, int]], cache: GlobalKvCache,
                     specs: dict[int, VisibilitySpec]) -> np.ndarray:
    """Dense boolean mask: rows are new tokens, columns are cache then batch tokens.

    batch lists the new tokens as (message_id, j) in encode order; specs maps
    each batch message id to its VisibilitySpec. Column layout is the cache's
    physical order followed by the batch tokens in batch order.
    """
    n_cache = cache.token_count
    n_new = len(batch)
    out = np.zeros((n_new, n_cache + n_new), dtype=bool)
    cache_m = cache.msg_ids[:n_cache]
    cache_j = cache.positions[:n_cache]
    for row, (q_m, q_j) in enumerate(batch):
        spec = specs[q_m]
        vis = cache_m == q_m
        if spec.parents:
            vis = vis | np.isin(cache_m, np.asarray(spec.parents, dtype=np.int64))
        vis = vis & ((cache_m != q_m) | (cache_j <= q_j))
        out[row, :n_cache] = vis
        for col, (k_m, k_j) in enumerate(batch):
            # batch peers are never parents (ids are allocated after the batch
            # is validated), so only same-message causal visibility applies
            out[row, n_cache + col] = k_m == q_m and k_j <= q_j
    return out
