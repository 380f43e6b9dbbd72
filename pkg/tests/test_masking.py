import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choreo.cache import GlobalKvCache
from choreo.engine import DecodeCall, Engine, PrefillCall, SamplingParams
from choreo.fixtures import DECODE_MASK, PREFILL_MASK
from choreo.masking import VisibilitySpec, build_dense_mask, visible, visible_cache_indices
from choreo.tokenizer import frame_message
from tests.conftest import SMALL_CONFIG


def test_spec_validation():
    from choreo.errors import InvalidCallError
    with pytest.raises(InvalidCallError):
        VisibilitySpec(3, (1, 1))
    with pytest.raises(InvalidCallError):
        VisibilitySpec(3, (3,))


def test_visible_parent_and_self_rules():
    spec = VisibilitySpec(5, (1, 2))
    assert visible(spec, query_j=0, key_m=1, key_j=99)  # parents: all tokens
    assert visible(spec, query_j=0, key_m=2, key_j=0)
    assert not visible(spec, query_j=0, key_m=3, key_j=0)  # non-parent
    assert visible(spec, query_j=4, key_m=5, key_j=4)  # self, same j
    assert visible(spec, query_j=4, key_m=5, key_j=3)
    assert not visible(spec, query_j=4, key_m=5, key_j=5)  # self, future


def test_visibility_is_not_transitive():
    # message 2 parents {1}, message 1 parents {0}: 2 cannot see 0
    spec = VisibilitySpec(2, (1,))
    assert visible(spec, 0, key_m=1, key_j=0)
    assert not visible(spec, 0, key_m=0, key_j=0)


def test_visibility_ignores_positions_across_messages():
    spec = VisibilitySpec(7, (1,))
    for qj in (0, 5, 100):
        for kj in (0, 50, 2000):
            assert visible(spec, qj, key_m=1, key_j=kj)
            assert not visible(spec, qj, key_m=2, key_j=kj)


def _random_cache_state(rng, n_messages):
    cfg = SMALL_CONFIG
    cache = GlobalKvCache(cfg, capacity=256)
    shape = (cfg.n_layers, 1, cfg.n_heads, cfg.head_dim)
    order = []
    for m in range(n_messages):
        cache.register_message(m, "prefilled", int(rng.integers(0, 20)))
        order.extend([m] * int(rng.integers(1, 5)))
    rng.shuffle(order)
    counts = {m: 0 for m in range(n_messages)}
    for m in order:
        off = cache.message_span(m).offset if counts[m] == 0 else None
        j = cache.message_span(m).offset + counts[m]
        cache.append_tokens(m, np.array([counts[m] % 256]), np.array([j]),
                            np.zeros(shape), np.zeros(shape))
        counts[m] += 1
    return cache


def test_visible_cache_indices_matches_brute_force_on_random_dags(rng):
    for trial in range(50):
        n_messages = int(rng.integers(1, 7))
        cache = _random_cache_state(rng, n_messages)
        new_id = n_messages
        parents = tuple(int(m) for m in rng.choice(n_messages,
                        size=int(rng.integers(0, n_messages + 1)), replace=False))
        spec = VisibilitySpec(new_id, parents)
        got = set(int(i) for i in visible_cache_indices(cache, spec))
        want = {i for i in range(cache.token_count)
                if visible(spec, 10 ** 6, int(cache.msg_ids[i]), int(cache.positions[i]))}
        assert got == want, (trial, parents)


def test_build_dense_mask_matches_pointwise(rng):
    for trial in range(20):
        n_messages = int(rng.integers(1, 5))
        cache = _random_cache_state(rng, n_messages)
        specs = {}
        batch = []
        for b in range(2):
            new_id = n_messages + b
            parents = tuple(int(m) for m in rng.choice(n_messages,
                            size=int(rng.integers(0, n_messages + 1)), replace=False))
            specs[new_id] = VisibilitySpec(new_id, parents)
            start = int(rng.integers(0, 10))
            batch.extend((new_id, start + t) for t in range(int(rng.integers(1, 4))))
        mask = build_dense_mask(batch, cache, specs)
        n_cache = cache.token_count
        for r, (qm, qj) in enumerate(batch):
            for c in range(n_cache):
                want = visible(specs[qm], qj, int(cache.msg_ids[c]),
                               int(cache.positions[c]))
                assert mask[r, c] == want
            for c, (km, kj) in enumerate(batch):
                want = qm == km and kj <= qj
                assert mask[r, n_cache + c] == want


# -- the two reference panels -------------------------------------------------------


def test_prefill_panel_mask(small_weights):
    engine = Engine(small_weights)
    parents = [engine.prefill(PrefillCall(t)) for t in ("a", "b", "c")]
    assert all(len(frame_message(t)) == 3 for t in ("a", "b", "c"))
    specs = {100: VisibilitySpec(100, (parents[0],)),
             101: VisibilitySpec(101, (parents[1], parents[2]))}
    batch = [(100, j) for j in range(3)] + [(101, j) for j in range(3)]
    mask = build_dense_mask(batch, engine.cache, specs)
    np.testing.assert_array_equal(mask.astype(int), np.array(PREFILL_MASK))


def test_decode_panel_mask():
    # state after the first sync step of a 3-way decode over empty-text
    # parents: each parent holds [BOS][EOS], each decode holds its BOS
    cfg = SMALL_CONFIG
    cache = GlobalKvCache(cfg, capacity=64)
    shape = (cfg.n_layers, 1, cfg.n_heads, cfg.head_dim)
    zero = np.zeros(shape)
    for m in range(3):
        cache.register_message(m, "prefilled", 0)
        for j in range(2):
            cache.append_tokens(m, np.array([0]), np.array([j]), zero, zero)
    for m in (3, 4, 5):
        cache.register_message(m, "decoded", 2)
    for m in (3, 4, 5):
        cache.append_tokens(m, np.array([0]), np.array([2]), zero, zero)
    specs = {m: VisibilitySpec(m, (m - 3,)) for m in (3, 4, 5)}
    batch = [(m, 3) for m in (3, 4, 5)]
    mask = build_dense_mask(batch, cache, specs)
    np.testing.assert_array_equal(mask.astype(int), np.array(DECODE_MASK))


def test_fixture_panels_match_files():
    import json
    from pathlib import Path
    root = Path(__file__).resolve().parent.parent / "fixtures" / "masks"
    pre = json.loads((root / "prefill_parallel.json").read_text())
    dec = json.loads((root / "decode_parallel.json").read_text())
    assert pre["mask"] == PREFILL_MASK
    assert dec["mask"] == DECODE_MASK


@settings(max_examples=50, deadline=None)
@given(qj=st.integers(0, 64), kj=st.integers(0, 64), km=st.integers(0, 5))
def test_parent_visibility_is_position_free(qj, kj, km):
    spec = VisibilitySpec(9, (0, 2, 4))
    want = km in (0, 2, 4)
    assert visible(spec, qj, km, kj) == want
