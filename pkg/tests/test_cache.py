import json

import numpy as np
import pytest

from choreo.cache import GlobalKvCache
from choreo.errors import CapacityError, UnknownMessageError, WindowOverflowError
from choreo.tensor import RotationTable
from tests.conftest import SMALL_CONFIG

L = SMALL_CONFIG.n_layers
H = SMALL_CONFIG.n_heads
D = SMALL_CONFIG.head_dim


def _cache(capacity=64):
    return GlobalKvCache(SMALL_CONFIG, capacity=capacity)


def _kv(rng, t):
    return (rng.standard_normal((L, t, H, D)), rng.standard_normal((L, t, H, D)))


def _append(cache, rng, msg_id, tokens, positions):
    k, v = _kv(rng, len(tokens))
    return cache.append_tokens(msg_id, np.asarray(tokens), np.asarray(positions), k, v), (k, v)


def test_append_records_metadata(rng):
    cache = _cache()
    cache.register_message(0, "prefilled", 3)
    rng_, _ = _append(cache, rng, 0, [7, 8, 9], [3, 4, 5])
    assert cache.token_count == 3
    span = cache.message_span(0)
    assert span.length == 3
    assert list(span.physical) == [0, 1, 2]
    assert list(cache.positions[:3]) == [3, 4, 5]
    assert list(cache.msg_ids[:3]) == [0, 0, 0]


def test_appends_must_continue_the_message(rng):
    cache = _cache()
    cache.register_message(0, "prefilled", 2)
    with pytest.raises(ValueError):
        _append(cache, rng, 0, [1], [5])  # must start at the offset
    _append(cache, rng, 0, [1, 2], [2, 3])
    with pytest.raises(ValueError):
        _append(cache, rng, 0, [3], [7])  # gap after j=3


def test_interleaved_appends_share_the_physical_tail(rng):
    # two messages decoded in step lockstep land alternating, then the
    # survivor runs out the tail alone
    cache = _cache()
    cache.register_message(1, "decoded", 0)
    cache.register_message(2, "decoded", 0)
    for step in range(3):
        _append(cache, rng, 1, [10 + step], [step])
        _append(cache, rng, 2, [20 + step], [step])
    for step in range(3, 5):
        _append(cache, rng, 2, [20 + step], [step])
    assert list(cache.msg_ids[:8]) == [1, 2, 1, 2, 1, 2, 2, 2]
    assert list(cache.message_span(1).physical) == [0, 2, 4]
    assert list(cache.message_span(2).physical) == [1, 3, 5, 6, 7]
    assert list(cache.positions[:8]) == [0, 0, 1, 1, 2, 2, 3, 4]


def test_unknown_message(rng):
    cache = _cache()
    with pytest.raises(UnknownMessageError):
        cache.message_span(3)
    with pytest.raises(UnknownMessageError):
        _append(cache, rng, 3, [1], [0])


def test_capacity_overflow(rng):
    cache = _cache(capacity=4)
    cache.register_message(0, "prefilled", 0)
    _append(cache, rng, 0, [1, 2, 3], [0, 1, 2])
    with pytest.raises(CapacityError):
        _append(cache, rng, 0, [4, 5], [3, 4])
    assert cache.token_count == 3


def test_window_overflow_on_append(rng):
    cache = _cache(capacity=1024)
    cache.register_message(0, "prefilled", SMALL_CONFIG.context_window - 1)
    with pytest.raises(WindowOverflowError):
        _append(cache, rng, 0, [1, 2],
                [SMALL_CONFIG.context_window - 1, SMALL_CONFIG.context_window])


def test_reposition_zero_delta_is_bitwise_noop(rng):
    cache = _cache()
    table = RotationTable(D, 64, 10000.0)
    cache.register_message(0, "prefilled", 4)
    _, (k, _) = _append(cache, rng, 0, [1, 2], [4, 5])
    before = cache.keys[:, :2].copy()
    assert cache.reposition_message(0, 4, table) == 0
    np.testing.assert_array_equal(cache.keys[:, :2], before)


def test_reposition_moves_positions_and_rotates_keys(rng):
    cache = _cache()
    table = RotationTable(D, 64, 10000.0)
    cache.register_message(0, "prefilled", 0)
    _, (k, v) = _append(cache, rng, 0, [1, 2, 3], [0, 1, 2])
    delta = cache.reposition_message(0, 10, table)
    assert delta == 10
    assert list(cache.positions[:3]) == [10, 11, 12]
    for layer in range(L):
        want = table.rotate(k[layer].reshape(3 * H, D), 10).reshape(3, H, D)
        np.testing.assert_allclose(cache.keys[layer, :3], want, atol=1e-12)


def test_reposition_round_trip_recovers_keys(rng):
    cache = _cache()
    table = RotationTable(D, 64, 10000.0)
    cache.register_message(0, "prefilled", 2)
    _, (k, _) = _append(cache, rng, 0, [5, 6], [2, 3])
    cache.reposition_message(0, 40, table)
    cache.reposition_message(0, 2, table)
    np.testing.assert_allclose(cache.keys[:, :2], k, atol=1e-10)


def test_reposition_leaves_values_bitwise_alone(rng):
    cache = _cache()
    table = RotationTable(D, 64, 10000.0)
    cache.register_message(0, "prefilled", 0)
    _, (_, v) = _append(cache, rng, 0, [1, 2], [0, 1])
    cache.reposition_message(0, 7, table)
    np.testing.assert_array_equal(cache.values[:, :2], v)


def test_reposition_ignores_other_messages(rng):
    cache = _cache()
    table = RotationTable(D, 64, 10000.0)
    cache.register_message(0, "prefilled", 0)
    cache.register_message(1, "prefilled", 0)
    _append(cache, rng, 0, [1], [0])
    _, (k1, _) = _append(cache, rng, 1, [2], [0])
    cache.reposition_message(0, 9, table)
    np.testing.assert_array_equal(cache.keys[:, 1:2], k1)
    assert cache.positions[1] == 0


def test_reposition_rejects_bad_offsets(rng):
    cache = _cache()
    table = RotationTable(D, SMALL_CONFIG.context_window, 10000.0)
    cache.register_message(0, "prefilled", 0)
    _append(cache, rng, 0, [1, 2], [0, 1])
    with pytest.raises(WindowOverflowError):
        cache.reposition_message(0, SMALL_CONFIG.context_window - 1, table)
    with pytest.raises(ValueError):
        cache.reposition_message(0, -1, table)


def test_dump_jsonl_format(rng, tmp_path):
    cache = _cache()
    cache.register_message(0, "prefilled", 1)
    _append(cache, rng, 0, [42, 43], [1, 2])
    out = tmp_path / "dump.jsonl"
    cache.dump_jsonl(out)
    lines = [json.loads(s) for s in out.read_text().splitlines()]
    assert lines == [
        {"physical_index": 0, "m": 0, "j": 1, "token_id": 42},
        {"physical_index": 1, "m": 0, "j": 2, "token_id": 43},
    ]


def test_clone_is_independent(rng):
    cache = _cache()
    cache.register_message(0, "prefilled", 0)
    _append(cache, rng, 0, [1], [0])
    twin = cache.clone()
    _append(cache, rng, 0, [2], [1])
    assert twin.token_count == 1
    assert cache.token_count == 2
    np.testing.assert_array_equal(twin.keys[:, :1], cache.keys[:, :1])


def test_register_twice_rejected():
    cache = _cache()
    cache.register_message(0, "prefilled", 0)
    with pytest.raises(ValueError):
        cache.register_message(0, "prefilled", 0)
