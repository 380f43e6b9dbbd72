import numpy as np
import pytest

from choreo.baseline import BaselineEngine
from choreo.bench import (
    CostReport,
    bootstrap_ci,
    pair_ratios,
    parse_range,
    random_text,
    report_from_trace,
    run_pair,
    run_suite,
    tot_voter_sweep,
)
from choreo.engine import Engine, SamplingParams
from choreo.errors import TraceMismatchError
from choreo.tensor import count_matmul_flops
from choreo.tokenizer import frame_message
from choreo.workflows import run_conversation, run_tot

SP = SamplingParams(max_tokens=5)


def test_report_totals_match_trace(small_weights):
    trace = run_conversation(Engine(small_weights), ["hi", "two"], sampling=SP)
    report = report_from_trace(trace)
    assert isinstance(report, CostReport)
    assert report.prefill_flops == trace.total("prefill_flops")
    assert report.decode_flops == trace.total("decode_flops")
    assert report.total_flops == report.prefill_flops + report.decode_flops
    assert len(report.steps) == len(trace.steps)
    assert report.to_dict()["ttft_mean"] > 0


@pytest.mark.parametrize("engine_cls", [Engine, BaselineEngine])
def test_analytic_flops_equal_executed_matmuls(small_weights, engine_cls):
    """The reported FLOP totals are exactly the matmul work the run executed."""
    engine = engine_cls(small_weights)
    with count_matmul_flops() as counter:
        trace = run_conversation(engine, ["hello there", "and more"], sampling=SP)
    assert trace.total("prefill_flops") + trace.total("decode_flops") == counter.total


def test_identical_engines_give_unit_ratios(small_weights):
    ta = run_conversation(Engine(small_weights), ["hi"], sampling=SP)
    tb = run_conversation(Engine(small_weights), ["hi"], sampling=SP)
    ratios = pair_ratios(ta, tb)
    assert ratios.prefill_flops == 1.0
    assert ratios.decode_flops == 1.0
    assert ratios.total_flops == 1.0


def test_chain_pair_ratio_is_exactly_one(small_weights):
    """On a pure chain the baseline's prefix cache removes every re-encode."""
    tb, tc = run_pair(run_conversation, small_weights,
                      turns=["hello", "more"], sampling=SP)
    assert tb.total("prefill_flops") == tc.total("prefill_flops")
    assert tb.total("decode_flops") == tc.total("decode_flops")
    ratios = pair_ratios(tb, tc)
    assert ratios.prefill_flops == 1.0


def test_overlapped_pair_saves_prefill(small_weights):
    tb, tc = run_pair(run_tot, small_weights, question="sum of 2 and 2?",
                      n_branches=2, n_voters=2, sampling=SP)
    assert tb.total("prefill_flops") > tc.total("prefill_flops")
    assert pair_ratios(tb, tc).prefill_flops > 1.0


def test_run_pair_raises_on_divergence(small_weights, monkeypatch):
    def broken(engine, *, force=None, **kwargs):
        trace = run_conversation(engine, ["hi"], sampling=SP, force=force)
        if engine.kind == "choreo":
            trace.message("a1").text += "!"
        return trace

    with pytest.raises(TraceMismatchError):
        run_pair(broken, small_weights)


def test_random_text_frames_to_exact_length(rng):
    for n in (3, 16, 77, 128):
        text = random_text(rng, n)
        assert len(frame_message(text)) == n


def test_bootstrap_ci_is_deterministic_and_covers_mean():
    values = [1.0, 2.0, 3.0, 4.0, 5.0]
    lo1, hi1 = bootstrap_ci(values, seed=4)
    lo2, hi2 = bootstrap_ci(values, seed=4)
    assert (lo1, hi1) == (lo2, hi2)
    assert lo1 <= float(np.mean(values)) <= hi1
    assert bootstrap_ci([]) == pytest.approx((float("nan"), float("nan")), nan_ok=True)


def test_run_suite_small(default_weights):
    result = run_suite("tot", default_weights, seeds=[0, 1],
                       shape={"n_branches": 2, "n_voters": 2})
    assert result.workflow == "tot"
    assert len(result.instances) == 2
    assert result.pooled_prefill_ratio > 1.0
    assert result.ci_low <= result.ci_high
    d = result.to_dict()
    assert d["seeds"] == [0, 1]


def test_tot_voter_sweep_savings_nondecreasing(default_weights):
    rows = tot_voter_sweep(default_weights, voters=[1, 2, 4], seeds=[0],
                           n_branches=2)
    savings = [r["savings"] for r in rows]
    assert savings == sorted(savings)
    assert all(r["ratio"] >= 1.0 for r in rows)


def test_parse_range():
    assert parse_range("4") == [4]
    assert parse_range("2..16") == [2, 4, 8, 16]
    assert parse_range("3..3") == [3]
    with pytest.raises(ValueError):
        parse_range("0..4")
    with pytest.raises(ValueError):
        parse_range("8..2")
