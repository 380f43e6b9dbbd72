"""Cost accounting and baseline-vs-choreography comparisons.

The comparison protocol keeps outputs out of the picture: the baseline
engine free-runs a workflow, then the choreographed engine replays it with
every generated token forced, so both process identical messages and only
the encoding work differs. Prefill FLOPs count encoding of already-known
content (prefill calls; the baseline's re-encoded prompt tails), decode
FLOPs count new content (headers and generated tokens).

Wall-clock and time-to-first-token are measured and reported but never
asserted; at toy scale they track Python overhead as much as arithmetic.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baseline import BaselineEngine
from .engine import Engine, SamplingParams
from .errors import TraceMismatchError
from .model import WeightSet
from .script import Trace, diff_traces
from .workflows import run_conversation, run_madpar, run_maditer, run_multiqa, run_tot

# long per-role system prompts: the turn-taking debate reuses little across
# calls, so its savings come mostly from not re-encoding these each time
_MADITER_PROMPTS = {
    "aff": ("System: you are the affirmative debater. Argue in favor of the "
            "proposal under discussion. Ground every claim in the question as "
            "stated, concede nothing without a reason, keep each reply to a "
            "few sentences, and never repeat an argument you already made."),
    "neg": ("System: you are the negative debater. Argue against the proposal "
            "under discussion. Attack the strongest form of the other side's "
            "case, ground every claim in the question as stated, keep each "
            "reply to a few sentences, and never repeat yourself."),
    "mod": ("System: you are the moderator. After each round, weigh the two "
            "sides' arguments against each other, name the currently leading "
            "side, and say STOP once one side's case is clearly settled or "
            "the debate has stopped producing new arguments."),
}


@dataclass
class CostReport:
    """Totals of one traced run, plus per-step rows for inspection."""

    workflow: str
    engine: str
    seed: int
    prefill_flops: int
    decode_flops: int
    tokens_encoded: int
    cache_hit_tokens: int
    repositioned_tokens: int
    ttft: list[float]
    wall: float
    steps: list[dict] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return self.prefill_flops + self.decode_flops

    def to_dict(self) -> dict:
        return {"workflow": self.workflow, "engine": self.engine, "seed": self.seed,
                "prefill_flops": self.prefill_flops, "decode_flops": self.decode_flops,
                "total_flops": self.total_flops, "tokens_encoded": self.tokens_encoded,
                "cache_hit_tokens": self.cache_hit_tokens,
                "repositioned_tokens": self.repositioned_tokens,
                "ttft_mean": float(np.mean(self.ttft)) if self.ttft else None,
                "wall": self.wall, "steps": self.steps}


def report_from_trace(trace: Trace) -> CostReport:
    return CostReport(
        workflow=trace.script_name, engine=trace.engine, seed=trace.seed,
        prefill_flops=trace.total("prefill_flops"),
        decode_flops=trace.total("decode_flops"),
        tokens_encoded=trace.total("tokens_encoded"),
        cache_hit_tokens=trace.total("cache_hit_tokens"),
        repositioned_tokens=trace.total("repositioned_tokens"),
        ttft=trace.ttft_values(), wall=trace.total_wall(),
        steps=[{"name": s.name, "op": s.op, "prefill_flops": s.prefill_flops,
                "decode_flops": s.decode_flops, "tokens_encoded": s.tokens_encoded}
               for s in trace.steps])


# -- forced-identical pairs ------------------------------------------------------


def run_pair(workflow: Callable[..., Trace], weights: WeightSet, *, seed: int = 0,
             prefix_cache: bool = True, **kwargs) -> tuple[Trace, Trace]:
    """Free-run the baseline, replay it forced on the choreography engine.

    Both engines see identical message content; a non-empty content diff is
    a bug and raises TraceMismatchError.
    """
    baseline = BaselineEngine(weights, seed=seed, prefix_cache=prefix_cache)
    trace_b = workflow(baseline, **kwargs)
    choreo = Engine(weights, seed=seed)
    trace_c = workflow(choreo, force=trace_b.forcing(), **kwargs)
    diffs = diff_traces(trace_b, trace_c)
    if diffs:
        raise TraceMismatchError(
            f"forced replay diverged: {diffs[:3]} (+{max(0, len(diffs) - 3)} more)")
    return trace_b, trace_c


@dataclass
class PairRatios:
    """Baseline-over-choreography ratios for one forced-identical pair."""

    workflow: str
    seed: int
    prefill_flops: float
    decode_flops: float
    total_flops: float
    ttft: float
    wall: float
    baseline: CostReport | None = None
    choreo: CostReport | None = None

    def to_dict(self) -> dict:
        return {"workflow": self.workflow, "seed": self.seed,
                "prefill_flops": self.prefill_flops, "decode_flops": self.decode_flops,
                "total_flops": self.total_flops, "ttft": self.ttft, "wall": self.wall}


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return float("inf") if num > 0 else 1.0
    return num / den


def pair_ratios(trace_b: Trace, trace_c: Trace, keep_reports: bool = False) -> PairRatios:
    rb, rc = report_from_trace(trace_b), report_from_trace(trace_c)
    return PairRatios(
        workflow=trace_c.script_name, seed=trace_c.seed,
        prefill_flops=_ratio(rb.prefill_flops, rc.prefill_flops),
        decode_flops=_ratio(rb.decode_flops, rc.decode_flops),
        total_flops=_ratio(rb.total_flops, rc.total_flops),
        ttft=_ratio(float(np.mean(rb.ttft)) if rb.ttft else 0.0,
                    float(np.mean(rc.ttft)) if rc.ttft else 0.0),
        wall=_ratio(rb.wall, rc.wall),
        baseline=rb if keep_reports else None,
        choreo=rc if keep_reports else None)


# -- seeded instance suites ------------------------------------------------------


def random_text(rng: np.random.Generator, n_tokens: int) -> str:
    """ASCII text whose framed encoding is exactly n_tokens long."""
    n_bytes = max(1, n_tokens - 2)
    letters = string.ascii_lowercase
    chars = []
    while len(chars) < n_bytes:
        chars.extend(letters[i] for i in rng.integers(0, 26, size=8))
        chars.append(" ")
    return "".join(chars[:n_bytes]).strip().ljust(n_bytes, "x")


def _instance_sampling(rng: np.random.Generator) -> SamplingParams:
    return SamplingParams(max_tokens=int(rng.integers(16, 129)))


def _instance_text(rng: np.random.Generator) -> str:
    return random_text(rng, int(rng.integers(16, 129)))


def _suite_kwargs(workflow: str, rng: np.random.Generator, shape: dict) -> dict:
    text = _instance_text(rng)
    sampling = _instance_sampling(rng)
    if workflow == "madpar":
        return {"question": text, "sampling": sampling,
                "n_agents": shape.get("n_agents", 3),
                "n_rounds": shape.get("n_rounds", 3)}
    if workflow == "tot":
        return {"question": text, "sampling": sampling,
                "n_branches": shape.get("n_branches", 8),
                "n_voters": shape.get("n_voters", 4)}
    if workflow == "maditer":
        return {"question": text, "sampling": sampling,
                "n_rounds": shape.get("n_rounds", 3),
                "sys_prompts": shape.get("sys_prompts", _MADITER_PROMPTS)}
    if workflow == "conversation":
        n_turns = shape.get("n_turns", 3)
        return {"turns": [_instance_text(rng) for _ in range(n_turns)],
                "sampling": sampling}
    if workflow == "multiqa":
        n_q = shape.get("n_questions", 3)
        return {"questions": [_instance_text(rng) for _ in range(n_q)],
                "topology": shape.get("topology", "parallel"), "sampling": sampling}
    raise ValueError(f"no suite shape for workflow {workflow!r}")


_SUITE_FNS = {"madpar": run_madpar, "tot": run_tot, "maditer": run_maditer,
              "conversation": run_conversation, "multiqa": run_multiqa}

# default comparison shapes; with these, pooled prefill-FLOP ratios over a
# common seed set come out madpar > tot > maditer (debaters that re-read
# each other every round save the most, turn-taking with long per-role
# system prompts the least)
SUITE_SHAPES = {
    "madpar": {"n_agents": 3, "n_rounds": 3},
    "tot": {"n_branches": 4, "n_voters": 4},
    "maditer": {"n_rounds": 3},
}


@dataclass
class SuiteResult:
    workflow: str
    seeds: list[int]
    instances: list[PairRatios]
    pooled_prefill_ratio: float
    pooled_decode_ratio: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return {"workflow": self.workflow, "seeds": self.seeds,
                "pooled_prefill_ratio": self.pooled_prefill_ratio,
                "pooled_decode_ratio": self.pooled_decode_ratio,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "instances": [r.to_dict() for r in self.instances]}


def bootstrap_ci(values: Sequence[float], *, n_boot: int = 1000, seed: int = 0,
                 alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) == 0:
        return (float("nan"), float("nan"))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(vals), size=(n_boot, len(vals)))
    means = vals[idx].mean(axis=1)
    return (float(np.percentile(means, 100 * alpha / 2)),
            float(np.percentile(means, 100 * (1 - alpha / 2))))


def run_suite(workflow: str, weights: WeightSet, seeds: Sequence[int],
              shape: dict | None = None, keep_reports: bool = False) -> SuiteResult:
    """Forced-identical comparison over seeded instances with random lengths.

    Each seed draws its own problem text (16..128 framed tokens) and token
    budget (16..128); the pooled ratio divides summed baseline FLOPs by
    summed choreography FLOPs across instances.
    """
    shape = shape or {}
    fn = _SUITE_FNS[workflow]
    instances = []
    sum_bp = sum_cp = sum_bd = sum_cd = 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        kwargs = _suite_kwargs(workflow, rng, shape)
        tb, tc = run_pair(fn, weights, seed=int(seed), **kwargs)
        instances.append(pair_ratios(tb, tc, keep_reports=keep_reports))
        sum_bp += tb.total("prefill_flops")
        sum_cp += tc.total("prefill_flops")
        sum_bd += tb.total("decode_flops")
        sum_cd += tc.total("decode_flops")
    lo, hi = bootstrap_ci([r.prefill_flops for r in instances])
    return SuiteResult(workflow, [int(s) for s in seeds], instances,
                       pooled_prefill_ratio=_ratio(sum_bp, sum_cp),
                       pooled_decode_ratio=_ratio(sum_bd, sum_cd),
                       ci_low=lo, ci_high=hi)


def tot_voter_sweep(weights: WeightSet, voters: Sequence[int], seeds: Sequence[int],
                    *, n_branches: int = 4) -> list[dict]:
    """Prefill cost and savings as the voter count grows, branches fixed.

    Extra voters repeat an already-seen prompt, so baseline re-encoding
    stays flat under its prefix cache and choreographed savings never
    shrink: the absolute FLOPs saved are nondecreasing in the voter count.
    """
    rows = []
    for n_voters in voters:
        sum_b = sum_c = 0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            kwargs = {"question": _instance_text(rng),
                      "sampling": _instance_sampling(rng),
                      "n_branches": n_branches, "n_voters": int(n_voters)}
            tb, tc = run_pair(run_tot, weights, seed=int(seed), **kwargs)
            sum_b += tb.total("prefill_flops")
            sum_c += tc.total("prefill_flops")
        rows.append({"n_voters": int(n_voters), "n_branches": n_branches,
                     "baseline_prefill_flops": sum_b, "choreo_prefill_flops": sum_c,
                     "savings": sum_b - sum_c, "ratio": _ratio(sum_b, sum_c)})
    return rows


def parse_range(spec: str) -> list[int]:
    """CLI range syntax: "4" or "2..16" meaning doubling steps 2,4,8,16."""
    if ".." in spec:
        lo_s, hi_s = spec.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad range {spec!r}")
        out = []
        v = lo
        while v <= hi:
            out.append(v)
            v *= 2
        return out
    return [int(spec)]
