"""Command line front end.

Exit codes: 0 success (diff: traces equivalent), 1 diff found, 2 usage or
input parse error, 3 engine error during a run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .baseline import BaselineEngine
from .config import DEFAULT_CONFIG, ModelConfig
from .engine import Engine
from .errors import ChoreoError, ScriptError, TraceMismatchError
from .model import init_weights, load_weights, save_weights
from .script import Trace, diff_traces, load_script, run_script


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except (ScriptError, TraceMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ChoreoError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="choreo",
        description="Toy transformer with a choreographed, append-only KV cache.")
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("weights", help="weight file utilities")
    wsub = w.add_subparsers(dest="weights_command", required=True)
    wi = wsub.add_parser("init", help="deterministically initialize and save weights")
    wi.add_argument("--seed", type=int, default=None, help="override config seed")
    wi.add_argument("--config", type=Path, default=None, help="model config JSON")
    wi.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    wi.add_argument("--out", type=Path, required=True)
    wi.set_defaults(fn=cmd_weights_init)

    r = sub.add_parser("run", help="run a workflow script")
    r.add_argument("script", type=Path)
    r.add_argument("--engine", choices=("choreo", "baseline"), default="choreo")
    r.add_argument("--weights", type=Path, default=None,
                   help="weight file; omitted means init from config")
    r.add_argument("--config", type=Path, default=None)
    r.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    r.add_argument("--seed", type=int, default=0, help="engine sampling seed")
    r.add_argument("--capacity", type=int, default=65536)
    r.add_argument("--trace", type=Path, default=None, help="write trace JSONL here")
    r.add_argument("--report", type=Path, default=None, help="write cost report JSON")
    r.add_argument("--cache-dump", type=Path, default=None,
                   help="dump final cache metadata JSONL (choreo engine only)")
    r.add_argument("--record-logits", action="store_true",
                   help="record per-selection logits into the trace")
    r.add_argument("--force-from", type=Path, default=None,
                   help="replay generated tokens from this trace")
    r.add_argument("--no-prefix-cache", action="store_true",
                   help="disable the baseline engine's prefix cache")
    r.set_defaults(fn=cmd_run)

    d = sub.add_parser("diff", help="compare two traces")
    d.add_argument("trace_a", type=Path)
    d.add_argument("trace_b", type=Path)
    d.add_argument("--logits", action="store_true", help="also compare recorded logits")
    d.add_argument("--tol", type=float, default=1e-9)
    d.set_defaults(fn=cmd_diff)

    b = sub.add_parser("bench", help="forced-identical cost comparison")
    b.add_argument("--workflow", choices=sorted(bench_mod._SUITE_FNS), default="tot")
    b.add_argument("--seeds", type=int, default=10, help="instances, seeded 0..N-1")
    b.add_argument("--weights", type=Path, default=None)
    b.add_argument("--config", type=Path, default=None)
    b.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    b.add_argument("--agents", type=int, default=None)
    b.add_argument("--rounds", type=int, default=None)
    b.add_argument("--branches", type=str, default=None,
                   help="count or doubling range like 2..16 (tot only)")
    b.add_argument("--voters", type=str, default=None,
                   help="count or doubling range like 1..8 (tot only)")
    b.add_argument("--turns", type=int, default=None)
    b.add_argument("--questions", type=int, default=None)
    b.add_argument("--topology", type=str, default=None)
    b.add_argument("--out", type=Path, default=None, help="write results JSON")
    b.set_defaults(fn=cmd_bench)
    return parser


def _load_config(path: Path | None) -> ModelConfig:
    if path is None:
        return DEFAULT_CONFIG
    with open(path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))


def _load_weights(args):
    dtype = np.float64 if args.dtype == "float64" else np.float32
    if args.weights is not None:
        return load_weights(args.weights, dtype=dtype)
    return init_weights(_load_config(args.config), dtype=dtype)


def cmd_weights_init(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = ModelConfig.from_dict({**config.to_dict(), "seed": args.seed})
    dtype = np.float64 if args.dtype == "float64" else np.float32
    weights = init_weights(config, dtype=dtype)
    save_weights(weights, args.out)
    n_params = sum(t.size for _, t in weights.named_tensors())
    print(f"wrote {args.out} ({n_params} parameters, seed {config.seed})")
    return 0


def cmd_run(args) -> int:
    weights = _load_weights(args)
    if args.engine == "choreo":
        if args.no_prefix_cache:
            print("error: --no-prefix-cache applies to the baseline engine only",
                  file=sys.stderr)
            return 2
        engine = Engine(weights, capacity=args.capacity, seed=args.seed,
                        record_logits=args.record_logits)
    else:
        if args.cache_dump:
            print("error: --cache-dump applies to the choreo engine only",
                  file=sys.stderr)
            return 2
        engine = BaselineEngine(weights, seed=args.seed,
                                prefix_cache=not args.no_prefix_cache,
                                record_logits=args.record_logits)
    script = load_script(args.script)
    force = Trace.from_jsonl(args.force_from).forcing() if args.force_from else None
    trace = run_script(engine, script, force=force)

    for step in trace.steps:
        heads = ", ".join(f"{m.name}={m.token_count}t" for m in step.messages)
        print(f"step {step.index} {step.name} [{step.op}] {heads} "
              f"prefill={step.prefill_flops} decode={step.decode_flops}")
    report = bench_mod.report_from_trace(trace)
    print(f"total: prefill_flops={report.prefill_flops} "
          f"decode_flops={report.decode_flops} tokens={report.tokens_encoded} "
          f"wall={report.wall:.3f}s")
    if args.trace:
        trace.to_jsonl(args.trace)
        print(f"trace written to {args.trace}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.cache_dump:
        engine.cache.dump_jsonl(args.cache_dump)
    return 0


def cmd_diff(args) -> int:
    a = Trace.from_jsonl(args.trace_a)
    b = Trace.from_jsonl(args.trace_b)
    diffs = diff_traces(a, b, compare_logits=args.logits, atol=args.tol)
    for line in diffs:
        print(line)
    if diffs:
        print(f"{len(diffs)} difference(s)")
        return 1
    print("traces equivalent")
    return 0


def cmd_bench(args) -> int:
    weights = _load_weights(args)
    seeds = list(range(args.seeds))
    shape = dict(bench_mod.SUITE_SHAPES.get(args.workflow, {}))
    for key, val in (("n_agents", args.agents), ("n_rounds", args.rounds),
                     ("n_turns", args.turns), ("n_questions", args.questions),
                     ("topology", args.topology)):
        if val is not None:
            shape[key] = val

    sweep = None
    if args.workflow == "tot":
        if args.voters and ".." in args.voters:
            sweep = ("voters", bench_mod.parse_range(args.voters))
        elif args.branches and ".." in args.branches:
            sweep = ("branches", bench_mod.parse_range(args.branches))
        if args.branches and ".." not in args.branches:
            shape["n_branches"] = int(args.branches)
        if args.voters and ".." not in args.voters:
            shape["n_voters"] = int(args.voters)
    elif args.voters or args.branches:
        print("error: --branches/--voters apply to the tot workflow", file=sys.stderr)
        return 2

    if sweep is not None:
        axis, values = sweep
        if axis == "voters":
            rows = bench_mod.tot_voter_sweep(
                weights, values, seeds, n_branches=shape.get("n_branches", 4))
        else:
            rows = []
            for n in values:
                res = bench_mod.run_suite("tot", weights, seeds,
                                          shape={**shape, "n_branches": n})
                rows.append({"n_branches": n,
                             "ratio": res.pooled_prefill_ratio,
                             "ci": [res.ci_low, res.ci_high]})
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        payload = {"workflow": "tot", "sweep": axis, "rows": rows}
    else:
        res = bench_mod.run_suite(args.workflow, weights, seeds, shape=shape)
        print(f"{args.workflow}: pooled prefill ratio {res.pooled_prefill_ratio:.3f} "
              f"(CI [{res.ci_low:.3f}, {res.ci_high:.3f}], {len(seeds)} instances)")
        print(f"pooled decode ratio {res.pooled_decode_ratio:.3f}")
        payload = res.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0
