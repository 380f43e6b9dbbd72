"""Workflow scripts and traces.

A script is a JSON object with a list of steps, each naming the message(s) it
produces; parents are referenced by those names. The same script runs under
either engine. A trace records, per step, the produced messages (text, token
counts, generated ids), cost counters, and optionally per-selection logits;
traces serialize to JSONL and can replay a run by forcing generated tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .engine import DecodeCall, PrefillCall, SamplingParams
from .errors import ScriptError, TraceMismatchError

_OPS = ("prefill", "prefill_parallel", "decode", "decode_parallel")
_SAMPLING_KEYS = {"mode", "temperature", "top_p", "seed", "max_tokens"}


# -- script loading -------------------------------------------------------------


def load_script(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScriptError(f"{path}: invalid JSON: {exc}") from exc
    validate_script(obj)
    return obj


def validate_script(script: Any) -> None:
    if not isinstance(script, dict):
        raise ScriptError("script must be a JSON object")
    if not isinstance(script.get("name"), str) or not script["name"]:
        raise ScriptError("script needs a non-empty 'name'")
    if "sampling" in script:
        _check_sampling(script["sampling"], "script")
    steps = script.get("steps")
    if not isinstance(steps, list) or not steps:
        raise ScriptError("script needs a non-empty 'steps' list")
    seen: set[str] = set()
    for i, step in enumerate(steps):
        where = f"step {i}"
        if not isinstance(step, dict):
            raise ScriptError(f"{where}: must be an object")
        name = step.get("name")
        if not isinstance(name, str) or not name:
            raise ScriptError(f"{where}: needs a non-empty 'name'")
        where = f"step {i} ({name})"
        if name in seen:
            raise ScriptError(f"{where}: duplicate name")
        op = step.get("op")
        if op not in _OPS:
            raise ScriptError(f"{where}: unknown op {op!r}")
        if op in ("prefill", "decode"):
            calls, call_names = [step], [name]
        else:
            calls = step.get("calls")
            if not isinstance(calls, list) or not calls:
                raise ScriptError(f"{where}: parallel op needs a non-empty 'calls' list")
            call_names = []
            for call in calls:
                if not isinstance(call, dict) or not isinstance(call.get("name"), str) \
                        or not call["name"]:
                    raise ScriptError(f"{where}: every call needs a non-empty 'name'")
                call_names.append(call["name"])
        batch = set(call_names) | ({name} if op not in ("prefill", "decode") else set())
        if len(batch) != len(call_names) + (0 if op in ("prefill", "decode") else 1):
            raise ScriptError(f"{where}: duplicate names within the step")
        if batch & seen:
            raise ScriptError(f"{where}: duplicate name {sorted(batch & seen)}")
        for call in calls:
            _check_call(call, op, seen, where)
        seen |= batch
    return None


def _check_call(call: dict, op: str, produced: set[str], where: str) -> None:
    content_key = "content" if op.startswith("prefill") else "header"
    if not isinstance(call.get(content_key), str):
        raise ScriptError(f"{where}: missing or non-string '{content_key}'")
    parents = call.get("parents", [])
    if not isinstance(parents, list):
        raise ScriptError(f"{where}: 'parents' must be a list of names")
    for p in parents:
        if not isinstance(p, str):
            raise ScriptError(f"{where}: parent {p!r} is not a name")
        if p not in produced:
            raise ScriptError(
                f"{where}: parent {p!r} is not produced by an earlier step")
    offsets = call.get("offsets")
    if offsets is not None:
        if not isinstance(offsets, list) or len(offsets) != len(parents) or \
                any(not (o is None or isinstance(o, int)) for o in offsets):
            raise ScriptError(f"{where}: 'offsets' must match parents (ints or nulls)")
    if call.get("new_offset") is not None and not isinstance(call["new_offset"], int):
        raise ScriptError(f"{where}: 'new_offset' must be an int")
    if "sampling" in call:
        _check_sampling(call["sampling"], where)
    force = call.get("force")
    if force is not None and not isinstance(force, str) and not (
            isinstance(force, list) and all(isinstance(t, int) for t in force)):
        raise ScriptError(f"{where}: 'force' must be a string or a token id list")


def _check_sampling(obj: Any, where: str) -> None:
    if not isinstance(obj, dict):
        raise ScriptError(f"{where}: 'sampling' must be an object")
    unknown = set(obj) - _SAMPLING_KEYS
    if unknown:
        raise ScriptError(f"{where}: unknown sampling keys {sorted(unknown)}")


# -- traces --------------------------------------------------------------------


@dataclass
class MessageResult:
    """One produced message as recorded in a trace."""

    name: str
    message_id: int
    text: str
    token_count: int
    generated: list[int] | None = None  # decoded messages only
    ttft: float | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "id": self.message_id, "text": self.text,
                "tokens": self.token_count, "generated": self.generated,
                "ttft": self.ttft}

    @classmethod
    def from_dict(cls, d: dict) -> "MessageResult":
        return cls(d["name"], d["id"], d["text"], d["tokens"],
                   d.get("generated"), d.get("ttft"))


@dataclass
class StepRecord:
    index: int
    name: str
    op: str
    messages: list[MessageResult]
    prefill_flops: int = 0
    decode_flops: int = 0
    tokens_encoded: int = 0
    cache_hit_tokens: int = 0
    repositioned_tokens: int = 0
    wall: float = 0.0
    logits: dict[str, list[list[float]]] | None = None

    def to_dict(self) -> dict:
        d = {"index": self.index, "name": self.name, "op": self.op,
             "messages": [m.to_dict() for m in self.messages],
             "prefill_flops": self.prefill_flops, "decode_flops": self.decode_flops,
             "tokens_encoded": self.tokens_encoded,
             "cache_hit_tokens": self.cache_hit_tokens,
             "repositioned_tokens": self.repositioned_tokens, "wall": self.wall}
        if self.logits is not None:
            d["logits"] = self.logits
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(d["index"], d["name"], d["op"],
                   [MessageResult.from_dict(m) for m in d["messages"]],
                   d.get("prefill_flops", 0), d.get("decode_flops", 0),
                   d.get("tokens_encoded", 0), d.get("cache_hit_tokens", 0),
                   d.get("repositioned_tokens", 0), d.get("wall", 0.0),
                   d.get("logits"))


@dataclass
class Trace:
    script_name: str
    engine: str
    seed: int
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def message(self, name: str) -> MessageResult:
        for step in self.steps:
            for msg in step.messages:
                if msg.name == name:
                    return msg
        raise KeyError(f"no message named {name!r} in trace")

    def messages(self) -> list[MessageResult]:
        return [m for step in self.steps for m in step.messages]

    def forcing(self) -> dict[str, list[int]]:
        """Generated token ids per decoded message, for replaying a run."""
        return {m.name: list(m.generated) for m in self.messages()
                if m.generated is not None}

    def total(self, field_name: str) -> int:
        return sum(getattr(s, field_name) for s in self.steps)

    def ttft_values(self) -> list[float]:
        return [m.ttft for m in self.messages() if m.ttft is not None]

    def total_wall(self) -> float:
        return sum(s.wall for s in self.steps)

    def canonical(self) -> dict:
        """Deterministic rendering: timing fields stripped."""
        steps = []
        for s in self.steps:
            d = s.to_dict()
            d["wall"] = 0.0
            d["messages"] = [dict(m, ttft=None) for m in d["messages"]]
            steps.append(d)
        return {"script": self.script_name, "engine": self.engine, "seed": self.seed,
                "config": self.config, "meta": self.meta, "steps": steps}

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"kind": "trace", "script": self.script_name, "engine": self.engine,
                      "seed": self.seed, "config": self.config, "meta": self.meta}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for step in self.steps:
                fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Trace":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
        if not lines:
            raise ScriptError(f"{path}: empty trace file")
        try:
            header = json.loads(lines[0])
            if header.get("kind") != "trace":
                raise ScriptError(f"{path}: not a trace file")
            steps = [StepRecord.from_dict(json.loads(line)) for line in lines[1:]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ScriptError(f"{path}: malformed trace: {exc}") from exc
        return cls(header["script"], header["engine"], header["seed"],
                   header.get("config", {}), steps, header.get("meta", {}))


# -- running -------------------------------------------------------------------


def sampling_from_dict(obj: dict | None, default: SamplingParams | None = None,
                       ) -> SamplingParams:
    base = default if default is not None else SamplingParams()
    if not obj:
        return base
    merged = {"mode": base.mode, "temperature": base.temperature, "top_p": base.top_p,
              "seed": base.seed, "max_tokens": base.max_tokens}
    merged.update(obj)
    return SamplingParams(**merged)


def run_script(engine, script: dict,
               force: dict[str, Sequence[int] | str] | None = None) -> Trace:
    """Execute a validated script on an engine, returning the trace.

    `force` overrides generation per message name; a step's own "force" field
    applies where no override is given.
    """
    validate_script(script)
    force = dict(force) if force else {}
    default_sampling = sampling_from_dict(script.get("sampling"))
    ids: dict[str, int] = {}
    trace = Trace(script["name"], engine.kind, engine.seed, engine.config.to_dict())

    for index, step in enumerate(script["steps"]):
        op = step["op"]
        if op == "prefill":
            mids = [engine.prefill(_prefill_call(step, ids))]
            names = [step["name"]]
        elif op == "prefill_parallel":
            calls = [_prefill_call(c, ids) for c in step["calls"]]
            mids = engine.prefill_parallel(calls)
            names = [c["name"] for c in step["calls"]]
        elif op == "decode":
            mids = [engine.decode(_decode_call(step, ids, default_sampling),
                                  force_tokens=force.get(step["name"], step.get("force")))]
            names = [step["name"]]
        else:
            calls = [_decode_call(c, ids, default_sampling) for c in step["calls"]]
            forces = [force.get(c["name"], c.get("force")) for c in step["calls"]]
            mids = engine.decode_parallel(calls, force_tokens=forces)
            names = [c["name"] for c in step["calls"]]
        ids.update(zip(names, mids))
        trace.steps.append(_record_step(engine, index, step["name"], op, names, mids))
    return trace


def _record_step(engine, index: int, step_name: str, op: str,
                 names: list[str], mids: list[int]) -> StepRecord:
    stats = engine.last_stats
    decoded = op in ("decode", "decode_parallel")
    messages = [MessageResult(
        name=name,
        message_id=mid,
        text=engine.message_text(mid),
        token_count=engine.message_token_count(mid),
        generated=engine.generated_token_ids(mid) if decoded else None,
        ttft=stats.ttft.get(mid),
    ) for name, mid in zip(names, mids)]
    logits = None
    if stats.logits is not None:
        by_id = {mid: name for name, mid in zip(names, mids)}
        logits = {by_id[mid]: [np.asarray(row).tolist() for row in rows]
                  for mid, rows in stats.logits.items()}
    return StepRecord(index, step_name, op, messages,
                      prefill_flops=stats.prefill_flops, decode_flops=stats.decode_flops,
                      tokens_encoded=stats.tokens_encoded,
                      cache_hit_tokens=stats.cache_hit_tokens,
                      repositioned_tokens=stats.repositioned_tokens,
                      wall=stats.wall, logits=logits)


def _prefill_call(obj: dict, ids: dict[str, int]) -> PrefillCall:
    return PrefillCall(
        message=obj["content"],
        parents=[ids[p] for p in obj.get("parents", [])],
        offsets=obj.get("offsets"),
        new_offset=obj.get("new_offset"),
    )


def _decode_call(obj: dict, ids: dict[str, int], default: SamplingParams) -> DecodeCall:
    return DecodeCall(
        header=obj["header"],
        parents=[ids[p] for p in obj.get("parents", [])],
        offsets=obj.get("offsets"),
        new_offset=obj.get("new_offset"),
        sampling=sampling_from_dict(obj.get("sampling"), default),
    )


# -- diffing -------------------------------------------------------------------


def diff_traces(a: Trace, b: Trace, *, compare_logits: bool = False,
                atol: float = 1e-9) -> list[str]:
    """Content differences between two runs of the same script.

    Raises TraceMismatchError when the traces are not comparable (different
    scripts or step structure); engine kind and cost counters may differ
    freely. Returns human-readable difference lines, empty when equivalent.
    """
    if a.script_name != b.script_name:
        raise TraceMismatchError(
            f"different scripts: {a.script_name!r} vs {b.script_name!r}")
    if len(a.steps) != len(b.steps):
        raise TraceMismatchError(f"step counts differ: {len(a.steps)} vs {len(b.steps)}")
    diffs: list[str] = []
    for sa, sb in zip(a.steps, b.steps):
        if (sa.name, sa.op) != (sb.name, sb.op):
            raise TraceMismatchError(
                f"step {sa.index}: {sa.name}/{sa.op} vs {sb.name}/{sb.op}")
        if len(sa.messages) != len(sb.messages):
            raise TraceMismatchError(f"step {sa.name}: message counts differ")
        for ma, mb in zip(sa.messages, sb.messages):
            if ma.name != mb.name:
                raise TraceMismatchError(f"step {sa.name}: {ma.name} vs {mb.name}")
            if ma.text != mb.text:
                diffs.append(f"{ma.name}: text {ma.text!r} != {mb.text!r}")
            if ma.token_count != mb.token_count:
                diffs.append(f"{ma.name}: token count {ma.token_count} != {mb.token_count}")
            if (ma.generated or []) != (mb.generated or []):
                diffs.append(f"{ma.name}: generated ids differ")
        if compare_logits:
            diffs.extend(_diff_logits(sa, sb, atol))
    return diffs


def _diff_logits(sa: StepRecord, sb: StepRecord, atol: float) -> list[str]:
    if sa.logits is None and sb.logits is None:
        return []
    if sa.logits is None or sb.logits is None:
        return [f"{sa.name}: logits recorded on one side only"]
    diffs = []
    for name in sorted(set(sa.logits) | set(sb.logits)):
        la, lb = sa.logits.get(name), sb.logits.get(name)
        if la is None or lb is None or len(la) != len(lb):
            diffs.append(f"{name}: logits row counts differ")
            continue
        for i, (ra, rb) in enumerate(zip(la, lb)):
            err = float(np.max(np.abs(np.asarray(ra) - np.asarray(rb)))) if ra else 0.0
            if len(ra) != len(rb) or err > atol:
                diffs.append(f"{name}: logits row {i} differ (max abs {err:.3e})")
                break
    return diffs
