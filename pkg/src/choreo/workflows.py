"""Canonical multi-message workflows, runnable on either engine.

Each function drives an engine through one workflow and returns a Trace.
Message names are stable, so a `force` dict (name to text or token ids) can
pin any decoded message, and a trace from one engine can replay on another
via `trace.forcing()`.

Chain-shaped workflows (conversation; multiqa with the "chained" topology;
maditer with chain_mode) keep every message's parents equal to the full
history in creation order at default offsets, where the choreographed cache
is exactly equivalent to naive re-encoding. The overlapped variants
(multiqa serial/parallel, doc_qa, tot, madpar, bsm) trade that equivalence
for cache reuse and are compared under forced-identical outputs instead.
"""

from __future__ import annotations

import re
from typing import Sequence

from .engine import DecodeCall, PrefillCall, SamplingParams
from .script import MessageResult, StepRecord, Trace

_DIGITS = re.compile(r"\d+")


# -- output parsing (first-occurrence conventions) --------------------------------


def first_digit_run(text: str) -> int | None:
    """First run of digits in the text as an int, else None."""
    m = _DIGITS.search(text)
    return int(m.group()) if m else None


def parse_best(texts: Sequence[str], n_choices: int) -> int:
    """Majority vote over 1-based choice numbers; ties and junk go low.

    Each text votes with its first digit run when it names a valid choice,
    otherwise with choice 1. Returns a 0-based index.
    """
    counts = [0] * n_choices
    for text in texts:
        k = first_digit_run(text)
        idx = k - 1 if k is not None and 1 <= k <= n_choices else 0
        counts[idx] += 1
    return max(range(n_choices), key=lambda i: (counts[i], -i))


def parse_consensus(texts: Sequence[str]) -> str:
    """Most common first-digit-run answer, smallest on ties; "" if none."""
    counts: dict[str, int] = {}
    for text in texts:
        k = first_digit_run(text)
        if k is not None:
            counts[str(k)] = counts.get(str(k), 0) + 1
    if not counts:
        return ""
    return min(counts, key=lambda a: (-counts[a], int(a)))


def parse_stop(text: str) -> bool:
    return "STOP" in text


def parse_groups(text: str, items: Sequence[str]) -> tuple[list[str], list[str]]:
    """Split items into two groups from the first two non-empty lines.

    A line claims every item it mentions (first line wins); unmentioned
    items fall to the shorter group. Degenerate splits fall back to halving.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    g1, g2 = [], []
    for item in items:
        if len(lines) >= 2 and item in lines[0]:
            g1.append(item)
        elif len(lines) >= 2 and item in lines[1]:
            g2.append(item)
        else:
            (g1 if len(g1) <= len(g2) else g2).append(item)
    if not g1 or not g2:
        half = max(1, len(items) // 2)
        g1, g2 = list(items[:half]), list(items[half:])
    return g1, g2


# -- recording helper ---------------------------------------------------------------


class _Run:
    """Names messages, forwards calls to the engine, and records trace steps."""

    def __init__(self, engine, workflow_name: str,
                 force: dict[str, Sequence[int] | str] | None) -> None:
        self.engine = engine
        self.force = dict(force) if force else {}
        self.ids: dict[str, int] = {}
        self.headers: dict[str, str] = {}
        self.trace = Trace(workflow_name, engine.kind, engine.seed,
                           engine.config.to_dict())

    def length(self, name: str) -> int:
        return self.engine.message_token_count(self.ids[name])

    def text(self, name: str) -> str:
        return self.engine.message_text(self.ids[name])

    def reply(self, name: str) -> str:
        """Decoded text with the forced header stripped, for output parsing."""
        return self.text(name)[len(self.headers.get(name, "")):]

    def prefill(self, name: str, content: str, parents: Sequence[str] = (),
                offsets=None, new_offset=None) -> str:
        mid = self.engine.prefill(PrefillCall(
            content, [self.ids[p] for p in parents], offsets, new_offset))
        self._record(name, "prefill", [name], [mid])
        return name

    def prefill_parallel(self, step_name: str, items: Sequence[tuple[str, str]],
                         parents: Sequence[str] = ()) -> list[str]:
        pids = [self.ids[p] for p in parents]
        names = [n for n, _ in items]
        mids = self.engine.prefill_parallel(
            [PrefillCall(content, pids) for _, content in items])
        self._record(step_name, "prefill_parallel", names, mids)
        return names

    def decode(self, name: str, header: str, parents: Sequence[str],
               sampling: SamplingParams, offsets=None, new_offset=None) -> str:
        mid = self.engine.decode(
            DecodeCall(header, [self.ids[p] for p in parents], offsets, new_offset,
                       sampling),
            force_tokens=self.force.get(name))
        self.headers[name] = header
        self._record(name, "decode", [name], [mid])
        return name

    def decode_parallel(self, step_name: str, calls: list[tuple[str, DecodeCall]],
                        ) -> list[str]:
        names = [n for n, _ in calls]
        mids = self.engine.decode_parallel(
            [c for _, c in calls],
            force_tokens=[self.force.get(n) for n in names])
        self.headers.update((n, c.header) for n, c in calls)
        self._record(step_name, "decode_parallel", names, mids)
        return names

    def resolve(self, parents: Sequence[str]) -> list[int]:
        return [self.ids[p] for p in parents]

    def _record(self, step_name: str, op: str, names: list[str],
                mids: list[int]) -> None:
        self.ids.update(zip(names, mids))
        stats = self.engine.last_stats
        decoded = op in ("decode", "decode_parallel")
        messages = [MessageResult(
            name=n, message_id=mid, text=self.engine.message_text(mid),
            token_count=self.engine.message_token_count(mid),
            generated=self.engine.generated_token_ids(mid) if decoded else None,
            ttft=stats.ttft.get(mid),
        ) for n, mid in zip(names, mids)]
        self.trace.steps.append(StepRecord(
            len(self.trace.steps), step_name, op, messages,
            prefill_flops=stats.prefill_flops, decode_flops=stats.decode_flops,
            tokens_encoded=stats.tokens_encoded,
            cache_hit_tokens=stats.cache_hit_tokens,
            repositioned_tokens=stats.repositioned_tokens, wall=stats.wall))


def _sp(sampling: SamplingParams | None) -> SamplingParams:
    return sampling if sampling is not None else SamplingParams(max_tokens=16)


# -- workflows ---------------------------------------------------------------------


def run_conversation(engine, turns: Sequence[str], *,
                     sampling: SamplingParams | None = None,
                     force: dict | None = None) -> Trace:
    """Alternating user/assistant turns; every message sees the full history."""
    sp = _sp(sampling)
    run = _Run(engine, "conversation", force)
    history: list[str] = []
    for i, text in enumerate(turns, start=1):
        u = run.prefill(f"u{i}", f"User: {text}", parents=history)
        history.append(u)
        a = run.decode(f"a{i}", "Assistant:", parents=history, sampling=sp)
        history.append(a)
    return run.trace


def run_branching(engine, intro_turns: Sequence[str], questions: Sequence[str], *,
                  sampling: SamplingParams | None = None,
                  force: dict | None = None) -> Trace:
    """A shared conversation prefix, then several follow-ups answered in parallel.

    Each answer sees the shared history plus its own question only; the
    questions all sit at the same offset right after the history.
    """
    sp = _sp(sampling)
    run = _Run(engine, "branching", force)
    history: list[str] = []
    for i, text in enumerate(intro_turns, start=1):
        history.append(run.prefill(f"u{i}", f"User: {text}", parents=history))
        history.append(run.decode(f"a{i}", "Assistant:", parents=history, sampling=sp))
    qnames = run.prefill_parallel(
        "questions",
        [(f"q{i}", f"User: {q}") for i, q in enumerate(questions, start=1)],
        parents=history)
    run.decode_parallel("answers", [
        (f"ans{i}", DecodeCall("Assistant:", run.resolve(history + [qn]), sampling=sp))
        for i, qn in enumerate(qnames, start=1)])
    return run.trace


def run_doc_qa(engine, docs: Sequence[str], question: str, selected: Sequence[int], *,
               sampling: SamplingParams | None = None,
               force: dict | None = None) -> Trace:
    """Documents encoded once in isolation, then stitched per query.

    The answer attends only the selected documents and the question,
    repositioned to consecutive offsets at decode time.
    """
    sp = _sp(sampling)
    run = _Run(engine, "doc_qa", force)
    dnames = run.prefill_parallel(
        "docs", [(f"doc{i}", d) for i, d in enumerate(docs, start=1)])
    q = run.prefill("q", f"Question: {question}")
    picked = [dnames[i] for i in selected]
    run.decode("answer", "Answer:", parents=picked + [q], sampling=sp)
    return run.trace


def run_multiqa(engine, questions: Sequence[str], *, topology: str = "parallel",
                sampling: SamplingParams | None = None,
                force: dict | None = None) -> Trace:
    """One answer over several questions that share a system prompt.

    topology "chained": each question sees all previous ones (re-encoding
    equivalent). "serial": questions encoded independently, laid out one
    after another for the answer. "parallel": questions encoded in one
    batch and left overlapped at the same offset for the answer.
    """
    if topology not in ("chained", "serial", "parallel"):
        raise ValueError(f"unknown multiqa topology {topology!r}")
    sp = _sp(sampling)
    run = _Run(engine, f"multiqa_{topology}", force)
    sys = run.prefill("sys", "System: answer every question below in one go.")
    items = [(f"q{i}", f"Q{i}: {q}") for i, q in enumerate(questions, start=1)]
    if topology == "chained":
        qnames = []
        for name, content in items:
            qnames.append(run.prefill(name, content, parents=[sys] + qnames))
    elif topology == "serial":
        qnames = [run.prefill(name, content, parents=[sys]) for name, content in items]
    else:
        qnames = run.prefill_parallel("questions", items, parents=[sys])
    if topology == "parallel":
        base = run.length(sys)
        offsets = [0] + [base] * len(qnames)
        new_offset = base + max(run.length(q) for q in qnames)
        run.decode("answer", "Answers:", parents=[sys] + qnames, sampling=sp,
                   offsets=offsets, new_offset=new_offset)
    else:
        run.decode("answer", "Answers:", parents=[sys] + qnames, sampling=sp)
    return run.trace


def run_tot(engine, question: str, *, n_branches: int = 4, n_voters: int = 4,
            sampling: SamplingParams | None = None,
            force: dict | None = None) -> Trace:
    """Tree of thoughts: branch, vote, finish from the winning branch."""
    sp = _sp(sampling)
    run = _Run(engine, "tot", force)
    sys_cot = run.prefill("sys_cot", "System: work the problem out step by step.")
    sys_vote = run.prefill(
        "sys_vote", "System: vote for the best numbered attempt; answer with its number.")
    sys_solve = run.prefill("sys_solve", "System: state the final answer cleanly.")
    q = run.prefill("q", f"Question: {question}")
    bnames = run.decode_parallel("branches", [
        (f"b{i}", DecodeCall(f"Attempt {i}:", run.resolve([sys_cot, q]), sampling=sp))
        for i in range(1, n_branches + 1)])
    vnames = run.decode_parallel("votes", [
        (f"v{i}", DecodeCall(f"Vote {i}:", run.resolve([sys_vote, q] + bnames),
                             sampling=sp))
        for i in range(1, n_voters + 1)])
    winner = parse_best([run.reply(v) for v in vnames], n_branches)
    run.decode("final", "Final answer:", parents=[sys_solve, q, bnames[winner]],
               sampling=sp)
    run.trace.meta["winner"] = winner
    return run.trace


def run_madpar(engine, question: str, *, n_agents: int = 3, n_rounds: int = 3,
               sampling: SamplingParams | None = None,
               force: dict | None = None) -> Trace:
    """Multi-agent debate, simultaneous-talk flavor.

    Each round, every agent speaks in parallel, seeing the system prompt,
    the question, and the other agents' previous-round messages. All calls
    in a round must agree on shared-parent offsets, so the previous round
    is laid out once (consecutively after the question) and every call
    addresses it with those explicit offsets.
    """
    sp = _sp(sampling)
    run = _Run(engine, "madpar", force)
    sys = run.prefill("sys", "System: debate the question with the other agents.")
    q = run.prefill("q", f"Question: {question}")
    base = run.length(sys) + run.length(q)
    prev: list[str] = []
    for r in range(1, n_rounds + 1):
        placed: dict[str, int] = {}
        cursor = base
        for name in prev:
            placed[name] = cursor
            cursor += run.length(name)
        calls = []
        for i in range(1, n_agents + 1):
            others = [nm for j, nm in enumerate(prev) if j != i - 1]
            parents = [sys, q] + others
            offsets = [0, run.length(sys)] + [placed[nm] for nm in others]
            calls.append((f"a{i}r{r}", DecodeCall(
                f"Agent {i}:", run.resolve(parents), offsets=offsets,
                new_offset=cursor, sampling=sp)))
        prev = run.decode_parallel(f"round{r}", calls)
    run.trace.meta["consensus"] = parse_consensus([run.reply(nm) for nm in prev])
    return run.trace


def run_maditer(engine, question: str, *, n_rounds: int = 3, chain_mode: bool = False,
                sampling: SamplingParams | None = None,
                sys_prompts: dict[str, str] | None = None,
                force: dict | None = None) -> Trace:
    """Multi-agent debate, turn-taking flavor with a moderator.

    Affirmative, negative, and moderator speak in order each round; the
    moderator's verdicts join the shared context and a STOP verdict ends
    the debate. Each speaker has its own system prompt spliced in front of
    the shared context; chain_mode instead uses one combined system prompt
    and full-history parents (the re-encoding-equivalent regime).
    """
    sp = _sp(sampling)
    roles = ("aff", "neg", "mod")
    headers = {"aff": "Affirmative:", "neg": "Negative:", "mod": "Moderator:"}
    prompts = dict(sys_prompts or {
        "aff": "System: argue for the proposal.",
        "neg": "System: argue against the proposal.",
        "mod": "System: weigh both sides; say STOP when the debate is settled.",
    })
    run = _Run(engine, "maditer_chain" if chain_mode else "maditer", force)
    stopped = None
    if chain_mode:
        combined = " ".join(prompts[r] for r in roles)
        history = [run.prefill("sys", combined)]
        history.append(run.prefill("q", f"Question: {question}", parents=history))
        for r in range(1, n_rounds + 1):
            for role in roles:
                name = run.decode(f"{role}{r}", headers[role], parents=history,
                                  sampling=sp)
                history.append(name)
                if role == "mod" and parse_stop(run.reply(name)):
                    stopped = r
                    break
            if stopped:
                break
    else:
        sys_names = {role: run.prefill(f"sys_{role}", prompts[role]) for role in roles}
        context = [run.prefill("q", f"Question: {question}")]
        for r in range(1, n_rounds + 1):
            for role in roles:
                name = run.decode(f"{role}{r}", headers[role],
                                  parents=[sys_names[role]] + context, sampling=sp)
                context.append(name)
                if role == "mod" and parse_stop(run.reply(name)):
                    stopped = r
                    break
            if stopped:
                break
    run.trace.meta["stopped_round"] = stopped
    return run.trace


def run_bsm(engine, concepts: Sequence[str], *, topology: str = "parallel",
            sampling: SamplingParams | None = None,
            force: dict | None = None) -> Trace:
    """Branch-solve-merge: split a task, solve halves in parallel, merge."""
    if topology not in ("serial", "parallel"):
        raise ValueError(f"unknown bsm topology {topology!r}")
    sp = _sp(sampling)
    run = _Run(engine, f"bsm_{topology}", force)
    sys_branch = run.prefill(
        "sys_branch", "System: split the concept list into two groups, one per line.")
    sys_solve = run.prefill(
        "sys_solve", "System: write a short story that uses every concept given.")
    sys_merge = run.prefill(
        "sys_merge", "System: merge the two stories into one coherent story.")
    cmsg = run.prefill("concepts", "Concepts: " + ", ".join(concepts))
    branch = run.decode("branch", "Groups:", parents=[sys_branch, cmsg], sampling=sp)
    g1, g2 = parse_groups(run.reply(branch), concepts)
    run.trace.meta["groups"] = [g1, g2]
    gnames = run.prefill_parallel("groups", [
        ("g1", "Concepts: " + ", ".join(g1)),
        ("g2", "Concepts: " + ", ".join(g2))])
    snames = run.decode_parallel("solves", [
        (f"s{i}", DecodeCall(f"Story {i}:", run.resolve([sys_solve, gn]), sampling=sp))
        for i, gn in enumerate(gnames, start=1)])
    if topology == "parallel":
        base = run.length(sys_merge)
        run.decode("merge", "Merged story:", parents=[sys_merge] + snames, sampling=sp,
                   offsets=[0, base, base],
                   new_offset=base + max(run.length(s) for s in snames))
    else:
        run.decode("merge", "Merged story:", parents=[sys_merge] + snames, sampling=sp)
    return run.trace


WORKFLOWS = {
    "conversation": run_conversation,
    "branching": run_branching,
    "doc_qa": run_doc_qa,
    "multiqa": run_multiqa,
    "tot": run_tot,
    "madpar": run_madpar,
    "maditer": run_maditer,
    "bsm": run_bsm,
}
