"""Fixture builders: example scripts, reference masks, golden artifacts.

Everything under fixtures/ is generated from this module by
scripts/regen_fixtures.py, which writes each file twice and refuses to
proceed if the two renders differ (NondeterminismError). manifest.json
lists every fixture with its sha256 and the builder that produced it;
tests verify hashes and that no unlisted file sits in fixtures/.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
from pathlib import Path

from .config import DEFAULT_CONFIG
from .engine import Engine
from .errors import NondeterminismError
from .model import init_weights, save_weights
from .script import run_script, validate_script
from .tokenizer import encode_text, frame_header, frame_message

# -- reference visibility masks ---------------------------------------------------
#
# Parallel prefill: three cached parents of 3 tokens each (P0 at columns 0-2,
# P1 at 3-5, P2 at 6-8); the batch prefills X (parents {P0}) and Y (parents
# {P1, P2}), 3 tokens each (batch columns 9-11 and 12-14). Each row sees its
# parents' cache columns in full, its own batch columns causally, and nothing
# of its batch peer.

PREFILL_MASK = [
    [1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0],
    [1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0],
    [1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0],
    [0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 0, 0],
    [0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0],
    [0, 0, 0, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1],
]

# Parallel decode, mid-flight: parents P0 (columns 0-1), P1 (2-3), P2 (4-5),
# then the first decoded token of D0, D1, D2 interleaved at columns 6, 7, 8.
# The batch holds each message's second token; row D_i sees P_i, its own
# first token, and itself.

DECODE_MASK = [
    [1, 1, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0],
    [0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 1, 0],
    [0, 0, 0, 0, 1, 1, 0, 0, 1, 0, 0, 1],
]


def build_prefill_mask_fixture() -> dict:
    return {
        "description": "parallel prefill of X (parents P0) and Y (parents P1,P2)",
        "cached": [{"name": "P0", "text": "a"}, {"name": "P1", "text": "b"},
                   {"name": "P2", "text": "c"}],
        "batch": [{"name": "X", "text": "x", "parents": ["P0"]},
                  {"name": "Y", "text": "y", "parents": ["P1", "P2"]}],
        "mask": PREFILL_MASK,
    }


def build_decode_mask_fixture() -> dict:
    return {
        "description": ("second step of a three-way parallel decode; each D_i "
                        "has parents {P_i} and one interleaved token cached"),
        "cached_parents": [{"name": f"P{i}", "text": ""} for i in range(3)],
        "decode_headers": ["A", "B", "C"],
        "mask": DECODE_MASK,
    }


# -- example scripts ---------------------------------------------------------------


def _plen(text: str) -> int:
    return len(frame_message(text))


def _dlen(header: str, forced_text: str) -> int:
    return len(frame_header(header)) + len(encode_text(forced_text))


def build_conversation_script() -> dict:
    return {
        "name": "conversation",
        "description": "three user/assistant turns; every message sees full history",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "u1", "op": "prefill", "content": "User: hello there"},
            {"name": "a1", "op": "decode", "header": "Assistant:", "parents": ["u1"]},
            {"name": "u2", "op": "prefill", "content": "User: tell me more",
             "parents": ["u1", "a1"]},
            {"name": "a2", "op": "decode", "header": "Assistant:",
             "parents": ["u1", "a1", "u2"]},
            {"name": "u3", "op": "prefill", "content": "User: one last thing",
             "parents": ["u1", "a1", "u2", "a2"]},
            {"name": "a3", "op": "decode", "header": "Assistant:",
             "parents": ["u1", "a1", "u2", "a2", "u3"]},
        ],
    }


def build_branching_script() -> dict:
    return {
        "name": "branching",
        "description": "shared intro, two follow-ups answered in parallel",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "u1", "op": "prefill", "content": "User: set the scene"},
            {"name": "a1", "op": "decode", "header": "Assistant:", "parents": ["u1"]},
            {"name": "questions", "op": "prefill_parallel", "calls": [
                {"name": "q1", "content": "User: now option one?",
                 "parents": ["u1", "a1"]},
                {"name": "q2", "content": "User: or option two?",
                 "parents": ["u1", "a1"]},
            ]},
            {"name": "answers", "op": "decode_parallel", "calls": [
                {"name": "ans1", "header": "Assistant:",
                 "parents": ["u1", "a1", "q1"]},
                {"name": "ans2", "header": "Assistant:",
                 "parents": ["u1", "a1", "q2"]},
            ]},
        ],
    }


def build_doc_qa_script() -> dict:
    return {
        "name": "doc_qa",
        "description": "documents encoded once in isolation, two stitched per query",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "docs", "op": "prefill_parallel", "calls": [
                {"name": "doc1", "content": "Doc: the cache is append only."},
                {"name": "doc2", "content": "Doc: positions are logical."},
                {"name": "doc3", "content": "Doc: masks gate visibility."},
            ]},
            {"name": "q", "op": "prefill",
             "content": "Question: how are positions handled?"},
            {"name": "answer", "op": "decode", "header": "Answer:",
             "parents": ["doc1", "doc3", "q"]},
        ],
    }


def build_multiqa_script(topology: str) -> dict:
    sys_text = "System: answer every question below in one go."
    q1_text, q2_text = "Q1: what is cached?", "Q2: what is rotated?"
    steps = [{"name": "sys", "op": "prefill", "content": sys_text}]
    if topology == "chained":
        steps += [
            {"name": "q1", "op": "prefill", "content": q1_text, "parents": ["sys"]},
            {"name": "q2", "op": "prefill", "content": q2_text,
             "parents": ["sys", "q1"]},
        ]
    elif topology == "serial":
        steps += [
            {"name": "q1", "op": "prefill", "content": q1_text, "parents": ["sys"]},
            {"name": "q2", "op": "prefill", "content": q2_text, "parents": ["sys"]},
        ]
    else:
        steps.append({"name": "questions", "op": "prefill_parallel", "calls": [
            {"name": "q1", "content": q1_text, "parents": ["sys"]},
            {"name": "q2", "content": q2_text, "parents": ["sys"]},
        ]})
    answer = {"name": "answer", "op": "decode", "header": "Answers:",
              "parents": ["sys", "q1", "q2"]}
    if topology == "parallel":
        base = _plen(sys_text)
        answer["offsets"] = [0, base, base]
        answer["new_offset"] = base + max(_plen(q1_text), _plen(q2_text))
    steps.append(answer)
    return {
        "name": f"multiqa_{topology}",
        "description": f"two questions, one answer; {topology} question layout",
        "sampling": {"max_tokens": 16},
        "steps": steps,
    }


def build_tot_script() -> dict:
    # votes are forced so the winning branch (here b2) is static
    return {
        "name": "tot",
        "description": "three attempts, three forced votes, finish from the winner",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "sys_cot", "op": "prefill",
             "content": "System: work the problem out step by step."},
            {"name": "sys_vote", "op": "prefill",
             "content": "System: vote for the best numbered attempt; answer with its number."},
            {"name": "sys_solve", "op": "prefill",
             "content": "System: state the final answer cleanly."},
            {"name": "q", "op": "prefill", "content": "Question: what is 6 times 7?"},
            {"name": "branches", "op": "decode_parallel", "calls": [
                {"name": "b1", "header": "Attempt 1:", "parents": ["sys_cot", "q"]},
                {"name": "b2", "header": "Attempt 2:", "parents": ["sys_cot", "q"]},
                {"name": "b3", "header": "Attempt 3:", "parents": ["sys_cot", "q"]},
            ]},
            {"name": "votes", "op": "decode_parallel", "calls": [
                {"name": "v1", "header": "Vote 1:", "force": " 2",
                 "parents": ["sys_vote", "q", "b1", "b2", "b3"]},
                {"name": "v2", "header": "Vote 2:", "force": " 2",
                 "parents": ["sys_vote", "q", "b1", "b2", "b3"]},
                {"name": "v3", "header": "Vote 3:", "force": " 3",
                 "parents": ["sys_vote", "q", "b1", "b2", "b3"]},
            ]},
            {"name": "final", "op": "decode", "header": "Final answer:",
             "parents": ["sys_solve", "q", "b2"]},
        ],
    }


def build_madpar_script() -> dict:
    # forced replies keep message lengths, and so the explicit shared
    # offsets, static across engines
    sys_text = "System: debate the question with the other agents."
    q_text = "Question: is the answer 42?"
    replies = {
        "a1r1": " I say 42 because the problem demands it.",
        "a2r1": " I lean 41 but could be moved by argument.",
        "a1r2": " Holding at 42; the other case fell apart.",
        "a2r2": " Conceding: 42 fits every constraint given.",
    }
    base = _plen(sys_text) + _plen(q_text)
    len_r1 = {n: _dlen("Agent 1:" if n == "a1r1" else "Agent 2:", replies[n])
              for n in ("a1r1", "a2r1")}
    off_a1r1 = base
    off_a2r1 = base + len_r1["a1r1"]
    round2_new = base + len_r1["a1r1"] + len_r1["a2r1"]
    return {
        "name": "madpar",
        "description": "two agents, two simultaneous rounds, all replies forced",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "sys", "op": "prefill", "content": sys_text},
            {"name": "q", "op": "prefill", "content": q_text},
            {"name": "round1", "op": "decode_parallel", "calls": [
                {"name": "a1r1", "header": "Agent 1:", "force": replies["a1r1"],
                 "parents": ["sys", "q"], "offsets": [0, _plen(sys_text)],
                 "new_offset": base},
                {"name": "a2r1", "header": "Agent 2:", "force": replies["a2r1"],
                 "parents": ["sys", "q"], "offsets": [0, _plen(sys_text)],
                 "new_offset": base},
            ]},
            {"name": "round2", "op": "decode_parallel", "calls": [
                {"name": "a1r2", "header": "Agent 1:", "force": replies["a1r2"],
                 "parents": ["sys", "q", "a2r1"],
                 "offsets": [0, _plen(sys_text), off_a2r1],
                 "new_offset": round2_new},
                {"name": "a2r2", "header": "Agent 2:", "force": replies["a2r2"],
                 "parents": ["sys", "q", "a1r1"],
                 "offsets": [0, _plen(sys_text), off_a1r1],
                 "new_offset": round2_new},
            ]},
        ],
    }


def build_maditer_script() -> dict:
    ctx = ["q"]
    steps = [
        {"name": "sys_aff", "op": "prefill",
         "content": "System: argue for the proposal."},
        {"name": "sys_neg", "op": "prefill",
         "content": "System: argue against the proposal."},
        {"name": "sys_mod", "op": "prefill",
         "content": "System: weigh both sides; say STOP when the debate is settled."},
        {"name": "q", "op": "prefill", "content": "Question: should we cache more?"},
    ]
    headers = {"aff": "Affirmative:", "neg": "Negative:", "mod": "Moderator:"}
    for r in (1, 2):
        for role in ("aff", "neg", "mod"):
            name = f"{role}{r}"
            steps.append({"name": name, "op": "decode", "header": headers[role],
                          "parents": [f"sys_{role}"] + ctx})
            ctx = ctx + [name]
    return {
        "name": "maditer",
        "description": "turn-taking debate, two fixed rounds, per-role system prompts",
        "sampling": {"max_tokens": 16},
        "steps": steps,
    }


def build_bsm_script() -> dict:
    return {
        "name": "bsm",
        "description": "forced branch split, parallel solves, serial-layout merge",
        "sampling": {"max_tokens": 16},
        "steps": [
            {"name": "sys_branch", "op": "prefill",
             "content": "System: split the concept list into two groups, one per line."},
            {"name": "sys_solve", "op": "prefill",
             "content": "System: write a short story that uses every concept given."},
            {"name": "sys_merge", "op": "prefill",
             "content": "System: merge the two stories into one coherent story."},
            {"name": "concepts", "op": "prefill",
             "content": "Concepts: cat, hat, robot, lake"},
            {"name": "branch", "op": "decode", "header": "Groups:",
             "force": " cat, hat\n robot, lake",
             "parents": ["sys_branch", "concepts"]},
            {"name": "groups", "op": "prefill_parallel", "calls": [
                {"name": "g1", "content": "Concepts: cat, hat"},
                {"name": "g2", "content": "Concepts: robot, lake"},
            ]},
            {"name": "solves", "op": "decode_parallel", "calls": [
                {"name": "s1", "header": "Story 1:", "parents": ["sys_solve", "g1"]},
                {"name": "s2", "header": "Story 2:", "parents": ["sys_solve", "g2"]},
            ]},
            {"name": "merge", "op": "decode", "header": "Merged story:",
             "parents": ["sys_merge", "s1", "s2"]},
        ],
    }


SCRIPT_BUILDERS = {
    "scripts/conversation.json": build_conversation_script,
    "scripts/branching.json": build_branching_script,
    "scripts/doc_qa.json": build_doc_qa_script,
    "scripts/multiqa_chained.json": lambda: build_multiqa_script("chained"),
    "scripts/multiqa_serial.json": lambda: build_multiqa_script("serial"),
    "scripts/multiqa_parallel.json": lambda: build_multiqa_script("parallel"),
    "scripts/tot.json": build_tot_script,
    "scripts/madpar.json": build_madpar_script,
    "scripts/maditer.json": build_maditer_script,
    "scripts/bsm.json": build_bsm_script,
}


# -- golden artifacts --------------------------------------------------------------


def default_weights_sha256() -> dict:
    """Hash of the serialized default-config weight file (seed 0)."""
    weights = init_weights(DEFAULT_CONFIG)
    with tempfile.NamedTemporaryFile(suffix=".bin") as tmp:
        save_weights(weights, tmp.name)
        digest = hashlib.sha256(Path(tmp.name).read_bytes()).hexdigest()
    return {"config": DEFAULT_CONFIG.to_dict(), "dtype": "float64", "sha256": digest}


def conversation_reference_trace() -> dict:
    """Canonical (timing-stripped) trace of the conversation script."""
    weights = init_weights(DEFAULT_CONFIG)
    engine = Engine(weights, seed=0)
    trace = run_script(engine, build_conversation_script())
    return trace.canonical()


# -- regeneration ------------------------------------------------------------------


def _render(obj: dict) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def build_all() -> dict[str, bytes]:
    """Every fixture file as bytes, keyed by path relative to fixtures/."""
    out: dict[str, bytes] = {}
    for rel, builder in SCRIPT_BUILDERS.items():
        script = builder()
        validate_script(script)
        out[rel] = _render(script)
    out["masks/prefill_parallel.json"] = _render(build_prefill_mask_fixture())
    out["masks/decode_parallel.json"] = _render(build_decode_mask_fixture())
    out["golden/weights_default_seed0.json"] = _render(default_weights_sha256())
    out["golden/conversation_reference.json"] = _render(conversation_reference_trace())
    return out


def regenerate(root: str | Path, *, check_deterministic: bool = True) -> dict:
    """Write all fixtures plus manifest.json under root; returns the manifest."""
    root = Path(root)
    files = build_all()
    if check_deterministic:
        again = build_all()
        bad = [rel for rel in files if files[rel] != again.get(rel)]
        if bad or set(files) != set(again):
            raise NondeterminismError(f"fixture builders are not deterministic: {bad}")
    manifest = {"files": {}}
    for rel, blob in sorted(files.items()):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        manifest["files"][rel] = {
            "sha256": hashlib.sha256(blob).hexdigest(),
            "builder": "choreo.fixtures.build_all",
        }
    (root / "manifest.json").write_bytes(_render(manifest))
    return manifest


def verify(root: str | Path) -> list[str]:
    """Mismatches between fixtures/ contents and manifest.json; [] when clean."""
    root = Path(root)
    problems = []
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return [f"missing {manifest_path}"]
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    listed = set(manifest.get("files", {}))
    on_disk = {str(p.relative_to(root)) for p in root.rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    for rel in sorted(on_disk - listed):
        problems.append(f"unlisted file {rel}")
    for rel in sorted(listed - on_disk):
        problems.append(f"missing file {rel}")
    for rel in sorted(listed & on_disk):
        digest = hashlib.sha256((root / rel).read_bytes()).hexdigest()
        if digest != manifest["files"][rel]["sha256"]:
            problems.append(f"stale file {rel}")
    return problems
