import pytest

from choreo.baseline import BaselineEngine
from choreo.bench import run_pair
from choreo.engine import Engine, SamplingParams
from choreo.script import diff_traces
from choreo.workflows import (
    WORKFLOWS,
    first_digit_run,
    parse_best,
    parse_consensus,
    parse_groups,
    parse_stop,
    run_branching,
    run_bsm,
    run_conversation,
    run_doc_qa,
    run_maditer,
    run_madpar,
    run_multiqa,
    run_tot,
)

SP = SamplingParams(max_tokens=5)


# -- parsers ------------------------------------------------------------------------


def test_first_digit_run():
    assert first_digit_run("pick 42, not 7") == 42
    assert first_digit_run("no digits") is None


def test_parse_best():
    assert parse_best(["I vote 2", "2!", "maybe 3"], 3) == 1
    assert parse_best(["junk", "nothing"], 3) == 0  # invalid votes go to choice 1
    assert parse_best(["9"], 3) == 0  # out of range goes to choice 1
    assert parse_best(["1", "2"], 2) == 0  # tie resolves low


def test_parse_consensus():
    assert parse_consensus(["x 5", "5 here", "7"]) == "5"
    assert parse_consensus(["5", "7"]) == "5"  # tie: smallest value
    assert parse_consensus(["no", "digits"]) == ""


def test_parse_stop():
    assert parse_stop("that settles it, STOP")
    assert not parse_stop("keep going")


def test_parse_groups():
    g1, g2 = parse_groups("cat, hat\nrobot, lake", ["cat", "robot", "hat", "lake"])
    assert g1 == ["cat", "hat"]
    assert g2 == ["robot", "lake"]
    # unmentioned items balance onto the shorter group
    g1, g2 = parse_groups("cat\nrobot", ["cat", "robot", "moon"])
    assert "moon" in g1 + g2
    # text without two lines balances items alternately
    g1, g2 = parse_groups("no structure here", ["a", "b", "c", "d"])
    assert (g1, g2) == (["a", "c"], ["b", "d"])
    # a split that leaves one side empty falls back to halving
    g1, g2 = parse_groups("a b c d\nnothing here", ["a", "b", "c", "d"])
    assert (g1, g2) == (["a", "b"], ["c", "d"])


def test_registry_covers_all_workflows():
    assert set(WORKFLOWS) == {"conversation", "branching", "doc_qa", "multiqa",
                              "tot", "madpar", "maditer", "bsm"}


def test_unknown_topologies_rejected(small_weights):
    with pytest.raises(ValueError):
        run_multiqa(Engine(small_weights), ["q"], topology="ring")
    with pytest.raises(ValueError):
        run_bsm(Engine(small_weights), ["a", "b"], topology="star")


# -- each workflow runs on both engines ------------------------------------------------


def _engines(weights):
    return [Engine(weights), BaselineEngine(weights)]


def test_conversation_shape_and_forcing(small_weights):
    for engine in _engines(small_weights):
        trace = run_conversation(engine, ["hello", "again"], sampling=SP,
                                 force={"a1": [65, 66]})
        assert [m.name for m in trace.messages()] == ["u1", "a1", "u2", "a2"]
        assert trace.message("a1").generated == [65, 66]
        assert trace.message("u2").text == "User: again"


def test_branching_shape(small_weights):
    for engine in _engines(small_weights):
        trace = run_branching(engine, ["hi"], ["q one?", "q two?", "q three?"],
                              sampling=SP)
        names = [m.name for m in trace.messages()]
        assert names == ["u1", "a1", "q1", "q2", "q3", "ans1", "ans2", "ans3"]
        assert trace.steps[-1].op == "decode_parallel"


def test_doc_qa_shape(small_weights):
    for engine in _engines(small_weights):
        trace = run_doc_qa(engine, ["alpha doc", "beta doc", "gamma doc"],
                           "which?", [2, 0], sampling=SP)
        assert trace.message("answer").text.startswith("Answer:")
        assert trace.steps[0].op == "prefill_parallel"


@pytest.mark.parametrize("topology", ["chained", "serial", "parallel"])
def test_multiqa_topologies(small_weights, topology):
    for engine in _engines(small_weights):
        trace = run_multiqa(engine, ["one?", "two?"], topology=topology, sampling=SP)
        assert trace.script_name == f"multiqa_{topology}"
        assert trace.message("answer").generated is not None


def test_tot_meta_winner(small_weights):
    for engine in _engines(small_weights):
        trace = run_tot(engine, "2 + 2?", n_branches=3, n_voters=3, sampling=SP,
                        force={"v1": " 2", "v2": " 2", "v3": " 3"})
        assert trace.meta["winner"] == 1
        final_step = trace.steps[-1]
        assert final_step.name == "final"


def test_madpar_meta_consensus(small_weights):
    for engine in _engines(small_weights):
        trace = run_madpar(engine, "pick a digit", n_agents=2, n_rounds=2, sampling=SP,
                           force={"a1r2": " 7 ok", "a2r2": "is 7."})
        assert trace.meta["consensus"] == "7"
        names = [m.name for m in trace.messages()]
        assert names == ["sys", "q", "a1r1", "a2r1", "a1r2", "a2r2"]


def test_maditer_stop_ends_early(small_weights):
    for engine in _engines(small_weights):
        trace = run_maditer(engine, "is it so?", n_rounds=3, sampling=SP,
                            force={"mod1": " STOP"})
        assert trace.meta["stopped_round"] == 1
        assert [m.name for m in trace.messages()][-3:] == ["aff1", "neg1", "mod1"]
        full = run_maditer(engine.__class__(small_weights), "is it so?",
                           n_rounds=2, sampling=SP, force={"mod1": "continue"})
        assert full.meta["stopped_round"] is None
        assert [m.name for m in full.messages()][-1] == "mod2"


def test_bsm_groups_partition_concepts(small_weights):
    concepts = ["cat", "robot", "hat", "lake"]
    for engine in _engines(small_weights):
        trace = run_bsm(engine, concepts, sampling=SP,
                        force={"branch": " cat, hat\n robot, lake"})
        g1, g2 = trace.meta["groups"]
        assert sorted(g1 + g2) == sorted(concepts)
        assert trace.message("merge").text.startswith("Merged story:")


# -- chain regime: free runs agree across engines ---------------------------------------


@pytest.mark.parametrize("case", ["conversation", "multiqa_chained", "maditer_chain"])
def test_chain_workflows_agree_without_forcing(small_weights, case):
    def run(engine):
        if case == "conversation":
            return run_conversation(engine, ["hello", "tell me more"], sampling=SP)
        if case == "multiqa_chained":
            return run_multiqa(engine, ["one?", "two?"], topology="chained", sampling=SP)
        return run_maditer(engine, "so?", n_rounds=2, chain_mode=True, sampling=SP)

    ta = run(Engine(small_weights, record_logits=True))
    tb = run(BaselineEngine(small_weights, record_logits=True))
    assert diff_traces(ta, tb, compare_logits=True, atol=1e-9) == []


# -- forced-identical replay across engines ---------------------------------------------


@pytest.mark.parametrize("name,fn,kwargs", [
    ("conversation", run_conversation, {"turns": ["hi", "more"]}),
    ("branching", run_branching, {"intro_turns": ["hi"], "questions": ["a?", "b?"]}),
    ("doc_qa", run_doc_qa, {"docs": ["d one", "d two", "d three"],
                            "question": "pick", "selected": [1, 2]}),
    ("multiqa_serial", run_multiqa, {"questions": ["a?", "b?"], "topology": "serial"}),
    ("multiqa_parallel", run_multiqa, {"questions": ["a?", "b?"],
                                       "topology": "parallel"}),
    ("tot", run_tot, {"question": "sum?", "n_branches": 2, "n_voters": 2}),
    ("madpar", run_madpar, {"question": "sum?", "n_agents": 2, "n_rounds": 2}),
    ("maditer", run_maditer, {"question": "so?", "n_rounds": 2}),
    ("bsm_serial", run_bsm, {"concepts": ["cat", "hat", "sun"], "topology": "serial"}),
    ("bsm_parallel", run_bsm, {"concepts": ["cat", "hat", "sun"],
                               "topology": "parallel"}),
])
def test_forced_replay_is_identical(small_weights, name, fn, kwargs):
    trace_b, trace_c = run_pair(fn, small_weights, sampling=SP, **kwargs)
    assert trace_b.engine == "baseline"
    assert trace_c.engine == "choreo"
    assert diff_traces(trace_b, trace_c) == []
    assert trace_c.meta == trace_b.meta
