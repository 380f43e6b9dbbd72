import json

import pytest

from choreo.cli import main
from choreo.script import Trace
from tests.conftest import SMALL_CONFIG

CHAIN_SCRIPT = {
    "name": "cli-chain",
    "sampling": {"max_tokens": 4},
    "steps": [
        {"name": "sys", "op": "prefill", "content": "Be brief."},
        {"name": "a1", "op": "decode", "header": "A:", "parents": ["sys"]},
        {"name": "u1", "op": "prefill", "content": "more", "parents": ["sys", "a1"]},
        {"name": "a2", "op": "decode", "header": "A:", "parents": ["sys", "a1", "u1"]},
    ],
}


@pytest.fixture()
def small_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG.to_dict()))
    return path


@pytest.fixture()
def script_file(tmp_path):
    path = tmp_path / "chain.json"
    path.write_text(json.dumps(CHAIN_SCRIPT))
    return path


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["run"]) == 2


def test_weights_init_is_deterministic(tmp_path, small_config_file, capsys):
    out1, out2 = tmp_path / "w1.bin", tmp_path / "w2.bin"
    assert main(["weights", "init", "--config", str(small_config_file),
                 "--out", str(out1)]) == 0
    assert main(["weights", "init", "--config", str(small_config_file),
                 "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert "parameters" in capsys.readouterr().out


def test_run_and_diff_across_engines(tmp_path, small_config_file, script_file, capsys):
    ta, tb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--trace", str(ta)]) == 0
    out = capsys.readouterr().out
    assert "step 0 sys [prefill]" in out
    assert "total: prefill_flops=" in out
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--engine", "baseline", "--trace", str(tb)]) == 0
    capsys.readouterr()
    assert main(["diff", str(ta), str(tb)]) == 0
    assert "traces equivalent" in capsys.readouterr().out


def test_diff_reports_differences(tmp_path, small_config_file, script_file, capsys):
    ta = tmp_path / "a.jsonl"
    main(["run", str(script_file), "--config", str(small_config_file),
          "--trace", str(ta)])
    trace = Trace.from_jsonl(ta)
    trace.steps[1].messages[0].text += "!"
    tb = tmp_path / "b.jsonl"
    trace.to_jsonl(tb)
    capsys.readouterr()
    assert main(["diff", str(ta), str(tb)]) == 1
    out = capsys.readouterr().out
    assert "difference(s)" in out


def test_replay_forcing_round_trip(tmp_path, small_config_file, script_file, capsys):
    ta, tb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--trace", str(ta)]) == 0
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--engine", "baseline", "--force-from", str(ta),
                 "--trace", str(tb)]) == 0
    capsys.readouterr()
    assert main(["diff", str(ta), str(tb)]) == 0


def test_cache_dump_writes_metadata(tmp_path, small_config_file, script_file):
    dump = tmp_path / "cache.jsonl"
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--cache-dump", str(dump)]) == 0
    rows = [json.loads(line) for line in dump.read_text().splitlines()]
    assert rows[0]["physical_index"] == 0
    assert {"m", "j", "token_id"} <= set(rows[0])


def test_engine_flag_mismatches(tmp_path, small_config_file, script_file):
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--no-prefix-cache"]) == 2
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--engine", "baseline", "--cache-dump",
                 str(tmp_path / "x.jsonl")]) == 2


def test_bad_inputs_exit_2(tmp_path, small_config_file):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["run", str(bad), "--config", str(small_config_file)]) == 2
    assert main(["run", str(tmp_path / "missing.json"),
                 "--config", str(small_config_file)]) == 2
    assert main(["diff", str(tmp_path / "nope.jsonl"),
                 str(tmp_path / "nope2.jsonl")]) == 2


def test_engine_error_exits_3(tmp_path, small_config_file):
    script = dict(CHAIN_SCRIPT)
    script["steps"] = [{"name": "big", "op": "prefill", "content": "x" * 400}]
    path = tmp_path / "big.json"
    path.write_text(json.dumps(script))
    assert main(["run", str(path), "--config", str(small_config_file)]) == 3


def test_report_output(tmp_path, small_config_file, script_file):
    report = tmp_path / "report.json"
    assert main(["run", str(script_file), "--config", str(small_config_file),
                 "--report", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["engine"] == "choreo"
    assert payload["total_flops"] == payload["prefill_flops"] + payload["decode_flops"]


def test_bench_smoke(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench", "--workflow", "tot", "--seeds", "1",
                 "--branches", "2", "--voters", "2", "--out", str(out)]) == 0
    assert "pooled prefill ratio" in capsys.readouterr().out
    payload = json.loads(out.read_text())
    assert payload["pooled_prefill_ratio"] > 1.0
    assert main(["bench", "--workflow", "madpar", "--seeds", "1",
                 "--branches", "4"]) == 2  # tot-only flag
