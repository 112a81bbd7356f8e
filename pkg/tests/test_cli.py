import filecmp
import importlib.util
import json

import pytest

from crag.cli import main

from conftest import FIXTURES, ROOT, read_jsonl

CONFIG = str(FIXTURES / "eval50" / "config.yaml")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_command_is_a_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "invalid choice" in err


def test_invalid_config_exits_3_with_json_errors(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--config", CONFIG, "--output-dir", str(tmp_path), "--top-k", "0")
    assert code == 3
    payload = json.loads(err)
    assert payload["category"] == "config"
    assert payload["errors"][0]["field"] == "retrieval.top_k"


def test_missing_input_file_exits_3(capsys, tmp_path):
    code, _, err = run(capsys, "index", "--corpus", str(tmp_path / "none.jsonl"), "--output-dir", str(tmp_path))
    assert code == 3 and "corpus" in err


def test_bad_data_exits_4(capsys, tmp_path):
    bad = tmp_path / "c.jsonl"
    bad.write_text("{oops\n")
    code, _, err = run(capsys, "index", "--corpus", str(bad), "--output-dir", str(tmp_path / "o"))
    assert code == 4 and json.loads(err)["category"] == "input"


def test_missing_credential_exits_5(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("CRAG_API_KEY", raising=False)
    code, _, err = run(
        capsys, "gen-demos", "--config", CONFIG, "--output-dir", str(tmp_path),
        "--backend", "http", "--endpoint", "http://127.0.0.1:9/v1", "--model", "m",
    )
    # per-item failures are recorded rather than fatal
    assert code == 0
    demos = read_jsonl(tmp_path / "demos.jsonl")
    assert all(d["error"]["stage"] == "generation" and "authentication" in d["error"]["message"] for d in demos)


def test_eval_writes_reports_and_run_config(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--config", CONFIG, "--output-dir", str(tmp_path))
    assert code == 0 and "80.0" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["accuracy"] == 0.8 and report["n"] == 50
    assert report["seeds"]["perturbation"] == 7
    run_config = json.loads((tmp_path / "run_config.json").read_text())
    assert run_config["retrieval"]["top_k"] == 5
    # the saved config reproduces the run
    code, _, _ = run(capsys, "eval", "--config", str(tmp_path / "run_config.json"), "--output-dir", str(tmp_path / "again"))
    assert code == 0
    assert (tmp_path / "again" / "report.json").read_bytes() == (tmp_path / "report.json").read_bytes()
    items = read_jsonl(tmp_path / "report.per_item.jsonl")
    assert len(items) == 50 and all(i["config_fingerprint"] == report["config_fingerprint"] for i in items)


def test_overrides_change_the_fingerprint(capsys, tmp_path):
    run(capsys, "eval", "--config", CONFIG, "--output-dir", str(tmp_path / "a"))
    run(capsys, "eval", "--config", CONFIG, "--output-dir", str(tmp_path / "b"), "--set", "generation.max_new_tokens=64")
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a["config_fingerprint"] != b["config_fingerprint"]
    assert b["settings"]["generation"]["max_new_tokens"] == 64


def test_demo_workflow(capsys, tmp_path):
    out = str(tmp_path)
    for cmd in ("gen-demos", "filter", "funnel", "export"):
        code, _, err = run(capsys, cmd, "--config", CONFIG, "--output-dir", out)
        assert code == 0, err
    funnel = json.loads((tmp_path / "funnel.json").read_text())
    assert funnel["total"] == 50
    assert funnel["total"] >= funnel["stage1"] >= funnel["stage2"] >= funnel["used"]
    sft = read_jsonl(tmp_path / "sft.jsonl")
    assert len(sft) == funnel["used"]
    assert all(r["meta"]["provenance"] == "clean" for r in sft)


def test_export_with_corruption(capsys, tmp_path):
    out = str(tmp_path)
    for cmd in ("gen-demos", "filter"):
        run(capsys, cmd, "--config", CONFIG, "--output-dir", out)
    code, _, err = run(capsys, "export", "--config", CONFIG, "--output-dir", out, "--corrupt", "misleading")
    assert code == 0, err
    assert {r["meta"]["provenance"] for r in read_jsonl(tmp_path / "sft.jsonl")} == {"misleading"}


def test_index_retrieve_and_replay_rankings(capsys, tmp_path):
    out = str(tmp_path)
    assert run(capsys, "index", "--config", CONFIG, "--output-dir", out)[0] == 0
    assert run(capsys, "retrieve", "--config", CONFIG, "--output-dir", out)[0] == 0
    code, _, _ = run(
        capsys, "eval", "--config", CONFIG, "--output-dir", str(tmp_path / "ext"),
        "--scorer", "external-adapter", "--rankings", str(tmp_path / "rankings.jsonl"),
    )
    assert code == 0
    assert json.loads((tmp_path / "ext" / "report.json").read_text())["accuracy"] == 0.8


def test_perturb_eval_and_cross_task(capsys, tmp_path):
    code, out, err = run(capsys, "perturb-eval", "--config", CONFIG, "--output-dir", str(tmp_path), "--train-task", "nq")
    assert code == 0, err
    summary = json.loads((tmp_path / "perturb_summary.json").read_text())
    assert set(summary["perturbations"]) == {"shuffle", "noise"}
    assert summary["clean_accuracy"] == 0.8
    code, out, _ = run(
        capsys, "cross-task", "--output-dir", str(tmp_path), "--reports", str(tmp_path / "perturb" / "none.json"),
    )
    assert code == 0 and "nq" in out


def test_fixtures_regenerate_byte_identically(tmp_path):
    spec = importlib.util.spec_from_file_location("build_fixtures", ROOT / "scripts" / "build_fixtures.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    mod.build_all(tmp_path)
    for rel in ["annotation_funnel.jsonl.gz", "funnel_expected.json", *(f"eval50/{n}" for n in (
        "corpus.jsonl", "dataset.jsonl", "mock_script.jsonl", "expected.json", "config.yaml"))]:
        assert filecmp.cmp(tmp_path / rel, FIXTURES / rel, shallow=False), rel
