from __future__ import annotations

import json

import pytest

from kgwalk.cli import main
from kgwalk.datasets import fixture_path

CASE = str(fixture_path("case_study.yaml"))


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if out else None)


def test_sample_paths_deterministic(tmp_path, capsys):
    store = str(fixture_path("crw_small.tsv"))
    common = ["--store", store, "--n", "100", "--seed", "7", "--mix", "uniform"]
    common += ["--config", str(tmp_path / "cfg.yaml")]
    (tmp_path / "cfg.yaml").write_text(
        f"walk: {{predicates_file: {fixture_path('crw_small.predicates.txt')}, "
        f"seeds_file: {fixture_path('crw_small.seeds.txt')}, d_min: 2, d_max: 4}}\n")
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert _run(capsys, "sample-paths", *common, "--output", str(a))[0] == 0
    code, summary = _run(capsys, "sample-paths", *common, "--output", str(b))
    assert code == 0 and summary["paths"] == 100
    assert a.read_bytes() == b.read_bytes()


def test_pipeline_end_to_end(tmp_path, capsys):
    out = str(tmp_path)
    code, s = _run(capsys, "synthesize", "--config", CASE, "--out", out)
    assert code == 0 and s["emitted"] >= 1
    assert s["emitted"] + s["dropped"] + s["quarantined"] == s["input"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] and manifest["rng_seed"] == 0

    code, s = _run(capsys, "curate", "--config", CASE, "--out", out, "--input", f"{out}/trajectories.jsonl")
    assert code == 0 and s["accepted"] + s["rejected"] == s["input"]

    code, s = _run(capsys, "rollout", "--config", CASE, "--out", out, "--runs", "2",
                   "--questions", str(fixture_path("case_study.questions.jsonl")))
    assert code == 0 and s["episodes"] == 2 and s["answered"] == 2

    code, s = _run(capsys, "eval", "--config", CASE, "--out", out, "--input", f"{out}/rollouts.jsonl", "--k", "1,2")
    assert code == 0 and s["pass@1"] == 1.0 and "pass@2" in s

    code, s = _run(capsys, "contaminate", "--config", CASE, "--out", out, "--synth", f"{out}/trajectories.jsonl",
                   "--test", f"bench={fixture_path('test_questions.txt')}")
    assert code == 0 and set(s["flagged"]) == {"0.80", "0.85", "0.90"}
    assert (tmp_path / "contamination.txt").read_text().startswith("Threshold | Overall | bench")


def test_eval_reports_pass_at_32(tmp_path, capsys):
    out = str(tmp_path)
    _run(capsys, "rollout", "--config", CASE, "--out", out, "--runs", "32",
         "--questions", str(fixture_path("case_study.questions.jsonl")))
    code, s = _run(capsys, "eval", "--config", CASE, "--out", out, "--input", f"{out}/rollouts.jsonl", "--k", "1,8,32")
    assert code == 0 and {"pass@1", "pass@8", "pass@32"} <= set(s)


def test_load_and_render(tmp_path, capsys):
    code, s = _run(capsys, "load", "--config", CASE, "--out", str(tmp_path))
    assert code == 0 and s["triples"] == 84
    code, s = _run(capsys, "render-sparql", "--kind", "relations_outgoing", "--entity", "m.0ws1946")
    assert code == 0 and "ns:m.0ws1946 ?relation ?tail" in s["query"]


def test_print_config(capsys):
    assert main(["load", "--config", CASE, "--print-config"]) == 0
    assert "max_turns: 10" in capsys.readouterr().out


@pytest.mark.parametrize("argv,code", [
    (["load", "--config", "/nonexistent.yaml"], 2),
    (["eval", "--config", CASE, "--input", "/nonexistent.jsonl"], 1),
    (["render-sparql", "--kind", "triples_aggregated", "--entity", "m.1"], 1),
    (["eval", "--config", CASE, "--input", "x", "--k", "a,b"], 2),
    (["no-such-command"], 2),
])
def test_exit_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
