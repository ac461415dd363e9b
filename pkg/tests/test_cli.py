import csv
import json
import shutil
from pathlib import Path

import pytest

from rational_anon.cli import load_config, main

E2E = Path(__file__).parent / "fixtures" / "e2e"
DATASET = E2E / "dataset.jsonl"
CONFIG = E2E / "config.toml"


def anonymize(tmp_path, *extra, run_id="run", config=CONFIG, dataset=DATASET):
    code = main(["anonymize", str(dataset), "--config", str(config), "--out", str(tmp_path),
                 "--run-id", run_id, *extra])
    return code, tmp_path / run_id


def evaluate(run_dir, *extra):
    return main(["evaluate", str(run_dir), "--config", str(CONFIG), *extra])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def rlaa_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("rlaa")
    code, run_dir = anonymize(out)
    assert code == 0
    assert evaluate(run_dir) == 0
    return run_dir


def test_anonymize_writes_run_directory(rlaa_run):
    names = {p.name for p in rlaa_run.iterdir()}
    assert {"manifest.json", "config.json", "dataset.jsonl", "trajectories"} <= names
    manifest = json.loads((rlaa_run / "manifest.json").read_text())
    assert manifest["run_id"] == "run" and manifest["n_documents"] == 2
    assert set(manifest["template_hashes"]) >= {"attacker", "arbitrator", "anonymizer", "judge"}
    stops = {p.stem: json.loads(p.read_text())["stop_reason"] for p in (rlaa_run / "trajectories").iterdir()}
    assert stops == {"reddit-001": "empty_policy", "health-001": "empty_policy"}


def test_evaluate_outputs(rlaa_run):
    summary = json.loads((rlaa_run / "summary.json").read_text())
    assert summary["mode"] == "rlaa" and summary["per_step"] is False
    assert summary["original"]["UTIL"] == summary["original"]["ROUGE"] == summary["original"]["BLEU"] == 1.0
    assert 0.0 <= summary["PRIV"] <= 1.0
    rows = read_csv(rlaa_run / "mrs.csv")
    assert len(rows) == 1 + 2  # one transition per document without --per-step
    assert {p.name for p in (rlaa_run / "eval").iterdir()} == {"reddit-001.json", "health-001.json"}


def test_per_step_evaluation_has_a_row_per_edit(tmp_path):
    code, run_dir = anonymize(tmp_path)
    assert evaluate(run_dir, "--per-step") == 0
    edits = 0
    for p in (run_dir / "trajectories").iterdir():
        edits += sum(1 for r in json.loads(p.read_text())["records"] if r["policy"]["actions"])
    assert len(read_csv(run_dir / "mrs.csv")) == 1 + edits


def test_greedy_mode_and_compare(tmp_path, rlaa_run):
    code, greedy = anonymize(tmp_path, "--mode", "greedy", run_id="greedy")
    assert code == 0 and evaluate(greedy) == 0
    for p in (greedy / "trajectories").iterdir():
        assert json.loads(p.read_text())["stop_reason"] == "max_iterations"
    out = tmp_path / "cmp"
    assert main(["compare", str(greedy), str(rlaa_run), "--out", str(out)]) == 0
    report = json.loads((out / "comparison.json").read_text())
    assert report["rationality_gain_pct"] > 0
    plot = read_csv(out / "mrs_plot.csv")
    assert plot[0] == ["iteration", "run", "cumulative_mrs"]
    assert {r[1] for r in plot[1:]} == {"baseline", "candidate"}


def test_self_comparison_has_zero_gain(tmp_path, rlaa_run):
    assert main(["compare", str(rlaa_run), str(rlaa_run), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "comparison.json").read_text())
    assert report["rationality_gain_pct"] == 0.0
    assert all(v in (0.0, None) for v in report["delta"].values())


def test_compare_rejects_different_datasets(tmp_path, rlaa_run):
    other = tmp_path / "other"
    shutil.copytree(rlaa_run, other)
    summary = json.loads((other / "summary.json").read_text())
    summary["dataset_digest"] = "0" * 64
    (other / "summary.json").write_text(json.dumps(summary))
    assert main(["compare", str(rlaa_run), str(other), "--out", str(tmp_path / "cmp")]) == 4


def test_compare_needs_evaluated_runs(tmp_path):
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path)]) == 3


def test_missing_config_exits_without_run_dir(tmp_path):
    assert main(["anonymize", str(DATASET), "--out", str(tmp_path)]) == 2
    assert main(["anonymize", str(DATASET), "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    assert list(tmp_path.iterdir()) == []


def test_config_without_loop_roles(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[judge]\nkind = "scripted"\nresponses = ["x"]\n')
    assert main(["anonymize", str(DATASET), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_bad_dataset(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["anonymize", str(bad), "--config", str(CONFIG), "--out", str(tmp_path / "o")]) == 3


def test_evaluate_needs_a_run(tmp_path):
    assert evaluate(tmp_path) == 3


def test_load_config_env_override(monkeypatch):
    monkeypatch.setenv("RATIONAL_ANON_JUDGE_MODEL", "other-judge")
    cfg = load_config(CONFIG, mode="greedy", seed=9)
    assert cfg.role_endpoints["judge"].model_name == "other-judge"
    assert cfg.mode.value == "greedy" and cfg.seed == 9
    assert cfg.max_iterations == 3
    assert Path(cfg.role_endpoints["attacker"].cassette_path) == (E2E / "cassette.json").resolve()


def test_simulate(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--out", str(a)]) == 0
    assert main(["simulate", "--out", str(b)]) == 0
    for name in ("sweep.csv", "series.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(read_csv(a / "sweep.csv")) == 4
    assert "p=0.9" in capsys.readouterr().out


def test_simulate_rejects_bad_config(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[base]\ngamma = 0.01\nxi = 0.05\n")
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_validate(tmp_path):
    assert main(["validate", str(DATASET)]) == 0
    partial = tmp_path / "p.jsonl"
    partial.write_text(DATASET.read_text() + json.dumps(
        {"id": "x", "text": "hi", "attributes": {"shoe_size": "44"}, "schema": "personal_reddit"}) + "\n")
    assert main(["validate", str(partial)]) == 1
    broken = tmp_path / "b.jsonl"
    broken.write_text("[1, 2\n")
    assert main(["validate", str(broken)]) == 3
    assert main(["validate", str(tmp_path / "missing.jsonl")]) == 3


SCRIPTED = """\
mode = "rlaa"
max_iterations = 2
schema = "personal_reddit"

[attacker]
kind = "scripted"
model = "s-attacker"
responses = ['Inference:\\nage: Says they are 34.\\nGuess: {"age": "34"}']

[arbitrator]
kind = "scripted"
model = "s-arbitrator"
responses = ['[{"attribute": "age", "validity_level": "invalid", "reasoning_evidence": "", "validation_notes": ""}]']

[anonymizer]
kind = "scripted"
model = "s-anonymizer"
responses = ["ok\\n#\\nunused"]

[judge]
kind = "scripted"
model = "s-judge"
responses = ['{"readability": {"score": 10}, "meaning": {"score": 10}, "hallucinations": {"score": 1}}']

[adversary]
kind = "scripted"
model = "s-adversary"
responses = ['Inference: none\\nGuess: {"age": "34", "health_issue": "unknown"}']
"""


def test_record_and_replay(tmp_path):
    cfg = tmp_path / "scripted.toml"
    cfg.write_text(SCRIPTED)
    code, run_dir = anonymize(tmp_path, "--record-cassettes", config=cfg)
    assert code == 0
    assert main(["evaluate", str(run_dir), "--config", str(cfg), "--record-cassettes"]) == 0
    assert {p.name for p in (run_dir / "cassettes").iterdir()} == {
        "attacker.json", "arbitrator.json", "adversary.json"}  # judge skipped: text unchanged
    assert main(["replay", str(run_dir), "--out", str(tmp_path / "again"), "--run-id", "r2"]) == 0
    again = tmp_path / "again" / "r2"
    for p in (run_dir / "trajectories").iterdir():
        left, right = json.loads(p.read_text()), json.loads((again / "trajectories" / p.name).read_text())
        for rec in left["records"] + right["records"]:
            rec.pop("wall_clock_ms")
        assert left == right
    assert (again / "summary.json").read_bytes() == (run_dir / "summary.json").read_bytes()


def test_replay_of_missing_run(tmp_path):
    assert main(["replay", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 3
