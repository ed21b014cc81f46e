"""CLI plumbing: exit codes, artifact paths, and command wiring."""

from __future__ import annotations

import json
import stat
import sys

import pytest

from cexrepair import cli
from cexrepair.llm import ReplayProvider, TemplateId
from cexrepair.pipeline import RepairTrace
from conftest import SUM_TO_N


def _stub_verus(tmp_path, log: str) -> str:
    path = tmp_path / "stub-verus"
    path.write_text(f"#!{sys.executable}\nprint({log!r})\n")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


def _passing_setup(tmp_path, monkeypatch, task_name="demo"):
    task_dir = tmp_path / task_name
    task_dir.mkdir()
    (task_dir / "unverified.rs").write_text(SUM_TO_N)
    fixtures = tmp_path / "llm"
    provider = ReplayProvider(str(fixtures))
    provider.record(TemplateId.InitialProof, {"program": SUM_TO_N},
                    [f"```rust\n{SUM_TO_N}```"])
    solver = tmp_path / "solver"
    solver.mkdir(exist_ok=True)
    (solver / "report_001.json").write_text(
        json.dumps({"status": "unsat", "stderr": "", "elapsed_ms": 1}))
    stub = _stub_verus(tmp_path, "verification results: 2 verified, 0 errors")
    monkeypatch.setenv("CEXREPAIR_VERUS", stub)
    return task_dir, fixtures, solver


class TestRepairCommand:
    def test_pass_exit_zero_and_trace(self, tmp_path, monkeypatch):
        task_dir, fixtures, solver = _passing_setup(tmp_path, monkeypatch)
        out = tmp_path / "trace.json"
        code = cli.main([
            "repair", str(task_dir),
            "--provider", "replay", "--fixtures", str(fixtures),
            "--runner", "fixture", "--solver-fixtures", str(solver),
            "--out", str(out),
        ])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["final_status"] == "Pass"
        assert payload["phase"] == "init_gen"

    def test_setup_error_exit_two(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CEXREPAIR_VERUS", "/does/not/exist")
        code = cli.main([
            "repair", str(tmp_path / "missing_task"),
            "--provider", "replay", "--fixtures", str(tmp_path),
            "--runner", "fixture", "--solver-fixtures", str(tmp_path),
        ])
        assert code == 2

    def test_fail_exit_one(self, tmp_path, monkeypatch):
        task_dir, fixtures, solver = _passing_setup(tmp_path, monkeypatch)

        def fake_repair_task(task, config, llm, runner, verify_fn, trace_dir=None):
            return RepairTrace(task_id=task.task_id, final_status="Fail")

        monkeypatch.setattr(cli, "repair_task", fake_repair_task)
        code = cli.main([
            "repair", str(task_dir),
            "--provider", "replay", "--fixtures", str(fixtures),
            "--runner", "fixture", "--solver-fixtures", str(solver),
            "--out", str(tmp_path / "t.json"),
        ])
        assert code == 1

    def test_replay_requires_fixtures(self, tmp_path, monkeypatch):
        task_dir, _, solver = _passing_setup(tmp_path, monkeypatch)
        code = cli.main([
            "repair", str(task_dir),
            "--provider", "replay",
            "--runner", "fixture", "--solver-fixtures", str(solver),
        ])
        assert code == 2


class TestBenchCommand:
    def test_report_written(self, tmp_path, monkeypatch):
        dataset = tmp_path / "ds"
        for name in ("alpha", "beta"):
            task = dataset / name
            task.mkdir(parents=True)
            (task / "unverified.rs").write_text(SUM_TO_N)
        fixtures = tmp_path / "llm"
        ReplayProvider(str(fixtures)).record(
            TemplateId.InitialProof, {"program": SUM_TO_N},
            [f"```rust\n{SUM_TO_N}```"])
        solver = tmp_path / "solver"
        solver.mkdir()
        stub = _stub_verus(tmp_path, "verification results: 2 verified, 0 errors")
        monkeypatch.setenv("CEXREPAIR_VERUS", stub)
        out = tmp_path / "report.json"
        code = cli.main([
            "bench", str(dataset),
            "--provider", "replay", "--fixtures", str(fixtures),
            "--runner", "fixture", "--solver-fixtures", str(solver),
            "--parallelism", "2",
            "--out", str(out),
        ])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["aggregates"]["success_rate"] == 100.0
        assert [r["task_id"] for r in payload["per_task"]] == ["alpha", "beta"]
        assert (tmp_path / "report.csv").exists()

    def test_empty_dataset_exit_two(self, tmp_path, monkeypatch):
        (tmp_path / "ds").mkdir()
        code = cli.main(["bench", str(tmp_path / "ds")])
        assert code == 2


class TestPruneCommand:
    def test_writes_pruned_proof(self, tmp_path, monkeypatch):
        task_dir = tmp_path / "task"
        task_dir.mkdir()
        duplicated = SUM_TO_N.replace(
            "            i <= n,", "            i <= n,\n            i <= n,")
        (task_dir / "unverified.rs").write_text(SUM_TO_N)
        (task_dir / "verified.rs").write_text(duplicated)
        stub = _stub_verus(tmp_path, "verification results: 2 verified, 0 errors")
        monkeypatch.setenv("CEXREPAIR_VERUS", stub)
        code = cli.main(["prune", str(task_dir)])
        assert code == 0
        pruned = (task_dir / "verified.pruned.rs").read_text()
        # the always-pass stub lets the greedy pass drop everything removable
        assert pruned.count("i <= n") <= 1


class TestClassifyCommand:
    def test_labels_emitted(self, tmp_path, monkeypatch, capsys):
        dataset = tmp_path / "ds"
        task = dataset / "sum"
        task.mkdir(parents=True)
        (task / "unverified.rs").write_text(SUM_TO_N)
        (task / "verified.rs").write_text(SUM_TO_N)
        stub = _stub_verus(tmp_path, "verification results: 2 verified, 0 errors")
        monkeypatch.setenv("CEXREPAIR_VERUS", stub)
        out = tmp_path / "labels.json"
        code = cli.main(["classify", str(dataset), "--out", str(out)])
        assert code == 0
        labels = json.loads(out.read_text())
        assert labels["sum"]["invariant_bucket"] == "low"


class TestParser:
    def test_unknown_command_rejected(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["frobnicate"])

    def test_strategy_choices(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(
                ["obfuscate", "ds", "--strategy", "NotAStrategy"])
