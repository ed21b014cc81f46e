"""Bench harness: dataset loading, batch metrics, construction procedures
(obfuscation, bug injection, difficulty), and report formatting.
"""

from __future__ import annotations

import json

import pytest

from cexrepair.bench import (
    InjectionStrategy,
    InvariantBucket,
    ObfuscationStrategy,
    Rejected,
    classify_difficulty,
    compute_metrics,
    inject_invariant_bug,
    load_dataset,
    obfuscate_task,
    one_invariant_diff,
    round1,
    run_bench,
    strip_annotations,
)
from cexrepair.errors import DatasetNotFound
from cexrepair.llm import CostLedger, Usage
from cexrepair.pipeline import RepairConfig, RepairTrace, TaskInput
from cexrepair.source_model import parse_proof
from cexrepair.verifier import Status, VerifierReport, report_from_log
from conftest import SUM_TO_N, make_verus_log


def _write_task(root, name: str, unverified: str, verified: str | None = None):
    task_dir = root / name
    task_dir.mkdir(parents=True)
    (task_dir / "unverified.rs").write_text(unverified)
    if verified is not None:
        (task_dir / "verified.rs").write_text(verified)
    return task_dir


class TestLoadDataset:
    def test_valid_plus_malformed(self, tmp_path):
        for i in range(3):
            _write_task(tmp_path, f"task{i}", SUM_TO_N)
        (tmp_path / "broken").mkdir()  # no unverified.rs
        tasks = load_dataset(str(tmp_path))
        assert len(tasks) == 3

    def test_empty_dir(self, tmp_path):
        assert load_dataset(str(tmp_path)) == []

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DatasetNotFound):
            load_dataset(str(tmp_path / "nope"))


def _trace(task_id: str, status: str, tokens_in=0, tokens_out=0,
           cost=0.0, wall=0.0) -> RepairTrace:
    trace = RepairTrace(task_id=task_id, final_status=status)
    trace.ledger = {
        "input_tokens": tokens_in,
        "output_tokens": tokens_out,
        "cost_usd": cost,
        "calls": 1,
        "wall_time": wall,
    }
    trace.wall_time = wall
    return trace


class TestMetrics:
    def test_seven_of_ten(self):
        traces = [_trace(f"t{i}", "Pass" if i < 7 else "Fail") for i in range(10)]
        assert compute_metrics(traces)["success_rate"] == 70.0

    def test_large_batch_rate(self):
        traces = [_trace(f"t{i:03d}", "Pass" if i < 105 else "Fail")
                  for i in range(146)]
        assert compute_metrics(traces)["success_rate"] == 71.9

    def test_token_cost_row(self):
        # mean ledger of 93.8k in / 14.8k out at configured per-1k prices
        traces = [_trace("t", "Pass", tokens_in=93_800, tokens_out=14_800)]
        metrics = compute_metrics(
            traces, prices={"in_per_1k": 0.00027, "out_per_1k": 0.0011})
        assert metrics["tokens_row"] == "93.8/14.8"
        assert metrics["mean_cost_usd"] == 0.04

    def test_zero_traces(self):
        metrics = compute_metrics([])
        assert metrics["success_rate"] == "—"
        assert metrics["tokens_row"] == "—"

    def test_mean_tokens(self):
        traces = [
            _trace("a", "Pass", tokens_in=10_000, tokens_out=5_000),
            _trace("b", "Fail", tokens_in=30_000, tokens_out=15_000),
        ]
        metrics = compute_metrics(traces)
        assert metrics["tokens_in_k"] == 20.0
        assert metrics["tokens_out_k"] == 10.0

    def test_round_half_up(self):
        assert round1(71.85) == 71.9
        assert round1(0.25) == 0.3
        assert round1(66.666) == 66.7


class _PassingLLM:
    def __init__(self):
        self.ledger = CostLedger()

    def complete(self, request):
        self.ledger.record_call(Usage(100, 50))
        return [(f"```rust\n{SUM_TO_N}```", Usage(100, 50))]


class TestRunBench:
    def _verify_all_pass(self, source):
        return VerifierReport(status=Status.Pass, verified_goals=2,
                              raw_log="verification results: 2 verified, 0 errors")

    def test_batch_counts(self, tmp_path):
        for i in range(4):
            _write_task(tmp_path / "ds", f"task{i}", SUM_TO_N)
        tasks = load_dataset(str(tmp_path / "ds"))
        report = run_bench(
            tasks, RepairConfig(), 1,
            llm_factory=lambda t: _PassingLLM(),
            runner_factory=None,
            verify_fn=self._verify_all_pass,
        )
        assert report.aggregates["passes"] == 4
        assert report.aggregates["success_rate"] == 100.0
        assert [row["task_id"] for row in report.per_task] == \
            sorted(row["task_id"] for row in report.per_task)

    def test_parallelism_identical_report(self, tmp_path):
        for i in range(6):
            _write_task(tmp_path / "ds", f"task{i}", SUM_TO_N)
        tasks = load_dataset(str(tmp_path / "ds"))

        def run(parallelism):
            report = run_bench(
                tasks, RepairConfig(), parallelism,
                llm_factory=lambda t: _PassingLLM(),
                runner_factory=None,
                verify_fn=self._verify_all_pass,
            )
            payload = report.to_json()
            for row in payload["per_task"]:
                row["wall_time"] = 0.0
            payload["aggregates"]["mean_wall_time"] = 0.0
            return json.dumps(payload, sort_keys=True)

        assert run(1) == run(4)

    def test_per_task_failure_does_not_abort(self, tmp_path):
        _write_task(tmp_path / "ds", "good", SUM_TO_N)
        _write_task(tmp_path / "ds", "ugly", "fn {")  # parses at load, fails at repair
        tasks = load_dataset(str(tmp_path / "ds"))
        report = run_bench(
            tasks, RepairConfig(), 1,
            llm_factory=lambda t: _PassingLLM(),
            runner_factory=None,
            verify_fn=self._verify_all_pass,
        )
        statuses = {row["task_id"]: row["status"] for row in report.per_task}
        assert statuses["good"] == "Pass"
        assert statuses["ugly"] == "Fail"

    def test_csv_mirrors_report(self, tmp_path):
        _write_task(tmp_path / "ds", "only", SUM_TO_N)
        tasks = load_dataset(str(tmp_path / "ds"))
        report = run_bench(
            tasks, RepairConfig(), 1,
            llm_factory=lambda t: _PassingLLM(),
            runner_factory=None,
            verify_fn=self._verify_all_pass,
        )
        out = tmp_path / "report.json"
        report.write(str(out))
        assert out.exists()
        csv_text = (tmp_path / "report.csv").read_text()
        assert "only,Pass" in csv_text
        assert "success_rate,100.0" in csv_text


GROUND_TRUTH = SUM_TO_N

BUGGY_REMOVED = SUM_TO_N.replace("            i <= n,\n", "")
BUGGY_TWO_LINES = SUM_TO_N.replace(
    "            sum == i * (i + 1) / 2,\n            i <= n,\n",
    "            sum == i * i,\n            i < n,\n")
BUGGY_WEAKENED = SUM_TO_N.replace("i <= n,", "i <= n + 1,")


class _RecordedVerifier:
    """Returns canned reports per exact source text, Pass otherwise."""

    def __init__(self, table: dict[str, str]):
        self.table = table

    def __call__(self, source):
        text = source if isinstance(source, str) else source.source_text
        if text in self.table:
            return report_from_log(self.table[text])
        return VerifierReport(status=Status.Pass, verified_goals=2,
                              raw_log="verification results: 2 verified, 0 errors")


class _OneShotLLM:
    def __init__(self, completion: str):
        self.completion = completion
        self.ledger = CostLedger()

    def complete(self, request):
        return [(self.completion, Usage(1, 1))]


class TestInjectFilters:
    def _task(self):
        return TaskInput(task_id="sum", unverified_source=SUM_TO_N,
                         ground_truth_source=GROUND_TRUTH)

    def test_complete_acceptance(self):
        inv_end_log = make_verus_log(
            [("invariant not satisfied at end of loop body", 16, 13, "i <= n + 1,")],
            verified=1)
        verify = _RecordedVerifier({BUGGY_WEAKENED: inv_end_log})
        llm = _OneShotLLM(f"```rust\n{BUGGY_WEAKENED}```")
        result = inject_invariant_bug(self._task(), InjectionStrategy.Weaken,
                                      llm, verify)
        assert isinstance(result, TaskInput)
        assert result.unverified_source == BUGGY_WEAKENED

    def test_filter1_compile_error(self):
        compile_log = "error[E0308]: mismatched types\n  --> proof.rs:3:4\n"
        verify = _RecordedVerifier({BUGGY_WEAKENED: compile_log})
        llm = _OneShotLLM(f"```rust\n{BUGGY_WEAKENED}```")
        result = inject_invariant_bug(self._task(), InjectionStrategy.Weaken,
                                      llm, verify)
        assert isinstance(result, Rejected)
        assert "filter 1" in result.reason

    def test_filter2_wrong_kind(self):
        # weakening must yield InvFailEnd; a front error alone is rejected
        front_log = make_verus_log(
            [("invariant not satisfied before loop", 16, 13, "i <= n + 1,")],
            verified=1)
        verify = _RecordedVerifier({BUGGY_WEAKENED: front_log})
        llm = _OneShotLLM(f"```rust\n{BUGGY_WEAKENED}```")
        result = inject_invariant_bug(self._task(), InjectionStrategy.Weaken,
                                      llm, verify)
        assert isinstance(result, Rejected)
        assert "filter 2" in result.reason

    def test_filter3_two_line_change(self):
        inv_end_log = make_verus_log(
            [("invariant not satisfied at end of loop body", 16, 13, "sum == i * i,")],
            verified=1)
        verify = _RecordedVerifier({BUGGY_TWO_LINES: inv_end_log})
        llm = _OneShotLLM(f"```rust\n{BUGGY_TWO_LINES}```")
        result = inject_invariant_bug(self._task(), InjectionStrategy.Weaken,
                                      llm, verify)
        assert isinstance(result, Rejected)
        assert "filter 3" in result.reason

    def test_removal_is_one_invariant_diff(self):
        assert one_invariant_diff(parse_proof(SUM_TO_N), parse_proof(BUGGY_REMOVED))

    def test_two_line_is_not(self):
        assert not one_invariant_diff(parse_proof(SUM_TO_N),
                                      parse_proof(BUGGY_TWO_LINES))

    def test_accepted_output_structurally_one_diff(self):
        inv_end_log = make_verus_log(
            [("invariant not satisfied at end of loop body", 16, 13, "x")],
            verified=1)
        verify = _RecordedVerifier({BUGGY_REMOVED: inv_end_log})
        llm = _OneShotLLM(f"```rust\n{BUGGY_REMOVED}```")
        result = inject_invariant_bug(self._task(), InjectionStrategy.Remove,
                                      llm, verify)
        assert isinstance(result, TaskInput)
        assert one_invariant_diff(parse_proof(result.ground_truth_source),
                                  parse_proof(result.unverified_source))


OBFUSCATED_OK = SUM_TO_N.replace("sum_to_n", "opaque_fold").replace(
    "        i = i + 1;\n        sum = sum + i;",
    "        if i * i >= 0 {\n            i = i + 1;\n            sum = sum + i;\n        }")


class TestObfuscate:
    def _task(self):
        return TaskInput(task_id="sum", unverified_source=SUM_TO_N,
                         ground_truth_source=SUM_TO_N)

    def test_accepted_when_variant_verifies(self):
        verify = _RecordedVerifier({})  # everything passes
        llm = _OneShotLLM(f"```rust\n{OBFUSCATED_OK}```")
        result = obfuscate_task(self._task(), ObfuscationStrategy.OpaquePredicates,
                                llm, verify)
        assert isinstance(result, TaskInput)
        assert result.ground_truth_source == OBFUSCATED_OK
        # unverified variant: annotations stripped
        assert "invariant" not in result.unverified_source
        assert "decreases" not in result.unverified_source
        assert "opaque_fold" in result.unverified_source

    def test_rejected_when_never_verifies(self):
        fail_log = make_verus_log(
            [("postcondition not satisfied", 7, 1, "ensures")], verified=0)
        verify = _RecordedVerifier({OBFUSCATED_OK: fail_log})
        llm = _OneShotLLM(f"```rust\n{OBFUSCATED_OK}```")
        result = obfuscate_task(self._task(), ObfuscationStrategy.OpaquePredicates,
                                llm, verify, max_repairs=2)
        assert isinstance(result, Rejected)

    def test_requires_ground_truth(self):
        task = TaskInput(task_id="x", unverified_source=SUM_TO_N)
        result = obfuscate_task(task, ObfuscationStrategy.DeadVariables,
                                _OneShotLLM("x"), _RecordedVerifier({}))
        assert isinstance(result, Rejected)

    def test_strip_annotations(self):
        stripped = strip_annotations(parse_proof(SUM_TO_N))
        assert "invariant" not in stripped
        assert "sum = sum + i;" in stripped
        parse_proof(stripped)  # still a valid source file


SIX_INVARIANTS = SUM_TO_N.replace(
    "            i <= n,",
    "            i <= n,\n"
    "            i * 2 <= 2000,\n"
    "            sum * 2 >= 0,\n"
    "            sum <= 1000000,\n"
    "            sum + i <= 2000000,")


class _AlwaysPass:
    def __call__(self, source):
        return VerifierReport(status=Status.Pass, verified_goals=1,
                              raw_log="verification results: 1 verified, 0 errors")


class _KeepAllInvariants:
    """Pass only while every original invariant survives (nothing redundant)."""

    def __init__(self, required: list[str]):
        self.required = required

    def __call__(self, source):
        text = source if isinstance(source, str) else source.source_text
        if all(req in text for req in self.required) and "decreases" in text:
            return VerifierReport(status=Status.Pass, verified_goals=1,
                                  raw_log="verification results: 1 verified, 0 errors")
        return VerifierReport(status=Status.VerifyFail, errored_goals=1,
                              raw_log="error: postcondition not satisfied\n"
                                      "verification results: 0 verified, 1 errors")


class TestClassifyDifficulty:
    def test_low_bucket(self):
        verify = _KeepAllInvariants(["sum == i * (i + 1) / 2", "i <= n"])
        label = classify_difficulty(parse_proof(SUM_TO_N), verify)
        assert label.invariant_count == 2
        assert label.invariant_bucket == InvariantBucket.low
        assert label.has_assertions is False
        assert label.has_proof_blocks is False

    def test_high_bucket(self):
        required = ["sum == i * (i + 1) / 2", "i <= n", "i * 2 <= 2000",
                    "sum * 2 >= 0", "sum <= 1000000", "sum + i <= 2000000"]
        verify = _KeepAllInvariants(required)
        label = classify_difficulty(parse_proof(SIX_INVARIANTS), verify)
        assert label.invariant_count == 6
        assert label.invariant_bucket == InvariantBucket.high

    def test_pruning_first(self):
        # redundant invariants collapse into the low bucket before counting
        label = classify_difficulty(parse_proof(SIX_INVARIANTS), _AlwaysPass())
        assert label.invariant_count == 0
        assert label.invariant_bucket == InvariantBucket.low

    def test_proof_block_detected(self):
        source = SUM_TO_N.replace(
            "    sum\n", "    proof { assert(n >= 0); }\n    sum\n")
        verify = _KeepAllInvariants(["sum == i * (i + 1) / 2", "i <= n",
                                     "proof { assert(n >= 0); }"])
        label = classify_difficulty(parse_proof(source), verify)
        assert label.has_proof_blocks is True
