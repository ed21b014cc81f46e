"""Shared fixtures: canonical sources, scripted LLM bundles, recorded verifier
stores, and the two end-to-end repair scenarios used by the acceptance suite.
"""

from __future__ import annotations

import json
import textwrap

import pytest

from cexrepair import cex_engine, cex_validator, pipeline, repair_engine, source_model
from cexrepair.cex_engine import FixtureRunner
from cexrepair.llm import (
    CostLedger,
    LLMClient,
    ReplayProvider,
    TemplateId,
    load_mutator_examples,
)
from cexrepair.source_model import parse_proof
from cexrepair.testkit import FixtureVerifier, SimulatedVerifier
from cexrepair.verifier import prioritize

SUM_TO_N = """\
use vstd::prelude::*;

verus! {

fn sum_to_n(n: u32) -> (result: u32)
    requires
        n >= 0,
        n <= 1000,
    ensures
        result == n * (n + 1) / 2,
{
    let mut i: u32 = 0;
    let mut sum: u32 = 0;
    while i < n
        invariant
            sum == i * (i + 1) / 2,
            i <= n,
        decreases n - i,
    {
        i = i + 1;
        sum = sum + i;
    }
    sum
}

fn main() {}

} // verus!
"""

FIND_MAX = """\
use vstd::prelude::*;

verus! {

fn find_max(nums: &Vec<i32>) -> (max: i32)
    requires
        nums.len() >= 1,
    ensures
        exists |j: int| 0 <= j < nums.len() && nums[j] == max,
{
    let mut i: usize = 1;
    let mut max: i32 = nums[0];
    while i < nums.len()
        invariant
            1 <= i,
            i <= nums.len(),
            exists |j: int| 0 <= j < i && nums[j] == max,
        decreases nums.len() - i,
    {
        if nums[i] > max {
            max = nums[i];
        }
        i = i + 1;
    }
    max
}

fn main() {}

} // verus!
"""


def make_verus_log(errors: list[tuple[str, int, int, str]], verified: int,
                   errored: int | None = None, file_name: str = "proof.rs") -> str:
    """Console log in the verifier's block format.

    `errors` rows are (message, line, col, snippet).
    """
    parts = []
    for message, line, col, snippet in errors:
        parts.append(f"error: {message}")
        parts.append(f"  --> {file_name}:{line}:{col}")
        parts.append("   |")
        parts.append(f"{line} | {snippet}")
        parts.append("   |")
        parts.append(f"   | {'^' * max(1, len(snippet.strip()))}")
        parts.append("")
    if len(errors) > 1:
        parts.append(f"error: aborting due to {len(errors)} previous errors")
        parts.append("")
    count = len(errors) if errored is None else errored
    parts.append(f"verification results: {verified} verified, {count} errors")
    parts.append("")
    return "\n".join(parts)


def line_of(text: str, needle: str) -> int:
    """1-based line number of the first line containing `needle`."""
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    raise AssertionError(f"{needle!r} not found")


@pytest.fixture
def sum_to_n_source() -> str:
    return SUM_TO_N


@pytest.fixture
def find_max_source() -> str:
    return FIND_MAX


@pytest.fixture
def sim_verifier() -> SimulatedVerifier:
    return SimulatedVerifier()


def make_replay_llm(tmp_path, name: str = "llm_fixtures",
                    price_in: float = 0.0, price_out: float = 0.0):
    fixtures = tmp_path / name
    fixtures.mkdir(parents=True, exist_ok=True)
    provider = ReplayProvider(str(fixtures))
    ledger = CostLedger(price_in_per_1k=price_in, price_out_per_1k=price_out)
    return LLMClient(provider, ledger), provider


# ---------------------------------------------------------------------------
# end-to-end scenario bundles
# ---------------------------------------------------------------------------

class Scenario:
    """A task plus every canned artifact repair_task will ask for."""

    def __init__(self, task, llm, runner, verify_fn, extras=None):
        self.task = task
        self.llm = llm
        self.runner = runner
        self.verify_fn = verify_fn
        self.extras = extras or {}


def _fenced(code: str, tag: str = "rust") -> str:
    return f"Reasoning about the failure.\n\n```{tag}\n{code}```\n"


def build_cell_counter_scenario(tmp_path) -> Scenario:
    """Front-failure case: a one-cell accumulator whose unguarded invariant
    `acc[0] <= i` is wrong at loop entry; the winning mutant guards it.
    """
    unverified = textwrap.dedent("""\
        use vstd::prelude::*;

        verus! {

        fn brs1(acc: &mut Vec<i32>, n: u32)
            requires
                old(acc).len() == 1,
                n >= 1,
                n <= 1000,
            ensures
                acc.len() == 1,
        {
            let mut i: u32 = 0;
            while i < n
            {
                if i == 0 {
                    acc.set(0, 1);
                } else {
                    let cur = acc[0];
                    acc.set(0, cur + 1);
                }
                i = i + 1;
            }
        }

        fn main() {}

        } // verus!
        """)

    def proof_with(invariants: list[str]) -> str:
        clause = "\n".join(f"            {inv}," for inv in invariants)
        return unverified.replace(
            "    while i < n\n    {",
            "    while i < n\n        invariant\n" + clause + "\n    {",
        )

    buggy = proof_with(["acc.len() == 1", "i <= n", "acc[0] <= i"])
    good = proof_with(["acc.len() == 1", "i <= n", "i > 0 ==> acc[0] <= i"])
    same_again = proof_with(["acc.len() == 1", "i <= n", "acc[0] <= i"])
    still_wrong = proof_with(["acc.len() == 1", "i <= n", "i >= 1"])
    spec_breaker = good.replace("acc.len() == 1,\n{", "acc.len() == 2,\n{", 1)

    return _assemble_front_scenario(
        tmp_path,
        task_id="brs1",
        unverified=unverified,
        buggy=buggy,
        buggy_invariant="acc[0] <= i",
        mutant_completions=[
            "I could not produce a fix this time.",       # no fence: dropped
            _fenced(spec_breaker),                        # edits ensures: flagged
            _fenced(same_again),                          # unchanged: fails again
            _fenced(good),                                # guards the claim: passes
            _fenced(still_wrong),                         # another wrong fact
        ],
        passing=good,
        failing_full=[same_again, still_wrong],
        raw_models=[{"__vec__acc__0": k, "__vec__acc__len": 1, "i": 0, "n": 5}
                    for k in range(1, 11)],
        triage_verdict="wrong_fact",
        triage_rationale=(
            "The counterexamples are reachable: before the first iteration the "
            "accumulator cell is uninitialized, so acc[0] <= i is a wrong fact "
            "at i = 0 and must be guarded or replaced."),
    )


def build_two_sum_scenario(tmp_path) -> Scenario:
    """Wrong-invariant removal case: `nums[0] <= target` is false on reachable
    inputs; the winning mutant deletes it.
    """
    unverified = textwrap.dedent("""\
        use vstd::prelude::*;

        verus! {

        fn two_sum_3(nums: &Vec<i32>, target: i32) -> (count: usize)
            requires
                nums.len() >= 2,
            ensures
                count <= nums.len(),
        {
            let mut i: usize = 0;
            let mut found: usize = 0;
            while i < nums.len()
            {
                if nums[i] == target {
                    found = found + 1;
                }
                i = i + 1;
            }
            found
        }

        fn main() {}

        } // verus!
        """)

    def proof_with(invariants: list[str]) -> str:
        clause = "\n".join(f"            {inv}," for inv in invariants)
        return unverified.replace(
            "    while i < nums.len()\n    {",
            "    while i < nums.len()\n        invariant\n" + clause + "\n    {",
        )

    buggy = proof_with(["i <= nums.len()", "found <= i", "nums[0] <= target"])
    good = proof_with(["i <= nums.len()", "found <= i"])
    worse = proof_with(["i <= nums.len()", "found <= i", "nums[0] == target"])
    unchanged = proof_with(["i <= nums.len()", "found <= i", "nums[0] <= target"])
    spec_breaker = good.replace("count <= nums.len(),\n{", "count == 0,\n{", 1)

    return _assemble_front_scenario(
        tmp_path,
        task_id="two_sum_3",
        unverified=unverified,
        buggy=buggy,
        buggy_invariant="nums[0] <= target",
        mutant_completions=[
            _fenced(worse),
            _fenced(good),
            "No block here either.",
            _fenced(unchanged),
            _fenced(spec_breaker),
        ],
        passing=good,
        failing_full=[worse, unchanged],
        raw_models=[{"__vec__nums__0": k, "__vec__nums__1": 0, "target": 0,
                     "i": 0, "found": 0}
                    for k in range(1, 11)],
        triage_verdict="wrong_fact",
        triage_rationale=(
            "Reachable inputs with nums[0] greater than target violate the "
            "invariant before the loop, so it is an incorrect fact and should "
            "be removed."),
    )


def _assemble_front_scenario(tmp_path, task_id, unverified, buggy, buggy_invariant,
                             mutant_completions, passing, failing_full,
                             raw_models, triage_verdict, triage_rationale) -> Scenario:
    root = tmp_path / task_id
    llm, provider = make_replay_llm(root, "llm")
    solver_dir = root / "solver"
    solver_dir.mkdir(parents=True, exist_ok=True)
    verifier_store = FixtureVerifier(str(root / "verus"), fallback=SimulatedVerifier())

    inv_line = line_of(buggy, buggy_invariant)
    buggy_log = make_verus_log(
        [("invariant not satisfied before loop", inv_line, 13, buggy_invariant)],
        verified=1)
    pass_log = "verification results: 2 verified, 0 errors\n"

    verifier_store.record(buggy, buggy_log)
    verifier_store.record(passing, pass_log)
    for failing in failing_full:
        if failing == buggy:
            continue  # same text, same digest: the canonical log already serves it
        failing_line = line_of(failing, "invariant")
        verifier_store.record(failing, make_verus_log(
            [("invariant not satisfied before loop", failing_line + 1, 13,
              failing.splitlines()[failing_line].strip())],
            verified=1))

    # scripted completions, keyed by the bindings the pipeline will build;
    # every derived value is read back through the store so the two sides
    # can never drift
    provider.record(TemplateId.InitialProof, {"program": unverified}, [_fenced(buggy)])

    buggy_doc = parse_proof(buggy)
    report = verifier_store(buggy)
    target = prioritize(report.diagnostics)
    replay = pipeline._resolve_replay(buggy_doc, target)
    assert replay is not None, "scenario loop must be extractable"

    query_request = cex_engine.make_cex_prompt(
        buggy_doc, target, 10, replay, report.raw_log)
    provider.record(query_request.template_id, query_request.bindings, [_fenced(
        '__z3_cex_status__ = "sat"\n'
        f"__z3_cex_results__ = {raw_models!r}\n", "python")])

    (solver_dir / "report_001.json").write_text(json.dumps({
        "status": "sat",
        "results": raw_models,
        "stderr": "",
        "elapsed_ms": 12,
    }))

    proof_types = cex_engine._declared_types(buggy_doc, target)
    batch = cex_engine.CexBatch(
        items=[cex_engine.normalize_model(m, proof_types) for m in raw_models],
        target=target, k_requested=10)
    batch = cex_validator.validate_batch(batch, replay, target.kind, verifier_store)

    triage_bindings = {
        "proof_content": buggy,
        "error_type": target.kind.value,
        "error_message": target.message,
        "console_error_msg": report.raw_log,
        "cex_info": repair_engine.format_cex_info(batch),
    }
    provider.record(TemplateId.Triage, triage_bindings, [
        'Looking at reachability.\n'
        f'{{"verdict": "{triage_verdict}", "rationale": "{triage_rationale}"}}\n'
    ])

    mutator_bindings = {
        "examples": load_mutator_examples("wrong_fact"),
        "proof_content": buggy,
        "verdict_rationale": triage_rationale,
        "error_type": target.kind.value,
        "error_message": target.message,
        "console_error_msg": report.raw_log,
        "counter_examples": repair_engine.format_cex_info(batch),
        "original_proof": unverified,
        "diff": source_model.diff(unverified, buggy),
    }
    provider.record(TemplateId.MutatorWrongFact, mutator_bindings, mutant_completions)

    task = pipeline.TaskInput(task_id=task_id, unverified_source=unverified)
    runner = FixtureRunner(str(solver_dir))
    return Scenario(task, llm, runner, verifier_store,
                    extras={"buggy": buggy, "passing": passing, "replay": replay,
                            "target": target, "batch": batch})


@pytest.fixture
def cell_counter_scenario(tmp_path):
    return build_cell_counter_scenario(tmp_path)


@pytest.fixture
def two_sum_scenario(tmp_path):
    return build_two_sum_scenario(tmp_path)
