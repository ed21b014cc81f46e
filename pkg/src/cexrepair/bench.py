"""Dataset loading, batch execution, metric computation, and the dataset
construction procedures: obfuscation, one-line invariant bug injection with
acceptance filters, redundancy pruning, and difficulty classification.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from . import source_model
from .errors import DatasetNotFound, NoCodeBlock, NotVerified, ParseError, TaskSetupError
from .llm import CompletionRequest, TemplateId, extract_code_block
from .pipeline import RepairConfig, RepairTrace, TaskInput, repair_task
from .source_model import AnnotationKind, ProofDocument, parse_proof
from .verifier import DiagnosticKind, Status

log = logging.getLogger(__name__)


def round1(value: float) -> float:
    """Round half-up to one decimal, the convention all reported rates use."""
    return float(Decimal(str(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def round2(value: float) -> float:
    return float(Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# dataset loading and batch execution
# ---------------------------------------------------------------------------

def load_dataset(dataset_dir: str) -> list[TaskInput]:
    """One TaskInput per task subdirectory; malformed tasks are skipped loudly."""
    if not os.path.isdir(dataset_dir):
        raise DatasetNotFound(f"dataset directory {dataset_dir!r} not found")
    tasks: list[TaskInput] = []
    for name in sorted(os.listdir(dataset_dir)):
        task_dir = os.path.join(dataset_dir, name)
        if not os.path.isdir(task_dir):
            continue
        try:
            tasks.append(TaskInput.from_dir(task_dir))
        except TaskSetupError as exc:
            log.warning("skipping malformed task %s: %s", name, exc)
    return tasks


@dataclass
class BenchReport:
    per_task: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "config": self.config,
            "per_task": self.per_task,
            "aggregates": self.aggregates,
        }

    def write(self, path: str):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
        csv_path = os.path.splitext(path)[0] + ".csv"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow([
            "task_id", "status", "tokens_in", "tokens_out",
            "cost_usd", "wall_time", "iterations_used",
        ])
        for row in self.per_task:
            writer.writerow([
                row["task_id"], row["status"], row["tokens_in"], row["tokens_out"],
                row["cost_usd"], row["wall_time"], row["iterations_used"],
            ])
        agg = self.aggregates
        writer.writerow([])
        writer.writerow(["success_rate", agg.get("success_rate", "—")])
        writer.writerow(["tokens_row", agg.get("tokens_row", "—")])
        writer.writerow(["mean_cost_usd", agg.get("mean_cost_usd", "—")])
        writer.writerow(["mean_wall_time", agg.get("mean_wall_time", "—")])
        return buffer.getvalue()


def _trace_row(trace: RepairTrace) -> dict:
    ledger = trace.ledger or {}
    return {
        "task_id": trace.task_id,
        "status": trace.final_status,
        "tokens_in": ledger.get("input_tokens", 0),
        "tokens_out": ledger.get("output_tokens", 0),
        "cost_usd": ledger.get("cost_usd", 0.0),
        "wall_time": trace.wall_time,
        "iterations_used": len(trace.iterations),
    }


def compute_metrics(traces: list[RepairTrace], prices: dict | None = None) -> dict:
    """Aggregate rows in Table-style units: tokens in thousands at one decimal,
    mean cost at cents precision, mean wall time at one decimal."""
    if not traces:
        return {
            "tasks": 0,
            "success_rate": "—",
            "tokens_row": "—",
            "mean_cost_usd": "—",
            "mean_wall_time": "—",
        }
    total = len(traces)
    passes = sum(1 for t in traces if t.final_status == "Pass")
    mean_in = sum((t.ledger or {}).get("input_tokens", 0) for t in traces) / total
    mean_out = sum((t.ledger or {}).get("output_tokens", 0) for t in traces) / total
    if prices:
        mean_cost = sum(
            (t.ledger or {}).get("input_tokens", 0) / 1000.0 * prices.get("in_per_1k", 0.0)
            + (t.ledger or {}).get("output_tokens", 0) / 1000.0 * prices.get("out_per_1k", 0.0)
            for t in traces
        ) / total
    else:
        mean_cost = sum((t.ledger or {}).get("cost_usd", 0.0) for t in traces) / total
    mean_time = sum(t.wall_time for t in traces) / total
    tokens_in_k = round1(mean_in / 1000.0)
    tokens_out_k = round1(mean_out / 1000.0)
    return {
        "tasks": total,
        "passes": passes,
        "success_rate": round1(100.0 * passes / total),
        "tokens_in_k": tokens_in_k,
        "tokens_out_k": tokens_out_k,
        "tokens_row": f"{tokens_in_k}/{tokens_out_k}",
        "mean_cost_usd": round2(mean_cost),
        "mean_wall_time": round1(mean_time),
    }


def run_bench(tasks: list[TaskInput], config: RepairConfig, parallelism: int,
              llm_factory, runner_factory, verify_fn, out_dir: str | None = None,
              prices: dict | None = None) -> BenchReport:
    """Run every task with at most `parallelism` concurrent workspaces.

    Factories produce a fresh client/runner per task so attempt cursors and
    ledgers never interleave; the report is assembled sorted by task_id, so
    parallelism never changes the output.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def run_one(task: TaskInput) -> RepairTrace:
        llm = llm_factory(task)
        runner = runner_factory(task) if runner_factory else None
        try:
            return repair_task(task, config, llm, runner, verify_fn,
                               trace_dir=out_dir)
        except Exception as exc:  # per-task failures never abort the batch
            log.error("task %s failed: %s", task.task_id, exc)
            trace = RepairTrace(task_id=task.task_id, final_status="Fail")
            trace.ledger = llm.ledger.snapshot()
            return trace

    if parallelism == 1:
        traces = [run_one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            traces = list(pool.map(run_one, tasks))

    traces.sort(key=lambda t: t.task_id)
    report = BenchReport(
        per_task=[_trace_row(t) for t in traces],
        aggregates=compute_metrics(traces, prices),
        config=config.to_json(),
    )
    return report


# ---------------------------------------------------------------------------
# dataset construction: obfuscation
# ---------------------------------------------------------------------------

class ObfuscationStrategy(enum.Enum):
    IdentifierRenaming = "IdentifierRenaming"
    DeadVariables = "DeadVariables"
    InstructionSubstitution = "InstructionSubstitution"
    DeadCodeInsertion = "DeadCodeInsertion"
    OpaquePredicates = "OpaquePredicates"
    ControlFlowFlattening = "ControlFlowFlattening"


_STRATEGY_NOTES = {
    ObfuscationStrategy.IdentifierRenaming:
        "Apply identifier renaming: replace descriptive variable and function "
        "names with generic or obscure identifiers (e.g., change `quotient` to `x`). "
        "Keep public function names intact.",
    ObfuscationStrategy.DeadVariables:
        "Apply dead variable insertion: introduce variables and operations that "
        "have no effect on the final output (e.g., `let mut junk = x * 3; junk = junk + 1;` "
        "where `junk` is unused).",
    ObfuscationStrategy.InstructionSubstitution:
        "Apply instruction substitution: replace simple operations with "
        "functionally equivalent, more complex sequences (e.g., turn "
        "`y = 191 - 7 * x;` into `let s = 7 * x; y = 191 - s;`).",
    ObfuscationStrategy.DeadCodeInsertion:
        "Apply dead code insertion: embed blocks that are guaranteed never to "
        "execute (e.g., `if (1 == 0) { y = 0; }`).",
    ObfuscationStrategy.OpaquePredicates:
        "Apply opaque predicates: conditions whose outcome is constant but hard "
        "to see statically (e.g., `if x * x >= 0 { ... }`).",
    ObfuscationStrategy.ControlFlowFlattening:
        "Apply control flow flattening: create redundant branches with identical "
        "operations (e.g., a redundant if-else) so the trace is harder to follow.",
}


@dataclass
class Rejected:
    reason: str


def strip_annotations(doc: ProofDocument) -> str:
    """Unverified variant: the verified source with every annotation removed."""
    text = doc.source_text
    for ann in sorted(doc.annotations, key=lambda a: a.start, reverse=True):
        text = source_model._blank_annotation(text, ann)
    lines = [line for line in text.splitlines() if line.strip()]
    return "\n".join(lines) + "\n"


def obfuscate_task(task: TaskInput, strategy: ObfuscationStrategy, llm,
                   verify_fn, max_repairs: int = 5) -> TaskInput | Rejected:
    """LLM-obfuscate a verified task; repair until the variant verifies or give up."""
    if task.ground_truth_source is None:
        return Rejected("task has no verified ground truth")
    if verify_fn(task.ground_truth_source).status != Status.Pass:
        return Rejected("ground truth does not verify")

    request = CompletionRequest(
        template_id=TemplateId.Obfuscate,
        bindings={
            "other_notes": _STRATEGY_NOTES[strategy],
            "ori_program": task.ground_truth_source,
        },
    )
    completions = llm.complete(request)
    if not completions:
        return Rejected("no obfuscation produced")
    try:
        candidate = extract_code_block(completions[0][0], "rust")
    except NoCodeBlock:
        return Rejected("obfuscation had no code block")

    for _ in range(max_repairs + 1):
        report = verify_fn(candidate)
        if report.status == Status.Pass:
            try:
                doc = parse_proof(candidate)
            except ParseError:
                return Rejected("verified obfuscation does not parse")
            return TaskInput(
                task_id=f"{task.task_id}__{strategy.value}",
                unverified_source=strip_annotations(doc),
                ground_truth_source=candidate,
            )
        repair_request = CompletionRequest(
            template_id=TemplateId.IterativeRefine,
            bindings={
                "buggy_proof": candidate,
                "original_proof": task.ground_truth_source,
                "error_message": report.raw_log,
            },
        )
        repair_completions = llm.complete(repair_request)
        if not repair_completions:
            break
        try:
            candidate = extract_code_block(repair_completions[0][0], "rust")
        except NoCodeBlock:
            break
    return Rejected(f"obfuscated variant never verified within {max_repairs} repairs")


# ---------------------------------------------------------------------------
# dataset construction: invariant bug injection
# ---------------------------------------------------------------------------

class InjectionStrategy(enum.Enum):
    Strengthen = "Strengthen"
    Weaken = "Weaken"
    Remove = "Remove"


_INJECTION_NOTES = {
    InjectionStrategy.Strengthen:
        "Strengthen one invariant so it claims more than the loop establishes "
        "at entry; the buggy proof should fail before the loop.",
    InjectionStrategy.Weaken:
        "Weaken one invariant so it no longer survives a loop iteration; "
        "the buggy proof should fail at the end of the loop body.",
    InjectionStrategy.Remove:
        "Remove exactly one invariant the proof needs; the buggy proof should "
        "fail at the end of the loop body or on a later obligation.",
}

_EXPECTED_KIND = {
    InjectionStrategy.Strengthen: DiagnosticKind.InvFailFront,
    InjectionStrategy.Weaken: DiagnosticKind.InvFailEnd,
    InjectionStrategy.Remove: DiagnosticKind.InvFailEnd,
}


def invariant_multiset(doc: ProofDocument) -> list[str]:
    return sorted(
        " ".join(t[1] for t in source_model.tokenize_normalized(a.expression))
        for a in doc.annotations if a.kind == AnnotationKind.Invariant
    )


def one_invariant_diff(original: ProofDocument, candidate: ProofDocument) -> bool:
    """True iff the two proofs differ in exactly one invariant (changed,
    added, or removed), everything else identical."""
    before = invariant_multiset(original)
    after = invariant_multiset(candidate)
    removed = list(before)
    for inv in after:
        if inv in removed:
            removed.remove(inv)
    added = list(after)
    for inv in before:
        if inv in added:
            added.remove(inv)
    if (len(removed), len(added)) not in ((1, 0), (0, 1), (1, 1)):
        return False
    # the rest of the proof must be untouched
    from .verifier import check_spec_preserved

    verdict = check_spec_preserved(original, candidate)
    return verdict.preserved


def inject_invariant_bug(task: TaskInput, strategy: InjectionStrategy, llm,
                         verify_fn) -> TaskInput | Rejected:
    """One-line invariant bug with the three acceptance filters enforced:
    verification (not compile) errors, expected error kind present, and an
    exactly-one-invariant structural diff."""
    if task.ground_truth_source is None:
        return Rejected("task has no verified ground truth")
    if verify_fn(task.ground_truth_source).status != Status.Pass:
        return Rejected("ground truth does not verify")
    ground_doc = parse_proof(task.ground_truth_source)

    request = CompletionRequest(
        template_id=TemplateId.BugInject,
        bindings={
            "strategy": strategy.value,
            "strategy_notes": _INJECTION_NOTES[strategy],
            "ground_truth": task.ground_truth_source,
        },
    )
    completions = llm.complete(request)
    if not completions:
        return Rejected("no injection produced")
    try:
        candidate = extract_code_block(completions[0][0], "rust")
    except NoCodeBlock:
        return Rejected("injection had no code block")

    report = verify_fn(candidate)
    if report.status == Status.CompileError:
        return Rejected("filter 1: injected proof has compile errors")
    if report.status == Status.Pass:
        return Rejected("filter 1: injected proof still verifies")

    expected = _EXPECTED_KIND[strategy]
    if not any(d.kind == expected for d in report.diagnostics):
        return Rejected(f"filter 2: no {expected.value} error present")

    try:
        cand_doc = parse_proof(candidate)
    except ParseError:
        return Rejected("injected proof does not parse")
    if not one_invariant_diff(ground_doc, cand_doc):
        return Rejected("filter 3: not a one-invariant diff")

    return TaskInput(
        task_id=f"{task.task_id}__{strategy.value}",
        unverified_source=candidate,
        ground_truth_source=task.ground_truth_source,
    )


# ---------------------------------------------------------------------------
# difficulty classification
# ---------------------------------------------------------------------------

class InvariantBucket(enum.Enum):
    low = "low"    # <= 5 invariants
    high = "high"  # > 5


@dataclass
class DifficultyLabel:
    invariant_count: int
    invariant_bucket: InvariantBucket
    has_assertions: bool
    has_proof_blocks: bool

    def to_json(self) -> dict:
        return {
            "invariant_count": self.invariant_count,
            "invariant_bucket": self.invariant_bucket.value,
            "has_assertions": self.has_assertions,
            "has_proof_blocks": self.has_proof_blocks,
        }


def classify_difficulty(ground_truth: ProofDocument, verify_fn) -> DifficultyLabel:
    """Prune the proof first so decorative annotations never inflate difficulty."""
    if verify_fn(ground_truth).status != Status.Pass:
        raise NotVerified("difficulty is defined on verifying ground truth")
    pruned = source_model.prune_redundant_annotations(ground_truth, verify_fn)
    invariants = [a for a in pruned.annotations if a.kind == AnnotationKind.Invariant]
    asserts = [a for a in pruned.annotations if a.kind == AnnotationKind.Assert]
    proofs = [a for a in pruned.annotations if a.kind == AnnotationKind.ProofBlock]
    count = len(invariants)
    return DifficultyLabel(
        invariant_count=count,
        invariant_bucket=InvariantBucket.low if count <= 5 else InvariantBucket.high,
        has_assertions=bool(asserts),
        has_proof_blocks=bool(proofs),
    )
