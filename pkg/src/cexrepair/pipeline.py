"""End-to-end repair pipeline: initial proof generation, then the
verify -> (compile-fix | cex-gen -> validate -> mutate-rank) loop under an
attempt budget, with a full JSON trace of every stage.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field

from . import cex_engine, cex_validator, repair_engine, source_model
from .cex_engine import CexBatch, SolverRunner
from .errors import (
    NoCodeBlock,
    NoViableMutant,
    ParseError,
    TaskSetupError,
    UnsupportedLoop,
)
from .llm import CompletionRequest, TemplateId, extract_code_block
from .source_model import ProofDocument, parse_proof
from .verifier import (
    Status,
    VerifierReport,
    check_spec_preserved,
    prioritize,
    verify,
)

log = logging.getLogger(__name__)

TRACE_SCHEMA = 1


@dataclass
class TaskInput:
    task_id: str
    unverified_source: str
    ground_truth_source: str | None = None

    @classmethod
    def from_dir(cls, task_dir: str) -> "TaskInput":
        unverified = os.path.join(task_dir, "unverified.rs")
        if not os.path.isfile(unverified):
            raise TaskSetupError(f"{task_dir} has no unverified.rs")
        with open(unverified, encoding="utf-8") as fh:
            source = fh.read()
        ground_truth = None
        verified = os.path.join(task_dir, "verified.rs")
        if os.path.isfile(verified):
            with open(verified, encoding="utf-8") as fh:
                ground_truth = fh.read()
        task_id = os.path.basename(os.path.normpath(task_dir))
        meta = os.path.join(task_dir, "meta.json")
        if os.path.isfile(meta):
            try:
                with open(meta, encoding="utf-8") as fh:
                    task_id = json.load(fh).get("task_id", task_id)
            except (OSError, json.JSONDecodeError):
                pass
        return cls(task_id=task_id, unverified_source=source,
                   ground_truth_source=ground_truth)


@dataclass
class RepairConfig:
    max_attempts: int = 10
    num_cex: int = 10
    max_z3: int = 5
    n_mutants: int = 5
    temperature: float = 1.0
    verifier_timeout: float = 120.0
    script_timeout: float = 60.0
    iteration_timeout: float = 600.0

    def __post_init__(self):
        for name in ("max_attempts", "num_cex", "max_z3", "n_mutants"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RepairConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class IterationRecord:
    index: int
    status: str = ""
    target_kind: str | None = None
    target_message: str | None = None
    query_attempts: list = field(default_factory=list)
    batch: list = field(default_factory=list)
    validated_count: int = 0
    triage: dict | None = None
    mutants: list = field(default_factory=list)
    chosen_proof: str | None = None
    note: str = ""

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "status": self.status,
            "target": (
                {"kind": self.target_kind, "message": self.target_message}
                if self.target_kind else None
            ),
            "query_attempts": self.query_attempts,
            "cex_batch": self.batch,
            "validated_count": self.validated_count,
            "triage": self.triage,
            "mutants": self.mutants,
            "chosen_proof": self.chosen_proof,
            "note": self.note,
        }


@dataclass
class RepairTrace:
    task_id: str
    final_status: str = "Fail"
    phase: str = "init_gen"
    iterations: list[IterationRecord] = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    final_proof: str = ""
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "task_id": self.task_id,
            "final_status": self.final_status,
            "phase": self.phase,
            "iterations": [it.to_json() for it in self.iterations],
            "ledger": self.ledger,
            "final_proof": self.final_proof,
            "wall_time": self.wall_time,
        }

    def write(self, path: str):
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)


class ExternalVerifier:
    """Production verify_fn: one scratch workspace per call."""

    def __init__(self, config: dict | None = None, timeout: float = 120.0,
                 workspace_root: str | None = None):
        self.config = config
        self.timeout = timeout
        self.workspace_root = workspace_root

    def __call__(self, source) -> VerifierReport:
        text = source if isinstance(source, str) else source.source_text
        with tempfile.TemporaryDirectory(
                prefix="cexverify-", dir=self.workspace_root) as workspace:
            return verify(text, workspace, timeout=self.timeout, config=self.config)


def initial_proof(task: TaskInput, llm) -> ProofDocument:
    """One-shot annotation generation; falls back to the input on any failure."""
    original = parse_proof(task.unverified_source)
    request = CompletionRequest(
        template_id=TemplateId.InitialProof,
        bindings={"program": task.unverified_source},
    )
    completions = llm.complete(request)
    if not completions:
        log.warning("initial generation produced nothing; using input unchanged")
        return original
    try:
        code = extract_code_block(completions[0][0], "rust")
    except NoCodeBlock:
        log.warning("initial generation had no code block; using input unchanged")
        return original
    try:
        return parse_proof(code)
    except ParseError as exc:
        log.warning("initial generation does not parse (%s); using input unchanged", exc)
        return original


def fix_compilation(proof: ProofDocument, raw_log: str,
                    original: ProofDocument, llm) -> ProofDocument:
    """Compilation-fixer path; reverts on spec violations or missing output."""
    request = CompletionRequest(
        template_id=TemplateId.CompilationFix,
        bindings={
            "proof_content": proof.source_text,
            "original_proof": original.source_text,
            "diff": source_model.diff(original, proof),
            "error_message": raw_log,
        },
    )
    completions = llm.complete(request)
    if not completions:
        return proof
    try:
        code = extract_code_block(completions[0][0], "rust")
    except NoCodeBlock:
        log.warning("fixer returned no code block; proof unchanged")
        return proof
    try:
        fixed = parse_proof(code)
    except ParseError as exc:
        log.warning("fixer output does not parse (%s); proof unchanged", exc)
        return proof
    verdict = check_spec_preserved(original, fixed)
    if not verdict.preserved:
        log.warning("fixer modified protected regions (%s); reverting",
                    [v[2] for v in verdict.violations])
        return proof
    return fixed


def _resolve_replay(proof: ProofDocument, target) -> source_model.ReplayProgram | None:
    site = proof.loop_at_line(target.span.start_line) if target.span.start_line else None
    if site is None and proof.loops:
        site = proof.loops[0]
    if site is None:
        return None
    try:
        return source_model.extract_loop(proof, site)
    except UnsupportedLoop as exc:
        log.warning("loop extraction unsupported (%s); proceeding without validation", exc)
        return None


def _mutant_replay_factory(base_replay, target):
    """Replay builder that re-renders the base replay with a mutant's invariants."""

    def factory(mutant):
        if base_replay is None or mutant.proof is None:
            return None
        site = None
        for cand in mutant.proof.loops:
            if (cand.enclosing_function + f"_loop_{cand.index}") == base_replay.loop_func_name:
                site = cand
                break
        if site is None and mutant.proof.loops:
            site = mutant.proof.loops[0]
        if site is None:
            return None
        return source_model.substitute_invariants(base_replay, list(site.invariants))

    return factory


def repair_task(task: TaskInput, config: RepairConfig, llm,
                runner: SolverRunner | None, verify_fn,
                trace_dir: str | None = None) -> RepairTrace:
    """Faithful outer control flow: initial generation, bounded repair loop,
    one final verify after the loop decides Pass/Fail."""
    started = time.monotonic()
    try:
        original = parse_proof(task.unverified_source)
    except ParseError as exc:
        raise TaskSetupError(f"task {task.task_id} does not parse: {exc}") from exc

    trace = RepairTrace(task_id=task.task_id)

    current = initial_proof(task, llm)
    report = verify_fn(current.source_text)
    if report.status == Status.Pass:
        trace.final_status = "Pass"
        trace.phase = "init_gen"
        trace.final_proof = current.source_text
        trace.ledger = llm.ledger.snapshot()
        trace.wall_time = time.monotonic() - started
        _maybe_write(trace, trace_dir)
        return trace

    trace.phase = "cex_repair"
    for t in range(1, config.max_attempts + 1):
        iteration = IterationRecord(index=t)
        trace.iterations.append(iteration)
        iter_start = time.monotonic()

        report = verify_fn(current.source_text)
        if report.status == Status.Pass:
            iteration.status = "pass"
            trace.final_status = "Pass"
            trace.final_proof = current.source_text
            trace.ledger = llm.ledger.snapshot()
            trace.wall_time = time.monotonic() - started
            _maybe_write(trace, trace_dir)
            return trace

        if report.status == Status.CompileError:
            iteration.status = "compile_fix"
            current = fix_compilation(current, report.raw_log, original, llm)
            iteration.chosen_proof = current.source_text
            continue

        target = prioritize(report.diagnostics)
        iteration.status = "cex_repair"
        iteration.target_kind = target.kind.value
        iteration.target_message = target.message

        replay = None
        if target.kind in cex_validator.INVARIANT_ERROR_KINDS:
            replay = _resolve_replay(current, target)

        batch = cex_engine.generate_counterexamples(
            current, target, config.num_cex, config.max_z3,
            runner, llm,
            extracted_loop=replay,
            console_log=report.raw_log,
            script_timeout=config.script_timeout,
            trace=iteration.query_attempts,
        ) if runner is not None else CexBatch(items=[], target=target,
                                              k_requested=config.num_cex)

        if (target.kind in cex_validator.INVARIANT_ERROR_KINDS
                and batch.items and replay is not None):
            batch = cex_validator.validate_batch(batch, replay, target.kind, verify_fn)
        iteration.batch = batch.to_json()
        iteration.validated_count = sum(
            1 for c in batch.items
            if c.validation == cex_engine.Validation.Validated)

        if time.monotonic() - iter_start > config.iteration_timeout:
            iteration.note = "iteration wall-clock cap hit after counterexample stage"
            continue

        verdict = repair_engine.triage(current, target, batch, llm,
                                       console_log=report.raw_log)
        iteration.triage = {"verdict": verdict.verdict.value,
                            "rationale": verdict.rationale}
        kind = repair_engine.select_mutator(verdict)
        mutants = repair_engine.generate_mutants(
            current, target, batch, verdict.rationale, kind,
            config.n_mutants, llm, original, console_log=report.raw_log)
        try:
            ordered, top = repair_engine.rank(
                mutants, batch, target, verify_fn,
                replay_factory=_mutant_replay_factory(replay, target))
        except NoViableMutant:
            iteration.mutants = [m.to_json() for m in mutants]
            iteration.note = "no viable mutant; proof unchanged"
            continue
        iteration.mutants = [m.to_json() for m in ordered]
        current = top.proof
        iteration.chosen_proof = current.source_text

        if time.monotonic() - iter_start > config.iteration_timeout:
            iteration.note = "iteration wall-clock cap hit after ranking"
            continue

    report = verify_fn(current.source_text)
    trace.final_status = "Pass" if report.status == Status.Pass else "Fail"
    trace.final_proof = current.source_text
    trace.ledger = llm.ledger.snapshot()
    trace.wall_time = time.monotonic() - started
    _maybe_write(trace, trace_dir)
    return trace


def _maybe_write(trace: RepairTrace, trace_dir: str | None):
    if trace_dir:
        trace.write(os.path.join(trace_dir, f"{trace.task_id}.trace.json"))
        for i, iteration in enumerate(trace.iterations, start=1):
            if iteration.batch:
                path = os.path.join(trace_dir, trace.task_id,
                                    f"iter{i:02d}", "cex_batch.json")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "w", encoding="utf-8") as fh:
                    json.dump(iteration.batch, fh, indent=1)
