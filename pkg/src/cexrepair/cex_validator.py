"""Replay counterexamples against the extracted loop to confirm they witness
the targeted invariant failure, and decide whether mutants block them.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from .cex_engine import CexBatch, Counterexample, Validation
from .errors import MissingAssignment, ParseError, TypeRenderError
from .source_model import ReplayProgram, inject_into_replay
from .verifier import DiagnosticKind, Span, Status, VerifierReport

log = logging.getLogger(__name__)

INVARIANT_ERROR_KINDS = (DiagnosticKind.InvFailFront, DiagnosticKind.InvFailEnd)


class Observed(enum.Enum):
    FailsLoopStart = "FailsLoopStart"
    PassesStartFailsEnd = "PassesStartFailsEnd"
    PassesBoth = "PassesBoth"
    CompileError = "CompileError"


class Verdict(enum.Enum):
    Validated = "Validated"
    Rejected = "Rejected"


@dataclass
class ValidationOutcome:
    verdict: Verdict
    observed: Observed
    failing_assertion_index: int | None = None


@dataclass
class BlockingResult:
    blocked: bool
    observed: Observed


def _span_in(span: Span, candidates: list[tuple[int, Span]]) -> int | None:
    for index, cand in candidates:
        if span.start_line == cand.start_line or \
                cand.start_line <= span.start_line <= cand.end_line:
            return index
    return None


def _observe(replay: ReplayProgram, report: VerifierReport) -> tuple[Observed, int | None]:
    """Map the verifier's earliest failing assertion onto the replay structure."""
    if report.status == Status.CompileError:
        return Observed.CompileError, None
    failures = [
        d for d in report.diagnostics
        if d.kind in (DiagnosticKind.AssertFail, DiagnosticKind.InvFailFront,
                      DiagnosticKind.InvFailEnd)
    ]
    if report.status == Status.Timeout:
        return Observed.CompileError, None
    if not failures and report.status != Status.Pass:
        # verifier failed for a reason outside the symptom table (overflow in
        # the body under injected values, precondition on an intrinsic, ...)
        return Observed.CompileError, None
    if not failures:
        return Observed.PassesBoth, None
    earliest = min(failures, key=lambda d: (d.span.start_line, d.span.start_col))
    start_idx = _span_in(earliest.span, replay.loop_start_assertions)
    if start_idx is not None:
        return Observed.FailsLoopStart, start_idx
    end_idx = _span_in(earliest.span, replay.loop_end_assertions)
    if end_idx is not None:
        return Observed.PassesStartFailsEnd, end_idx
    return Observed.CompileError, None


def _run_injected(cex: Counterexample, replay: ReplayProgram, verify_fn
                  ) -> tuple[Observed, int | None]:
    try:
        injected = inject_into_replay(replay, cex)
    except (MissingAssignment, TypeRenderError, ParseError) as exc:
        log.warning("injection failed: %s", exc)
        return Observed.CompileError, None
    report = verify_fn(injected.source_text)
    return _observe(injected, report)


def validate(cex: Counterexample, replay: ReplayProgram,
             target_kind: DiagnosticKind, verify_fn) -> ValidationOutcome:
    """Check one counterexample against the symptom expected for its error kind.

    Front failures must already violate a loop-start assertion; induction
    failures must pass the start block and fail the end block.
    """
    if target_kind not in INVARIANT_ERROR_KINDS:
        raise ValueError(f"validation is defined for invariant errors, not {target_kind}")
    observed, failing_index = _run_injected(cex, replay, verify_fn)
    if target_kind == DiagnosticKind.InvFailFront:
        verdict = Verdict.Validated if observed == Observed.FailsLoopStart else Verdict.Rejected
    else:
        verdict = Verdict.Validated if observed == Observed.PassesStartFailsEnd else Verdict.Rejected
    return ValidationOutcome(verdict=verdict, observed=observed,
                             failing_assertion_index=failing_index)


def blocking_check(cex: Counterexample, replay_with_new_invariants: ReplayProgram,
                   target_kind: DiagnosticKind, verify_fn) -> BlockingResult:
    """Does the mutant's invariant set stop this counterexample's symptom?

    For front errors any outcome other than a loop-start violation counts as
    blocked; for induction errors the state must now be rejected at loop
    start or survive both blocks. A replay that no longer compiles blocks
    nothing (conservative).
    """
    observed, _ = _run_injected(cex, replay_with_new_invariants, verify_fn)
    if observed == Observed.CompileError:
        return BlockingResult(blocked=False, observed=observed)
    if target_kind == DiagnosticKind.InvFailFront:
        blocked = observed != Observed.FailsLoopStart
    else:
        blocked = observed in (Observed.FailsLoopStart, Observed.PassesBoth)
    return BlockingResult(blocked=blocked, observed=observed)


def validate_batch(batch: CexBatch, replay: ReplayProgram,
                   target_kind: DiagnosticKind, verify_fn) -> CexBatch:
    """Validate every item, recording the verdict on each counterexample."""
    for cex in batch.items:
        outcome = validate(cex, replay, target_kind, verify_fn)
        cex.validation = (
            Validation.Validated if outcome.verdict == Verdict.Validated
            else Validation.Rejected
        )
    return batch


def blocking_score(mutant, batch: CexBatch, replay_factory, verify_fn) -> int:
    """Count of validated counterexamples the mutant blocks.

    `replay_factory(mutant)` must return the replay already carrying the
    mutant's invariants. Unchecked and rejected items never contribute.
    """
    validated = [c for c in batch.items if c.validation == Validation.Validated]
    if not validated:
        return 0
    try:
        replay = replay_factory(mutant)
    except Exception as exc:  # mutant may not contain the target loop anymore
        log.warning("cannot build replay for mutant: %s", exc)
        return 0
    if replay is None:
        return 0
    score = 0
    for cex in validated:
        target_kind = batch.target.kind if batch.target else DiagnosticKind.InvFailEnd
        if blocking_check(cex, replay, target_kind, verify_fn).blocked:
            score += 1
    return score
