"""Mutation-based counterexample-guided repair: triage the failure, run the
matching mutator, keep the compilable spec-preserving mutants, short-circuit
on a verifier pass, and rank the rest by blocking score or verified goals.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass

from .cex_engine import CexBatch
from .cex_validator import INVARIANT_ERROR_KINDS, blocking_score
from .errors import NoCodeBlock, NoViableMutant, ParseError
from .llm import CompletionRequest, TemplateId, extract_code_block, load_mutator_examples
from .source_model import ProofDocument, changed_line_count, diff, parse_proof
from .verifier import Status, VerifierReport, VerusDiagnostic, check_spec_preserved

log = logging.getLogger(__name__)

DEFAULT_N_MUTANTS = 5
TRIAGE_FALLBACK_RATIONALE = "triage-parse-failure"


class TriageVerdictKind(enum.Enum):
    wrong_fact = "wrong_fact"
    too_weak = "too_weak"
    other = "other"


@dataclass
class TriageVerdict:
    verdict: TriageVerdictKind
    rationale: str


class MutatorKind(enum.Enum):
    Strengthen = "Strengthen"  # too_weak
    Replace = "Replace"        # wrong_fact
    Other = "Other"


_MUTATOR_TEMPLATE = {
    MutatorKind.Strengthen: TemplateId.MutatorTooWeak,
    MutatorKind.Replace: TemplateId.MutatorWrongFact,
    MutatorKind.Other: TemplateId.MutatorOther,
}

_MUTATOR_EXAMPLES = {
    MutatorKind.Strengthen: "too_weak",
    MutatorKind.Replace: "wrong_fact",
    MutatorKind.Other: "other",
}


@dataclass
class Mutant:
    proof: ProofDocument | None
    compilable: bool = True
    verifier_report: VerifierReport | None = None
    blocking_score: int | None = None
    verified_goals: int | None = None
    spec_preserved: bool = True
    origin_sample_index: int = 0
    changed_lines: int = 0

    def to_json(self) -> dict:
        return {
            "origin_sample_index": self.origin_sample_index,
            "compilable": self.compilable,
            "spec_preserved": self.spec_preserved,
            "blocking_score": self.blocking_score,
            "verified_goals": self.verified_goals,
            "changed_lines": self.changed_lines,
            "status": self.verifier_report.status.value if self.verifier_report else None,
        }


_JSON_OBJECT_RE = re.compile(r"\{[^{}]*\}", re.DOTALL)


def _parse_triage_json(completion: str) -> TriageVerdict | None:
    """Strict parse of the last JSON object carrying exactly verdict+rationale."""
    for match in reversed(_JSON_OBJECT_RE.findall(completion)):
        try:
            obj = json.loads(match)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or set(obj.keys()) != {"verdict", "rationale"}:
            continue
        verdict = obj["verdict"]
        if verdict not in (v.value for v in TriageVerdictKind):
            continue
        return TriageVerdict(TriageVerdictKind(verdict), str(obj["rationale"]))
    return None


def format_cex_info(batch: CexBatch | None) -> str:
    if batch is None or not batch.items:
        return ""
    lines = []
    for i, cex in enumerate(batch.items, start=1):
        lines.append(f"CEX_{i} [{cex.validation.value}]: {cex.display()}")
    return "\n".join(lines)


def triage(proof: ProofDocument, target: VerusDiagnostic,
           batch: CexBatch | None, llm, console_log: str = "") -> TriageVerdict:
    """LLM failure classification; unparseable output retries once then
    defaults to `other`."""
    bindings = {
        "proof_content": proof.source_text,
        "error_type": target.kind.value,
        "error_message": target.message,
        "console_error_msg": console_log or target.message,
        "cex_info": format_cex_info(batch),
    }
    request = CompletionRequest(template_id=TemplateId.Triage, bindings=bindings)
    for _ in range(2):
        completions = llm.complete(request)
        if completions:
            verdict = _parse_triage_json(completions[0][0])
            if verdict is not None:
                return verdict
    return TriageVerdict(TriageVerdictKind.other, TRIAGE_FALLBACK_RATIONALE)


def select_mutator(verdict: TriageVerdict) -> MutatorKind:
    return {
        TriageVerdictKind.wrong_fact: MutatorKind.Replace,
        TriageVerdictKind.too_weak: MutatorKind.Strengthen,
        TriageVerdictKind.other: MutatorKind.Other,
    }[verdict.verdict]


def generate_mutants(proof: ProofDocument, target: VerusDiagnostic,
                     batch: CexBatch | None, rationale: str, kind: MutatorKind,
                     n: int, llm, original: ProofDocument,
                     console_log: str = "") -> list[Mutant]:
    """Sample n candidate proofs from the kind-specific mutator prompt.

    Completions without a code block are dropped; unparseable candidates are
    kept but marked non-compilable; spec violations are flagged immediately
    so ranking can never pick them.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bindings = {
        "examples": load_mutator_examples(_MUTATOR_EXAMPLES[kind]),
        "proof_content": proof.source_text,
        "verdict_rationale": rationale,
        "error_type": target.kind.value,
        "error_message": target.message,
        "console_error_msg": console_log or target.message,
        "counter_examples": format_cex_info(batch),
        "original_proof": original.source_text,
        "diff": diff(original, proof),
    }
    request = CompletionRequest(
        template_id=_MUTATOR_TEMPLATE[kind], bindings=bindings, n_samples=n)
    completions = llm.complete(request)
    mutants: list[Mutant] = []
    for index, (text, _) in enumerate(completions):
        try:
            code = extract_code_block(text, "rust")
        except NoCodeBlock:
            try:
                code = extract_code_block(text, "")
            except NoCodeBlock:
                log.warning("mutator sample %d had no code block, dropped", index)
                continue
        try:
            candidate = parse_proof(code)
            compilable = True
        except ParseError as exc:
            log.warning("mutator sample %d does not parse: %s", index, exc)
            mutants.append(Mutant(
                proof=None, compilable=False, spec_preserved=False,
                origin_sample_index=index))
            continue
        verdict = check_spec_preserved(original, candidate)
        if not verdict.preserved:
            log.warning("mutator sample %d violates spec preservation: %s",
                        index, [v[2] for v in verdict.violations])
        mutants.append(Mutant(
            proof=candidate,
            compilable=compilable,
            spec_preserved=verdict.preserved,
            origin_sample_index=index,
            changed_lines=changed_line_count(diff(proof, candidate)),
        ))
    return mutants


def rank(mutants: list[Mutant], batch: CexBatch | None,
         target: VerusDiagnostic, verify_fn,
         replay_factory=None) -> tuple[list[Mutant], Mutant]:
    """Verify each viable mutant, short-circuit on a pass, else order by score.

    Invariant targets rank on blocking score, everything else on verified
    goals; ties prefer smaller diffs, then earlier samples.
    """
    viable = [m for m in mutants if m.compilable and m.spec_preserved and m.proof is not None]
    for mutant in viable:
        if mutant.verifier_report is None:
            mutant.verifier_report = verify_fn(mutant.proof.source_text)
        mutant.verified_goals = mutant.verifier_report.verified_goals
        if mutant.verifier_report.status == Status.CompileError:
            mutant.compilable = False
    viable = [m for m in viable if m.compilable]
    if not viable:
        raise NoViableMutant("no compilable, spec-preserving mutant survived")

    for mutant in viable:
        if mutant.verifier_report.status == Status.Pass:
            rest = [m for m in viable if m is not mutant]
            return [mutant] + rest, mutant

    use_blocking = (
        target.kind in INVARIANT_ERROR_KINDS
        and batch is not None
        and replay_factory is not None
    )
    if use_blocking:
        for mutant in viable:
            mutant.blocking_score = blocking_score(
                mutant, batch, replay_factory, verify_fn)
        key = lambda m: (-(m.blocking_score or 0), m.changed_lines, m.origin_sample_index)
    else:
        key = lambda m: (-(m.verified_goals or 0), m.changed_lines, m.origin_sample_index)

    ordered = sorted(viable, key=key)
    return ordered, ordered[0]
