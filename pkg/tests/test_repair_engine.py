"""Repair engine: triage parsing, mutator selection and generation, mutant
ranking with the pass short-circuit and blocking dominance.
"""

from __future__ import annotations

import random

import pytest

from cexrepair.cex_engine import CexBatch, Counterexample, TypedValue, Validation
from cexrepair.errors import NoViableMutant
from cexrepair.llm import CostLedger, Usage
from cexrepair.repair_engine import (
    Mutant,
    MutatorKind,
    TriageVerdict,
    TriageVerdictKind,
    generate_mutants,
    rank,
    select_mutator,
    triage,
)
from cexrepair.source_model import parse_proof
from cexrepair.verifier import (
    DiagnosticKind,
    Span,
    Status,
    VerifierReport,
    VerusDiagnostic,
)
from conftest import SUM_TO_N


class _ScriptedLLM:
    def __init__(self, completions):
        self.completions = completions
        self.calls = 0
        self.ledger = CostLedger()

    def complete(self, request):
        self.calls += 1
        batch = self.completions[min(self.calls - 1, len(self.completions) - 1)]
        if isinstance(batch, str):
            batch = [batch]
        return [(text, Usage(1, 1)) for text in batch[:request.n_samples]]


def _target(kind=DiagnosticKind.InvFailEnd, line=16):
    return VerusDiagnostic(kind=kind, message=kind.value,
                           span=Span(start_line=line, end_line=line))


class TestTriage:
    def test_strict_json_parsed(self):
        llm = _ScriptedLLM([
            'Reasoning...\n{"verdict": "wrong_fact", "rationale": "reachable states"}'])
        verdict = triage(parse_proof(SUM_TO_N), _target(), None, llm)
        assert verdict.verdict == TriageVerdictKind.wrong_fact
        assert verdict.rationale == "reachable states"

    def test_last_json_object_wins(self):
        llm = _ScriptedLLM([
            '{"verdict": "other", "rationale": "draft"}\n'
            'after more thought\n'
            '{"verdict": "too_weak", "rationale": "spurious"}'])
        verdict = triage(parse_proof(SUM_TO_N), _target(), None, llm)
        assert verdict.verdict == TriageVerdictKind.too_weak

    def test_extra_keys_not_accepted(self):
        llm = _ScriptedLLM([
            '{"verdict": "too_weak", "rationale": "x", "confidence": 1}',
            '{"verdict": "too_weak", "rationale": "x"}'])
        verdict = triage(parse_proof(SUM_TO_N), _target(), None, llm)
        assert verdict.rationale == "x"
        assert llm.calls == 2  # first completion rejected, one retry

    def test_double_parse_failure_falls_back(self):
        llm = _ScriptedLLM(["no json at all", "still nothing"])
        verdict = triage(parse_proof(SUM_TO_N), _target(), None, llm)
        assert verdict.verdict == TriageVerdictKind.other
        assert verdict.rationale == "triage-parse-failure"
        assert llm.calls == 2

    def test_unknown_verdict_literal_rejected(self):
        llm = _ScriptedLLM([
            '{"verdict": "kinda_weak", "rationale": "x"}',
            '{"verdict": "other", "rationale": "y"}'])
        verdict = triage(parse_proof(SUM_TO_N), _target(), None, llm)
        assert verdict.verdict == TriageVerdictKind.other
        assert verdict.rationale == "y"

    def test_empty_batch_allowed(self):
        llm = _ScriptedLLM(['{"verdict": "other", "rationale": "no cex given"}'])
        batch = CexBatch(items=[], target=_target(), k_requested=10)
        verdict = triage(parse_proof(SUM_TO_N), _target(), batch, llm)
        assert verdict.verdict == TriageVerdictKind.other


class TestSelectMutator:
    @pytest.mark.parametrize("verdict,expected", [
        (TriageVerdictKind.wrong_fact, MutatorKind.Replace),
        (TriageVerdictKind.too_weak, MutatorKind.Strengthen),
        (TriageVerdictKind.other, MutatorKind.Other),
    ])
    def test_table(self, verdict, expected):
        assert select_mutator(TriageVerdict(verdict, "")) == expected


def _fenced(code: str) -> str:
    return f"Here is the fix.\n```rust\n{code}```\n"


class TestGenerateMutants:
    def _run(self, completions, n=5):
        original = parse_proof(SUM_TO_N)
        llm = _ScriptedLLM([completions])
        return generate_mutants(
            original, _target(), None, "rationale", MutatorKind.Strengthen,
            n, llm, original)

    def test_five_parsed(self):
        variant = SUM_TO_N.replace("i <= n,", "i <= n,\n            sum >= 0,")
        mutants = self._run([_fenced(variant)] * 5)
        assert len(mutants) == 5
        assert all(m.spec_preserved for m in mutants)

    def test_no_fence_dropped(self):
        variant = SUM_TO_N.replace("i <= n,", "i <= n,\n            sum >= 0,")
        mutants = self._run([_fenced(variant), "prose only", _fenced(variant)], n=3)
        assert len(mutants) == 2

    def test_spec_violation_flagged(self):
        bad = SUM_TO_N.replace("result == n * (n + 1) / 2", "result >= 0")
        mutants = self._run([_fenced(bad)], n=1)
        assert len(mutants) == 1
        assert not mutants[0].spec_preserved

    def test_unparseable_marked_uncompilable(self):
        mutants = self._run([_fenced("fn {")], n=1)
        assert len(mutants) == 1
        assert not mutants[0].compilable

    def test_changed_lines_recorded(self):
        variant = SUM_TO_N.replace("i <= n,", "i <= n,\n            sum >= 0,")
        mutants = self._run([_fenced(variant)], n=1)
        assert mutants[0].changed_lines == 1


class _TableVerifier:
    """Looks verdicts up by source text; records Pass for listed texts."""

    def __init__(self, passing: set[str], goals: dict[str, int] | None = None):
        self.passing = passing
        self.goals = goals or {}

    def __call__(self, source) -> VerifierReport:
        text = source if isinstance(source, str) else source.source_text
        if text in self.passing:
            return VerifierReport(status=Status.Pass, verified_goals=self.goals.get(text, 2))
        return VerifierReport(status=Status.VerifyFail, errored_goals=1,
                              verified_goals=self.goals.get(text, 0))


def _mutant(index: int, marker: str) -> Mutant:
    source = SUM_TO_N.replace("i <= n,", f"i <= n,\n            sum >= {index + marker.count('x')},")
    # marker folded into a comment so each mutant's text is unique
    source = source.replace("fn main() {}", f"fn main() {{}} // {marker}{index}")
    return Mutant(proof=parse_proof(source), origin_sample_index=index)


class TestRank:
    def test_blocking_order(self):
        mutants = [_mutant(i, "blk") for i in range(3)]
        scores = {0: 3, 1: 10, 2: 0}
        batch = CexBatch(
            items=[Counterexample(assignments={"i": TypedValue("int", 0, "u32")},
                                  validation=Validation.Validated)],
            target=_target(DiagnosticKind.InvFailEnd),
            k_requested=10,
        )
        verify_fn = _TableVerifier(passing=set())

        import cexrepair.repair_engine as engine
        original_scorer = engine.blocking_score
        engine.blocking_score = lambda m, b, rf, vf: scores[m.origin_sample_index]
        try:
            ordered, top = rank(mutants, batch, _target(DiagnosticKind.InvFailEnd),
                                verify_fn, replay_factory=lambda m: object())
        finally:
            engine.blocking_score = original_scorer
        assert [m.origin_sample_index for m in ordered] == [1, 0, 2]
        assert top.origin_sample_index == 1

    def test_pass_short_circuit(self):
        mutants = [_mutant(i, "sc") for i in range(3)]
        verify_fn = _TableVerifier(passing={mutants[1].proof.source_text})
        ordered, top = rank(mutants, None, _target(DiagnosticKind.PostCondFail),
                            verify_fn)
        assert top is mutants[1]
        assert top.blocking_score is None  # scoring skipped on the pass path

    def test_goal_count_fallback_for_non_invariant(self):
        mutants = [_mutant(i, "gl") for i in range(3)]
        goals = {m.proof.source_text: g for m, g in zip(mutants, (1, 5, 3))}
        verify_fn = _TableVerifier(passing=set(), goals=goals)
        ordered, top = rank(mutants, None, _target(DiagnosticKind.PostCondFail),
                            verify_fn)
        assert [m.origin_sample_index for m in ordered] == [1, 2, 0]

    def test_tie_breaks_on_changed_lines_then_index(self):
        mutants = [_mutant(i, "tie") for i in range(3)]
        for m, lines in zip(mutants, (4, 1, 1)):
            m.changed_lines = lines
        verify_fn = _TableVerifier(passing=set())
        ordered, _ = rank(mutants, None, _target(DiagnosticKind.PostCondFail),
                          verify_fn)
        assert [m.origin_sample_index for m in ordered] == [1, 2, 0]

    def test_all_filtered_raises(self):
        bad = Mutant(proof=None, compilable=False, spec_preserved=False)
        with pytest.raises(NoViableMutant):
            rank([bad], None, _target(), _TableVerifier(passing=set()))

    def test_spec_violators_never_ranked(self):
        good = _mutant(0, "ok")
        bad = _mutant(1, "bad")
        bad.spec_preserved = False
        verify_fn = _TableVerifier(passing={bad.proof.source_text})
        ordered, top = rank([good, bad], None,
                            _target(DiagnosticKind.PostCondFail), verify_fn)
        assert bad not in ordered
        assert top is good

    def test_dominance_over_random_sets(self):
        rng = random.Random(7)
        target = _target(DiagnosticKind.InvFailEnd)
        batch = CexBatch(items=[], target=target, k_requested=10)
        import cexrepair.repair_engine as engine
        original_scorer = engine.blocking_score
        try:
            for trial in range(50):
                count = rng.randint(2, 6)
                mutants = [_mutant(i, f"t{trial}m") for i in range(count)]
                scores = {m.origin_sample_index: rng.choice([0, 0, 1, 2, 5, 9])
                          for m in mutants}
                engine.blocking_score = \
                    lambda m, b, rf, vf, s=scores: s[m.origin_sample_index]
                ordered, _ = rank(mutants, batch, target,
                                  _TableVerifier(passing=set()),
                                  replay_factory=lambda m: object())
                seen_zero = False
                for m in ordered:
                    if scores[m.origin_sample_index] == 0:
                        seen_zero = True
                    elif seen_zero:
                        pytest.fail("score-0 mutant ranked above a scoring one")
        finally:
            engine.blocking_score = original_scorer
