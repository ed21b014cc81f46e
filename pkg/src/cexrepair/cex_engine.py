"""Counterexample generation: prompt the LLM for a solver script, execute it
through a pluggable runner, normalize the raw models into typed source-level
counterexamples, and gate batch quality with retry-with-feedback.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import subprocess
import time
from dataclasses import dataclass, field, replace

from .errors import (
    MalformedAggregate,
    NoCodeBlock,
    NonContiguousVector,
    RangeViolation,
    RunnerUnavailable,
)
from .llm import CompletionRequest, TemplateId
from .source_model import ProofDocument, ReplayProgram, seq_element_type, strip_ref
from .verifier import VerusDiagnostic

log = logging.getLogger(__name__)

DEFAULT_MAX_Z3 = 5
DEFAULT_SCRIPT_TIMEOUT = 60.0

# Value ranges for the machine integer types a solver model may assign
# (64-bit usize/isize). `int` is unbounded and `nat` is non-negative.
TYPE_RANGES: dict[str, tuple[int | None, int | None]] = {
    "u8": (0, 2**8 - 1),
    "u16": (0, 2**16 - 1),
    "u32": (0, 2**32 - 1),
    "u64": (0, 2**64 - 1),
    "u128": (0, 2**128 - 1),
    "i8": (-(2**7), 2**7 - 1),
    "i16": (-(2**15), 2**15 - 1),
    "i32": (-(2**31), 2**31 - 1),
    "i64": (-(2**63), 2**63 - 1),
    "i128": (-(2**127), 2**127 - 1),
    "usize": (0, 2**64 - 1),
    "isize": (-(2**63), 2**63 - 1),
    "int": (None, None),
    "nat": (0, None),
}


def check_int_range(name: str, type_name: str, value: int):
    bounds = TYPE_RANGES.get(type_name)
    if bounds is None:
        return
    lo, hi = bounds
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise RangeViolation(name, type_name, value)


@dataclass(frozen=True)
class TypedValue:
    kind: str  # int | bool | seq | text
    value: object
    machine_type: str | None = None

    def display(self) -> str:
        if self.kind == "seq":
            return "vec![" + ",".join(str(v) for v in self.value) + "]"
        if self.kind == "bool":
            return "true" if self.value else "false"
        return str(self.value)

    def to_raw(self):
        """Back to the flat scalar-or-text form a solver report carries."""
        if self.kind == "seq":
            return "vec![" + ", ".join(str(v) for v in self.value) + "]"
        return self.value


class Validation(enum.Enum):
    Unchecked = "Unchecked"
    Validated = "Validated"
    Rejected = "Rejected"


@dataclass
class Counterexample:
    assignments: dict[str, TypedValue]
    source: int = 1  # 1-based attempt index that produced it
    validation: Validation = Validation.Unchecked

    @property
    def distinct_key(self) -> str:
        return json.dumps(
            {k: [v.kind, v.display()] for k, v in sorted(self.assignments.items())},
            sort_keys=True,
        )

    def display(self) -> str:
        return ", ".join(f"{k}={v.display()}" for k, v in self.assignments.items())

    def to_json(self) -> dict:
        return {
            "assignments": {k: v.display() for k, v in self.assignments.items()},
            "validation": self.validation.value,
            "attempt": self.source,
        }


@dataclass
class CexBatch:
    items: list[Counterexample]
    target: VerusDiagnostic | None
    k_requested: int

    def __len__(self) -> int:
        return len(self.items)

    def to_json(self) -> list[dict]:
        return [c.to_json() for c in self.items]


class GateReason(enum.Enum):
    TooFew = "TooFew"
    MissingVariables = "MissingVariables"


@dataclass
class GateFail:
    reason: GateReason
    kept: int = 0
    dropped: int = 0


@dataclass
class SolverQuery:
    script_text: str
    target_error: VerusDiagnostic | None
    attempt_index: int
    prompt_text: str = ""

    def __post_init__(self):
        if not self.script_text:
            raise ValueError("solver query script must be non-empty")
        if self.attempt_index < 1:
            raise ValueError("attempt_index is 1-based")


class SolverStatus(enum.Enum):
    sat = "sat"
    unsat = "unsat"
    unknown = "unknown"
    runtime_error = "runtime_error"
    timeout = "timeout"


@dataclass
class SolverReport:
    status: SolverStatus
    raw_models: list[dict] = field(default_factory=list)
    stderr: str = ""
    wall_time: float = 0.0

    def __post_init__(self):
        if self.raw_models and self.status is not SolverStatus.sat:
            raise ValueError("raw models only accompany a sat status")


def report_from_wire(payload: dict, wall_time: float = 0.0) -> SolverReport:
    status = SolverStatus(payload.get("status", "runtime_error"))
    models = payload.get("results") or []
    if status is not SolverStatus.sat:
        models = []
    return SolverReport(
        status=status,
        raw_models=[dict(m) for m in models],
        stderr=payload.get("stderr", ""),
        wall_time=payload.get("elapsed_ms", wall_time * 1000.0) / 1000.0,
    )


class SolverRunner:
    """Executes a solver script in isolation and reports the protocol globals."""

    def run(self, script_text: str, timeout: float) -> SolverReport:
        raise NotImplementedError


class FixtureRunner(SolverRunner):
    """Serves canned reports in invocation order from a fixture directory.

    Files named report_*.json (sorted) each hold one wire-format report; the
    runner replays them one per call and raises once exhausted.
    """

    def __init__(self, fixtures_dir: str):
        self.fixtures_dir = fixtures_dir
        self._cursor = 0

    def _files(self) -> list[str]:
        try:
            names = sorted(
                n for n in os.listdir(self.fixtures_dir)
                if n.startswith("report_") and n.endswith(".json")
            )
        except OSError as exc:
            raise RunnerUnavailable(f"fixture dir unreadable: {exc}") from exc
        return [os.path.join(self.fixtures_dir, n) for n in names]

    def run(self, script_text: str, timeout: float) -> SolverReport:
        files = self._files()
        if self._cursor >= len(files):
            raise RunnerUnavailable(
                f"fixture runner exhausted after {len(files)} canned reports")
        path = files[self._cursor]
        self._cursor += 1
        with open(path, encoding="utf-8") as fh:
            return report_from_wire(json.load(fh))


SENTINEL_BEGIN = "===CEXREPAIR_BEGIN==="
SENTINEL_END = "===CEXREPAIR_END==="


class ShimRunner(SolverRunner):
    """Runs scripts through the external shim executable's wire protocol."""

    def __init__(self, shim_path: str | None = None, workdir: str | None = None):
        self.shim_path = shim_path or os.environ.get("CEXREPAIR_SHIM", "cexrepair-shim")
        self.workdir = workdir

    def run(self, script_text: str, timeout: float) -> SolverReport:
        import tempfile

        start = time.monotonic()
        with tempfile.TemporaryDirectory(prefix="cexshim-") as tmp:
            script_path = os.path.join(tmp, "query.py")
            with open(script_path, "w", encoding="utf-8") as fh:
                fh.write(script_text)
            cmd = [self.shim_path, "--script", script_path,
                   "--timeout", str(int(math.ceil(timeout)))]
            try:
                proc = subprocess.run(
                    cmd,
                    capture_output=True,
                    text=True,
                    timeout=timeout + 30,
                    cwd=self.workdir or tmp,
                )
            except FileNotFoundError as exc:
                raise RunnerUnavailable(f"shim not found: {self.shim_path}") from exc
            except subprocess.TimeoutExpired as exc:
                raise RunnerUnavailable("shim itself timed out") from exc
        if proc.returncode != 0:
            raise RunnerUnavailable(
                f"shim exited {proc.returncode}: {proc.stderr[:500]}")
        payload = parse_wire_output(proc.stdout)
        return report_from_wire(payload, wall_time=time.monotonic() - start)


def parse_wire_output(stdout: str) -> dict:
    """Extract the single JSON report framed by the shim's sentinel lines."""
    lines = stdout.splitlines()
    try:
        begin = lines.index(SENTINEL_BEGIN)
        end = lines.index(SENTINEL_END, begin + 1)
    except ValueError as exc:
        raise RunnerUnavailable("shim output missing sentinel frame") from exc
    body = "\n".join(lines[begin + 1:end]).strip()
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise RunnerUnavailable(f"shim report is not valid JSON: {exc}") from exc


def run_query(query: SolverQuery, runner: SolverRunner,
              timeout: float = DEFAULT_SCRIPT_TIMEOUT) -> SolverReport:
    return runner.run(query.script_text, timeout)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

_NAMESPACED_RE = re.compile(r"^__vec__(?P<base>.+)__(?P<slot>\d+|len)$")
_LEGACY_RE = re.compile(r"^(?P<base>.+?)_(?P<slot>\d+|len)$")
_AGGREGATE_RE = re.compile(r"^\s*vec!\[(?P<items>.*)\]\s*$", re.DOTALL)
_INT_STRING_RE = re.compile(r"^-?\d+$")


def _coerce_scalar(value) -> int | bool | str:
    if isinstance(value, bool) or isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if _INT_STRING_RE.match(text):
            return int(text)
        if text in ("true", "True"):
            return True
        if text in ("false", "False"):
            return False
        return value
    return str(value)


def _parse_aggregate(name: str, text: str) -> list[int]:
    m = _AGGREGATE_RE.match(text)
    if not m:
        raise MalformedAggregate(name, text)
    items_text = m.group("items").strip()
    if not items_text:
        return []
    items = []
    for chunk in items_text.split(","):
        chunk = chunk.strip()
        if not _INT_STRING_RE.match(chunk):
            raise MalformedAggregate(name, text)
        items.append(int(chunk))
    return items


def normalize_model(raw: dict, proof_types: dict[str, str] | None = None) -> Counterexample:
    """Fold namespaced vector scalars, parse aggregates, and enforce type ranges.

    Accepts the `__vec__<v>__<i>` convention, the legacy `<v>_<i>`/`<v>_len`
    names (only when `<v>` is known to be a sequence), and aggregated
    `"vec![..]"` strings. Explicit elements win over a mismatched `__len`:
    a larger length pads zeros with a warning, a smaller one truncates.
    """
    proof_types = {k: strip_ref(v) for k, v in (proof_types or {}).items()}
    seq_names = {n for n, t in proof_types.items() if seq_element_type(t)}

    vec_elements: dict[str, dict[int, int]] = {}
    vec_lens: dict[str, int] = {}
    scalars: dict[str, object] = {}

    for name, raw_value in raw.items():
        value = _coerce_scalar(raw_value)
        m = _NAMESPACED_RE.match(name)
        if m is None and name not in proof_types:
            lm = _LEGACY_RE.match(name)
            if lm and (lm.group("base") in seq_names
                       or (lm.group("slot") == "len" and _base_has_elements(raw, lm.group("base")))):
                m = lm
        if m:
            base = m.group("base")
            slot = m.group("slot")
            if slot == "len":
                vec_lens[base] = int(value)
            else:
                vec_elements.setdefault(base, {})[int(slot)] = int(value)
            continue
        scalars[name] = value

    assignments: dict[str, TypedValue] = {}

    for name, value in scalars.items():
        declared = proof_types.get(name, "")
        if isinstance(value, str):
            if _AGGREGATE_RE.match(value):
                items = _parse_aggregate(name, value)
                assignments[name] = _make_seq(name, items, declared)
            else:
                assignments[name] = TypedValue("text", value)
            continue
        if isinstance(value, bool):
            if declared and declared not in ("bool", ""):
                raise RangeViolation(name, declared, value)
            assignments[name] = TypedValue("bool", value)
            continue
        machine = declared if declared in TYPE_RANGES else None
        if machine:
            check_int_range(name, machine, value)
        assignments[name] = TypedValue("int", value, machine_type=machine)

    for base, elements in vec_elements.items():
        indices = sorted(elements)
        if indices != list(range(len(indices))):
            raise NonContiguousVector(base)
        items = [elements[i] for i in indices]
        if base in vec_lens:
            want = vec_lens[base]
            if want > len(items):
                log.warning("vector %s: __len %d exceeds %d explicit elements, padding zeros",
                            base, want, len(items))
                items = items + [0] * (want - len(items))
            elif want < len(items):
                items = items[:want]
        assignments[base] = _make_seq(base, items, proof_types.get(base, ""))

    for base, want in vec_lens.items():
        if base not in assignments:
            assignments[base] = _make_seq(base, [0] * want, proof_types.get(base, ""))

    # deterministic order: follow the proof's declaration order, extras after
    ordered: dict[str, TypedValue] = {}
    for name in proof_types:
        if name in assignments:
            ordered[name] = assignments.pop(name)
    ordered.update(assignments)
    return Counterexample(assignments=ordered)


def _base_has_elements(raw: dict, base: str) -> bool:
    return any(_LEGACY_RE.match(k) and _LEGACY_RE.match(k).group("base") == base
               and _LEGACY_RE.match(k).group("slot") != "len" for k in raw)


def _make_seq(name: str, items: list[int], declared: str) -> TypedValue:
    elem_type = seq_element_type(declared) if declared else None
    if elem_type and elem_type in TYPE_RANGES:
        for v in items:
            check_int_range(name, elem_type, v)
    return TypedValue("seq", tuple(items), machine_type=elem_type)


# ---------------------------------------------------------------------------
# prompting and gating
# ---------------------------------------------------------------------------

def make_cex_prompt(proof: ProofDocument, target: VerusDiagnostic, k: int,
                    extracted_loop: ReplayProgram | None = None,
                    console_log: str = "",
                    feedback: dict | None = None) -> CompletionRequest:
    if k < 1:
        raise ValueError("k must be >= 1")
    loop_section = ""
    if extracted_loop is not None:
        loop_section = (
            "Extracted standalone loop function (the failing loop, isolated):\n"
            "```rust\n" + extracted_loop.source_text + "```\n"
        )
    bindings = {
        "num_cex": k,
        "proof_content": proof.source_text,
        "extracted_loop_section": loop_section,
        "error_type": target.kind.value,
        "error_message": target.message,
        "console_error_msg": console_log,
    }
    template = TemplateId.CexQuery
    if feedback is not None:
        template = TemplateId.CexQueryFeedback
        bindings.update({
            "prev_status": feedback.get("status", ""),
            "prev_stderr": feedback.get("stderr", "")[:2000],
            "prev_gate": feedback.get("gate", ""),
        })
    return CompletionRequest(template_id=template, bindings=bindings)


def target_loop_variables(proof: ProofDocument, target: VerusDiagnostic | None) -> list[str]:
    if target is None or not target.span.start_line:
        return []
    site = proof.loop_at_line(target.span.start_line)
    if site is None:
        return []
    return [name for name, _ in site.live_variables]


def gate_batch(models: list[Counterexample], proof: ProofDocument, k: int,
               target: VerusDiagnostic | None = None) -> CexBatch | GateFail:
    """Deduplicate, require complete variable assignments, accept at >= ceil(k/2)."""
    required = target_loop_variables(proof, target)
    complete: list[Counterexample] = []
    dropped = 0
    for model in models:
        missing = [v for v in required if v not in model.assignments]
        if missing:
            dropped += 1
            log.warning("dropping counterexample missing %s", ", ".join(missing))
            continue
        complete.append(model)
    seen: set[str] = set()
    deduped: list[Counterexample] = []
    for model in complete:
        key = model.distinct_key
        if key in seen:
            continue
        seen.add(key)
        deduped.append(model)
    threshold = math.ceil(k / 2)
    if len(deduped) < threshold:
        reason = GateReason.MissingVariables if dropped else GateReason.TooFew
        return GateFail(reason=reason, kept=len(deduped), dropped=dropped)
    return CexBatch(items=deduped, target=target, k_requested=k)


def generate_counterexamples(proof: ProofDocument, target: VerusDiagnostic,
                             k: int, max_z3: int, runner: SolverRunner, llm,
                             extracted_loop: ReplayProgram | None = None,
                             console_log: str = "",
                             script_timeout: float = DEFAULT_SCRIPT_TIMEOUT,
                             trace: list | None = None) -> CexBatch:
    """Up to max_z3 attempts of prompt -> script -> run -> normalize -> gate.

    Each failed attempt feeds a structured status/stderr/gate block back into
    the next prompt. An empty batch is a legitimate outcome; the pipeline
    continues with unvalidated repair.
    """
    if max_z3 < 1:
        raise ValueError("max_z3 must be >= 1")
    proof_types = _declared_types(proof, target)
    feedback: dict | None = None
    for attempt in range(1, max_z3 + 1):
        request = make_cex_prompt(proof, target, k, extracted_loop, console_log, feedback)
        completions = llm.complete(request)
        if not completions:
            feedback = {"status": "no_completion", "stderr": "", "gate": ""}
            continue
        text = completions[0][0]
        try:
            script = TemplateIdScript.extract(text)
        except NoCodeBlock:
            feedback = {"status": "no_script", "stderr": "completion had no fenced python block", "gate": ""}
            _record(trace, attempt, request, None, None, "no_script")
            continue
        query = SolverQuery(script_text=script, target_error=target,
                            attempt_index=attempt, prompt_text=request.render())
        report = run_query(query, runner, script_timeout)
        if report.status is not SolverStatus.sat:
            feedback = {"status": report.status.value, "stderr": report.stderr, "gate": ""}
            _record(trace, attempt, request, query, report, report.status.value)
            continue
        models: list[Counterexample] = []
        for raw in report.raw_models:
            try:
                cex = normalize_model(raw, proof_types)
            except (RangeViolation, NonContiguousVector, MalformedAggregate) as exc:
                log.warning("dropping malformed model: %s", exc)
                continue
            models.append(replace(cex, source=attempt))
        gated = gate_batch(models, proof, k, target)
        if isinstance(gated, GateFail):
            feedback = {
                "status": "sat",
                "stderr": report.stderr,
                "gate": f"{gated.reason.value}: kept {gated.kept}, need {math.ceil(k / 2)}",
            }
            _record(trace, attempt, request, query, report, gated.reason.value)
            continue
        _record(trace, attempt, request, query, report, "accepted")
        return gated
    return CexBatch(items=[], target=target, k_requested=k)


class TemplateIdScript:
    """Fence extraction helper kept separate for test injection."""

    @staticmethod
    def extract(completion: str) -> str:
        from .llm import extract_code_block

        try:
            return extract_code_block(completion, "python")
        except NoCodeBlock:
            return extract_code_block(completion, "")


def _declared_types(proof: ProofDocument, target: VerusDiagnostic | None) -> dict[str, str]:
    types: dict[str, str] = {}
    site = None
    if target is not None and target.span.start_line:
        site = proof.loop_at_line(target.span.start_line)
    if site is not None:
        for name, ty in site.live_variables:
            types[name] = ty
        return types
    for fn in proof.functions:
        for name, ty in fn.params:
            types.setdefault(name, ty)
    for site in proof.loops:
        for name, ty in site.live_variables:
            types.setdefault(name, ty)
    return types


def _record(trace: list | None, attempt: int, request, query, report, outcome: str):
    if trace is None:
        return
    trace.append({
        "attempt": attempt,
        "template": request.template_id.value,
        "script": query.script_text if query else None,
        "solver_status": report.status.value if report else None,
        "outcome": outcome,
    })


def write_batch(batch: CexBatch, path: str):
    """Persist a batch as the task-trace cex_batch.json artifact."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(batch.to_json(), fh, indent=1)
