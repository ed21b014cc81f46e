"""Drive the external Verus binary and turn its console output into structured data.

The verifier is always run as a separate OS process; nothing in here links
against Verus. Exit codes are ignored on purpose: the console log is the
single source of truth, because Verus versions disagree about exit codes but
keep the error-block format stable.
"""

from __future__ import annotations

import enum
import os
import re
import shutil
import subprocess
import time
from dataclasses import dataclass, field

from .errors import EmptyDiagnostics, VerifierNotFound, WorkspaceError

VERUS_ENV_VAR = "CEXREPAIR_VERUS"
DEFAULT_TIMEOUT = 120.0


class Status(enum.Enum):
    Pass = "Pass"
    VerifyFail = "VerifyFail"
    CompileError = "CompileError"
    Timeout = "Timeout"


class DiagnosticKind(enum.Enum):
    InvFailFront = "InvFailFront"
    InvFailEnd = "InvFailEnd"
    PostCondFail = "PostCondFail"
    PreCondFail = "PreCondFail"
    PreCondFailVecLen = "PreCondFailVecLen"
    AssertFail = "AssertFail"
    ArithmeticFlow = "ArithmeticFlow"
    CompileError = "CompileError"
    Other = "Other"


@dataclass(frozen=True)
class Span:
    file: str = ""
    start_line: int = 0
    start_col: int = 0
    end_line: int = 0
    end_col: int = 0

    def __post_init__(self):
        if self.end_line and self.start_line > self.end_line:
            raise ValueError("span start after end")


@dataclass
class VerusDiagnostic:
    kind: DiagnosticKind
    message: str
    span: Span
    snippet: str = ""

    def render(self) -> str:
        """Re-serialize in the verifier's console format (used by round-trip tests)."""
        lines = [f"error: {self.message}"]
        if self.span.start_line:
            lines.append(f"  --> {self.span.file}:{self.span.start_line}:{self.span.start_col}")
        if self.snippet:
            lines.append("   |")
            for snip in self.snippet.splitlines():
                lines.append(f"   | {snip}")
        return "\n".join(lines)


@dataclass
class VerifierReport:
    status: Status
    diagnostics: list[VerusDiagnostic] = field(default_factory=list)
    verified_goals: int = 0
    errored_goals: int = 0
    raw_log: str = ""
    wall_time: float = 0.0


class RegionKind(enum.Enum):
    ExecutableCode = "ExecutableCode"
    Requires = "Requires"
    Ensures = "Ensures"
    Signature = "Signature"
    ReturnType = "ReturnType"


@dataclass
class PreservationVerdict:
    preserved: bool
    violations: list[tuple[RegionKind, Span, str]] = field(default_factory=list)


# Message fragments that identify a verification (not compilation) failure.
_VERIFICATION_PATTERNS: list[tuple[str, DiagnosticKind]] = [
    ("invariant not satisfied before loop", DiagnosticKind.InvFailFront),
    ("invariant not satisfied at end of loop body", DiagnosticKind.InvFailEnd),
    ("postcondition not satisfied", DiagnosticKind.PostCondFail),
    ("precondition not satisfied", DiagnosticKind.PreCondFail),
    ("assertion failed", DiagnosticKind.AssertFail),
    ("possible arithmetic underflow/overflow", DiagnosticKind.ArithmeticFlow),
    ("possible arithmetic overflow", DiagnosticKind.ArithmeticFlow),
    ("possible arithmetic underflow", DiagnosticKind.ArithmeticFlow),
    ("invariant not satisfied at end of loop", DiagnosticKind.InvFailEnd),
    ("decreases not satisfied", DiagnosticKind.Other),
]

# Compile-error fingerprints beyond the rustc `error[EXXXX]` form.
_COMPILE_HINTS = (
    "expected ",
    "unexpected token",
    "mismatched types",
    "cannot find",
    "unresolved import",
    "missing ",
    "unclosed delimiter",
    "mismatched closing delimiter",
    "not found in this scope",
    "unknown ",
    "cannot borrow",
    "borrow of",
    "use of moved value",
)

# Tolerant of `verification results: N verified, M errors` and the
# double-colon variant emitted by some Verus releases.
_SUMMARY_RE = re.compile(r"verification results:+\s*(\d+)\s+verified,\s*(\d+)\s+error")

_ERROR_HEAD_RE = re.compile(r"^error(\[(?P<code>E\d+)\])?: (?P<msg>.*)$")
_WARNING_HEAD_RE = re.compile(r"^warning(\[\w+\])?: ")
_LOCATION_RE = re.compile(r"^\s*-->\s*(?P<file>[^:]*):(?P<line>\d+):(?P<col>\d+)")


def classify_message(message: str, code: str | None = None) -> DiagnosticKind:
    low = message.lower()
    for fragment, kind in _VERIFICATION_PATTERNS:
        if fragment in low:
            return kind
    if code is not None:
        return DiagnosticKind.CompileError
    for hint in _COMPILE_HINTS:
        if low.startswith(hint) or f": {hint}" in low:
            return DiagnosticKind.CompileError
    if "aborting due to" in low:
        return DiagnosticKind.Other
    return DiagnosticKind.Other


def parse_diagnostics(raw_log: str) -> list[VerusDiagnostic]:
    """Split a Verus console log into one diagnostic per error block, in log order.

    Unrecognized error text maps to Other; rustc-style errors map to
    CompileError; the trailing `aborting due to N previous errors` line is
    bookkeeping, not a diagnostic.
    """
    diagnostics: list[VerusDiagnostic] = []
    lines = raw_log.splitlines()
    i = 0
    while i < len(lines):
        head = _ERROR_HEAD_RE.match(lines[i])
        if not head:
            i += 1
            continue
        message = head.group("msg").strip()
        if message.startswith("aborting due to"):
            i += 1
            continue
        kind = classify_message(message, head.group("code"))
        span = Span()
        snippet_lines: list[str] = []
        j = i + 1
        while j < len(lines):
            line = lines[j]
            if _ERROR_HEAD_RE.match(line) or _WARNING_HEAD_RE.match(line) \
                    or _SUMMARY_RE.search(line):
                break
            loc = _LOCATION_RE.match(line)
            if loc and not span.start_line:
                span = Span(
                    file=loc.group("file"),
                    start_line=int(loc.group("line")),
                    start_col=int(loc.group("col")),
                    end_line=int(loc.group("line")),
                    end_col=int(loc.group("col")),
                )
            elif "|" in line:
                body = line.split("|", 1)[1].strip()
                if body and not body.startswith("^"):
                    snippet_lines.append(body)
            elif not line.strip():
                j += 1
                break
            j += 1
        if kind == DiagnosticKind.PreCondFail and _looks_like_vec_len(message, snippet_lines):
            kind = DiagnosticKind.PreCondFailVecLen
        diagnostics.append(VerusDiagnostic(
            kind=kind,
            message=message,
            span=span,
            snippet="\n".join(snippet_lines),
        ))
        i = j
    return diagnostics


def _looks_like_vec_len(message: str, snippet_lines: list[str]) -> bool:
    joined = " ".join([message] + snippet_lines).lower()
    return ".len()" in joined and ("index" in joined or "i <" in joined or "< vec" in joined)


def count_verified_goals(report_or_log) -> int:
    """Verified-goal count from the summary line; 0 when no summary is present."""
    raw = report_or_log if isinstance(report_or_log, str) else report_or_log.raw_log
    m = _SUMMARY_RE.search(raw)
    return int(m.group(1)) if m else 0


def count_errored_goals(raw_log: str) -> int:
    m = _SUMMARY_RE.search(raw_log)
    return int(m.group(2)) if m else 0


# Lower value = repaired first. Compile errors are handled by the dedicated
# fixer path; among verification errors, invariant errors come first because
# they admit validated counterexamples, and bound-style errors are treated as
# weak-invariant symptoms.
PRIORITY_ORDER: dict[DiagnosticKind, int] = {
    DiagnosticKind.CompileError: 0,
    DiagnosticKind.InvFailFront: 1,
    DiagnosticKind.InvFailEnd: 2,
    DiagnosticKind.ArithmeticFlow: 3,
    DiagnosticKind.PreCondFailVecLen: 4,
    DiagnosticKind.PreCondFail: 5,
    DiagnosticKind.AssertFail: 6,
    DiagnosticKind.PostCondFail: 7,
    DiagnosticKind.Other: 8,
}


def prioritize(diagnostics: list[VerusDiagnostic]) -> VerusDiagnostic:
    """Pick the single diagnostic the current iteration will target."""
    if not diagnostics:
        raise EmptyDiagnostics("cannot prioritize an empty diagnostic list")
    return min(
        diagnostics,
        key=lambda d: (PRIORITY_ORDER[d.kind], d.span.start_line, d.span.start_col),
    )


def report_from_log(raw_log: str, wall_time: float = 0.0) -> VerifierReport:
    diagnostics = parse_diagnostics(raw_log)
    verified = count_verified_goals(raw_log)
    errored = count_errored_goals(raw_log)
    if any(d.kind == DiagnosticKind.CompileError for d in diagnostics):
        status = Status.CompileError
    elif not diagnostics and errored == 0:
        status = Status.Pass
    else:
        status = Status.VerifyFail
    return VerifierReport(
        status=status,
        diagnostics=diagnostics,
        verified_goals=verified,
        errored_goals=errored,
        raw_log=raw_log,
        wall_time=wall_time,
    )


def resolve_verifier_path(config: dict | None = None) -> str:
    path = None
    if config:
        path = (config.get("verifier") or {}).get("path")
    path = path or os.environ.get(VERUS_ENV_VAR)
    if not path:
        raise VerifierNotFound(
            f"no verifier configured: set verifier.path or ${VERUS_ENV_VAR}")
    if not (os.path.isfile(path) or shutil.which(path)):
        raise VerifierNotFound(f"verifier binary not found: {path}")
    return path


def verify(proof, workspace: str, timeout: float = DEFAULT_TIMEOUT,
           config: dict | None = None) -> VerifierReport:
    """Write `proof` into `workspace` and run the verifier on it.

    `proof` may be a ProofDocument or plain source text. A wall-clock overrun
    kills the process and yields a Timeout report carrying one synthetic
    Other diagnostic so downstream stages treat it like a verify failure.
    """
    binary = resolve_verifier_path(config)
    source = proof if isinstance(proof, str) else proof.source_text
    try:
        os.makedirs(workspace, exist_ok=True)
        target = os.path.join(workspace, "proof.rs")
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(source)
    except OSError as exc:
        raise WorkspaceError(f"cannot prepare workspace {workspace}: {exc}") from exc

    start = time.monotonic()
    try:
        proc = subprocess.run(
            [binary, target],
            capture_output=True,
            text=True,
            timeout=timeout,
            cwd=workspace,
        )
        raw_log = (proc.stdout or "") + (proc.stderr or "")
    except subprocess.TimeoutExpired as exc:
        elapsed = time.monotonic() - start
        partial = ""
        for stream in (exc.stdout, exc.stderr):
            if stream:
                partial += stream if isinstance(stream, str) else stream.decode("utf-8", "replace")
        report = VerifierReport(
            status=Status.Timeout,
            diagnostics=[VerusDiagnostic(
                kind=DiagnosticKind.Other,
                message=f"verifier timed out after {timeout}s",
                span=Span(file=target),
            )],
            raw_log=partial,
            wall_time=elapsed,
        )
        return report
    except FileNotFoundError as exc:
        raise VerifierNotFound(f"verifier binary not found: {binary}") from exc
    except OSError as exc:
        raise WorkspaceError(f"failed to invoke verifier: {exc}") from exc

    report = report_from_log(raw_log, wall_time=time.monotonic() - start)
    return report


def check_spec_preserved(original, candidate) -> PreservationVerdict:
    """Mechanical guard: annotation edits are free, everything else is frozen.

    Token streams are compared per region after comment/whitespace
    normalization, so formatting-only changes never count as violations and
    the LLM prompt's never-modify rule is enforced rather than trusted.
    """
    from . import source_model

    orig_doc = original if not isinstance(original, str) else source_model.parse_proof(original)
    cand_doc = candidate if not isinstance(candidate, str) else source_model.parse_proof(candidate)

    violations: list[tuple[RegionKind, Span, str]] = []

    orig_fns = {f.name: f for f in orig_doc.functions}
    cand_fns = {f.name: f for f in cand_doc.functions}

    for name in sorted(set(orig_fns) | set(cand_fns)):
        o = orig_fns.get(name)
        c = cand_fns.get(name)
        if o is None or c is None:
            fn = c or o
            doc = cand_doc if c is not None else orig_doc
            where = doc.span(fn.signature_start, fn.signature_end)
            violations.append((
                RegionKind.Signature,
                where,
                f"function {name!r} {'added' if o is None else 'removed'}",
            ))
            continue
        sig_span = cand_doc.span(c.signature_start, c.signature_end)
        body_span = cand_doc.span(c.body_start, c.body_end)
        checks = [
            (RegionKind.Signature, o.signature_tokens, c.signature_tokens, sig_span),
            (RegionKind.ReturnType, o.return_type_tokens, c.return_type_tokens, sig_span),
            (RegionKind.Requires, o.requires_tokens, c.requires_tokens, sig_span),
            (RegionKind.Ensures, o.ensures_tokens, c.ensures_tokens, sig_span),
            (RegionKind.ExecutableCode, o.executable_tokens, c.executable_tokens, body_span),
        ]
        for kind, otoks, ctoks, span in checks:
            if otoks != ctoks:
                violations.append((kind, span, f"{kind.value} of {name!r} changed"))

    return PreservationVerdict(preserved=not violations, violations=violations)
