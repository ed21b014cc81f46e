"""Region-structured model of Verus source files plus the source-to-source
transformations the repair loop needs: loop extraction into a standalone
replay function, invariant-to-assertion translation, counterexample
injection, invariant substitution, greedy annotation pruning, and diffing.

This is deliberately not a full Rust parser. It tokenizes, matches brackets,
and recognizes the handful of surface constructs that matter here (functions
with requires/ensures, loops with invariant/decreases clauses, asserts, proof
blocks, ghost lets). Everything else passes through untouched as opaque
token runs, which is exactly what the preservation guard wants to compare.
"""

from __future__ import annotations

import bisect
import difflib
import enum
import re
from dataclasses import dataclass, field, replace

from .errors import (
    MissingAssignment,
    ParseError,
    NotVerified,
    TypeRenderError,
    UnsupportedLoop,
)
from .verifier import Span, Status

# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_MULTI_PUNCT = [
    "<==>", "<<=", ">>=", "&&&", "|||", "..=",
    "==>", "<==", "->", "=>", "::", "..", "&&", "||",
    "==", "!=", "<=", ">=", "<<", ">>",
    "+=", "-=", "*=", "/=", "%=", "^=", "&=", "|=",
]

_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | set("0123456789")
_DIGITS = set("0123456789")

KEYWORDS = {
    "fn", "let", "mut", "if", "else", "while", "loop", "for", "in", "return",
    "break", "continue", "match", "struct", "enum", "impl", "trait", "pub",
    "use", "mod", "const", "static", "ref", "move", "true", "false", "as",
    "where", "unsafe", "self", "Self", "type", "dyn",
}


@dataclass(frozen=True)
class Token:
    kind: str  # ident | num | str | char | lifetime | punct
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c == "/" and i + 1 < n:
            if text[i + 1] == "/":
                j = text.find("\n", i)
                i = n if j < 0 else j + 1
                continue
            if text[i + 1] == "*":
                depth = 1
                j = i + 2
                while j < n - 1 and depth:
                    if text[j] == "/" and text[j + 1] == "*":
                        depth += 1
                        j += 2
                    elif text[j] == "*" and text[j + 1] == "/":
                        depth -= 1
                        j += 2
                    else:
                        j += 1
                if depth:
                    raise _parse_error(text, i, "unterminated block comment")
                i = j
                continue
        if c in _IDENT_START:
            j = i + 1
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            tokens.append(Token("ident", text[i:j], i, j))
            i = j
            continue
        if c in _DIGITS:
            j = i + 1
            if c == "0" and j < n and text[j] in "xXbBoO":
                j += 1
                while j < n and (text[j] in _IDENT_CONT):
                    j += 1
            else:
                while j < n and (text[j] in _IDENT_CONT or text[j] == "."):
                    if text[j] == "." and (j + 1 >= n or text[j + 1] == "."):
                        break  # range operator, not a decimal point
                    j += 1
            tokens.append(Token("num", text[i:j], i, j))
            i = j
            continue
        if c == '"':
            j = i + 1
            while j < n:
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == '"':
                    j += 1
                    break
                j += 1
            else:
                raise _parse_error(text, i, "unterminated string literal")
            tokens.append(Token("str", text[i:j], i, j))
            i = j
            continue
        if c == "'":
            # char literal or lifetime
            if i + 2 < n and text[i + 2] == "'" and text[i + 1] != "\\":
                tokens.append(Token("char", text[i:i + 3], i, i + 3))
                i += 3
                continue
            if i + 3 < n and text[i + 1] == "\\" and text[i + 3] == "'":
                tokens.append(Token("char", text[i:i + 4], i, i + 4))
                i += 4
                continue
            j = i + 1
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            tokens.append(Token("lifetime", text[i:j], i, j))
            i = j
            continue
        matched = False
        for op in _MULTI_PUNCT:
            if text.startswith(op, i):
                tokens.append(Token("punct", op, i, i + len(op)))
                i += len(op)
                matched = True
                break
        if matched:
            continue
        tokens.append(Token("punct", c, i, i + 1))
        i += 1
    return tokens


class LineIndex:
    """Byte offset -> 1-based (line, col)."""

    def __init__(self, text: str):
        self._starts = [0]
        for m in re.finditer("\n", text):
            self._starts.append(m.end())

    def locate(self, offset: int) -> tuple[int, int]:
        line = bisect.bisect_right(self._starts, offset)
        return line, offset - self._starts[line - 1] + 1

    def span(self, start: int, end: int, file: str = "") -> Span:
        sl, sc = self.locate(start)
        el, ec = self.locate(max(start, end - 1))
        return Span(file=file, start_line=sl, start_col=sc, end_line=el, end_col=ec)


def _parse_error(text: str, offset: int, message: str) -> ParseError:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return ParseError(message, line, col)


# ---------------------------------------------------------------------------
# document model
# ---------------------------------------------------------------------------

class AnnotationKind(enum.Enum):
    Invariant = "Invariant"
    Assert = "Assert"
    ProofBlock = "ProofBlock"
    Decreases = "Decreases"
    Ghost = "Ghost"


@dataclass
class AnnotationRegion:
    kind: AnnotationKind
    start: int
    end: int
    expression: str
    # For invariant clause items: separator comma and owning clause keyword,
    # tracked so pruning can excise cleanly.
    sep_start: int = -1
    sep_end: int = -1
    clause_kw_start: int = -1
    clause_kw_end: int = -1
    sibling_exprs: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class FunctionRegion:
    name: str
    signature_start: int
    signature_end: int
    params: list[tuple[str, str]]
    return_binding: tuple[str | None, str]
    requires_regions: list[tuple[int, int]]
    ensures_regions: list[tuple[int, int]]
    body_start: int
    body_end: int
    signature_tokens: tuple = ()
    return_type_tokens: tuple = ()
    requires_tokens: tuple = ()
    ensures_tokens: tuple = ()
    executable_tokens: tuple = ()

    @property
    def signature_span_pair(self) -> tuple[int, int]:
        return self.signature_start, self.signature_end


@dataclass
class LoopSite:
    enclosing_function: str
    kind: str  # while | loop | for
    header_start: int
    header_end: int
    condition_text: str
    invariants: list[str]
    invariant_regions: list[tuple[int, int]]
    body_start: int
    body_end: int
    live_variables: list[tuple[str, str]]
    loop_isolation: bool = True
    index: int = 1
    decreases_text: str = ""
    mutated: frozenset[str] = frozenset()


@dataclass
class ProofDocument:
    source_text: str
    functions: list[FunctionRegion]
    loops: list[LoopSite]
    annotations: list[AnnotationRegion]
    _line_index: LineIndex = None  # type: ignore[assignment]

    @property
    def line_index(self) -> LineIndex:
        if self._line_index is None:
            self._line_index = LineIndex(self.source_text)
        return self._line_index

    def span(self, start: int, end: int, file: str = "") -> Span:
        return self.line_index.span(start, end, file)

    def function(self, name: str) -> FunctionRegion | None:
        for fn in self.functions:
            if fn.name == name:
                return fn
        return None

    def loop_at_line(self, line: int) -> LoopSite | None:
        """Innermost loop whose header or invariant clause covers `line`."""
        best: LoopSite | None = None
        for site in self.loops:
            spans = [(site.header_start, site.body_end)]
            for lo, hi in site.invariant_regions:
                spans.append((lo, hi))
            for lo, hi in spans:
                s = self.span(lo, hi)
                if s.start_line <= line <= s.end_line:
                    if best is None or site.header_start >= best.header_start:
                        best = site
                    break
        return best


_CLAUSE_KEYWORDS = {
    "requires", "ensures", "recommends", "invariant", "invariant_except_break",
    "invariant_ensures", "decreases", "opens_invariants", "no_unwind",
}

_QUANTIFIERS = {"forall", "exists", "choose"}

_OPEN = {"(": ")", "[": "]", "{": "}"}
_CLOSE = {")": "(", "]": "[", "}": "{"}

_MUTATING_METHODS = {
    "set", "push", "pop", "insert", "remove", "truncate", "clear", "swap",
    "set_len", "sort", "reverse", "fill", "extend",
}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.functions: list[FunctionRegion] = []
        self.loops: list[LoopSite] = []
        self.annotations: list[AnnotationRegion] = []
        self._extra_nonexec: list[tuple[int, int]] = []
        self._last_commas: list[tuple[int, int]] = []
        self._loop_counts: dict[int, int] = {}
        self._check_balance()

    def _check_balance(self):
        stack: list[Token] = []
        for tok in self.tokens:
            if tok.kind != "punct":
                continue
            if tok.text in _OPEN:
                stack.append(tok)
            elif tok.text in _CLOSE:
                if not stack or stack[-1].text != _CLOSE[tok.text]:
                    raise _parse_error(self.text, tok.start, f"unbalanced {tok.text!r}")
                stack.pop()
        if stack:
            raise _parse_error(self.text, stack[-1].start, f"unclosed {stack[-1].text!r}")

    # -- token helpers ---------------------------------------------------

    def _match_bracket(self, idx: int) -> int:
        """Index of the token closing the bracket opened at tokens[idx]."""
        opener = self.tokens[idx].text
        closer = _OPEN[opener]
        depth = 0
        for j in range(idx, len(self.tokens)):
            t = self.tokens[j]
            if t.kind != "punct":
                continue
            if t.text == opener:
                depth += 1
            elif t.text == closer:
                depth -= 1
                if depth == 0:
                    return j
        raise _parse_error(self.text, self.tokens[idx].start, f"unclosed {opener!r}")

    def _skip_generics(self, idx: int) -> int:
        """If tokens[idx] is `<` in declaration position, return index past `>`."""
        if idx >= len(self.tokens) or self.tokens[idx].text != "<":
            return idx
        depth = 0
        j = idx
        while j < len(self.tokens):
            t = self.tokens[j].text
            if t == "<":
                depth += 1
            elif t == "<<":
                depth += 2
            elif t == ">":
                depth -= 1
                if depth == 0:
                    return j + 1
            elif t == ">>":
                depth -= 2
                if depth <= 0:
                    return j + 1
            j += 1
        raise _parse_error(self.text, self.tokens[idx].start, "unclosed generic bracket")

    # -- top level -------------------------------------------------------

    def parse(self) -> ProofDocument:
        i = 0
        while i < len(self.tokens):
            tok = self.tokens[i]
            if tok.kind == "ident" and tok.text == "fn":
                i = self._parse_function(i)
            else:
                i += 1
        doc = ProofDocument(
            source_text=self.text,
            functions=self.functions,
            loops=self.loops,
            annotations=sorted(self.annotations, key=lambda a: a.start),
        )
        _attach_token_views(doc, self.tokens, self._extra_nonexec)
        return doc

    def _parse_function(self, fn_idx: int) -> int:
        toks = self.tokens
        i = fn_idx + 1
        if i >= len(toks) or toks[i].kind != "ident":
            raise _parse_error(self.text, toks[fn_idx].start, "expected function name after fn")
        name_tok = toks[i]
        i += 1
        i = self._skip_generics(i)
        if i >= len(toks) or toks[i].text != "(":
            raise _parse_error(self.text, name_tok.start, "expected parameter list")
        params_open = i
        params_close = self._match_bracket(i)
        params = self._parse_params(params_open, params_close)
        i = params_close + 1

        return_binding: tuple[str | None, str] = (None, "")
        sig_end_tok = params_close
        if i < len(toks) and toks[i].text == "->":
            ret_start = i + 1
            if toks[ret_start].text == "(":
                close = self._match_bracket(ret_start)
                inner = toks[ret_start + 1:close]
                if len(inner) >= 2 and inner[0].kind == "ident" and inner[1].text == ":":
                    rname = inner[0].text
                    rtype = self.text[inner[2].start:inner[-1].end] if len(inner) > 2 else ""
                    return_binding = (rname, rtype.strip())
                else:
                    return_binding = (None, self.text[toks[ret_start].start:toks[close].end])
                i = close + 1
            else:
                j = ret_start
                while j < len(toks):
                    t = toks[j]
                    if t.text == "{" or (t.kind == "ident" and t.text in _CLAUSE_KEYWORDS):
                        break
                    if t.text == "<":
                        j = self._skip_generics(j)
                        continue
                    if t.text == ";":
                        break
                    j += 1
                return_binding = (None, self.text[toks[ret_start].start:toks[j - 1].end].strip())
                i = j
            sig_end_tok = i - 1

        requires_regions: list[tuple[int, int]] = []
        ensures_regions: list[tuple[int, int]] = []
        while i < len(toks) and toks[i].kind == "ident" and toks[i].text in _CLAUSE_KEYWORDS:
            kw = toks[i]
            exprs, i = self._parse_clause_exprs(i + 1)
            regions = [(lo, hi) for lo, hi in exprs]
            if kw.text == "requires":
                requires_regions.extend(regions)
            elif kw.text == "ensures":
                ensures_regions.extend(regions)
            elif kw.text == "decreases":
                end = regions[-1][1] if regions else kw.end
                self.annotations.append(AnnotationRegion(
                    kind=AnnotationKind.Decreases,
                    start=kw.start,
                    end=end,
                    expression=self.text[kw.start:end],
                ))
            self._note_clause_overhead(kw, regions)

        if i < len(toks) and toks[i].text == ";":
            # declaration without body
            self.functions.append(FunctionRegion(
                name=name_tok.text,
                signature_start=self.tokens[fn_idx].start,
                signature_end=toks[sig_end_tok].end,
                params=params,
                return_binding=return_binding,
                requires_regions=requires_regions,
                ensures_regions=ensures_regions,
                body_start=toks[i].start,
                body_end=toks[i].end,
            ))
            return i + 1

        if i >= len(toks) or toks[i].text != "{":
            raise _parse_error(self.text, name_tok.start, "expected function body")
        body_open = i
        body_close = self._match_bracket(i)

        fn = FunctionRegion(
            name=name_tok.text,
            signature_start=self.tokens[fn_idx].start,
            signature_end=toks[sig_end_tok].end,
            params=params,
            return_binding=return_binding,
            requires_regions=requires_regions,
            ensures_regions=ensures_regions,
            body_start=toks[body_open].start,
            body_end=toks[body_close].end,
        )
        self.functions.append(fn)
        self._parse_body(fn, body_open + 1, body_close)
        return body_close + 1

    def _parse_params(self, open_idx: int, close_idx: int) -> list[tuple[str, str]]:
        toks = self.tokens
        params: list[tuple[str, str]] = []
        segment: list[Token] = []
        depth = 0
        for j in range(open_idx + 1, close_idx):
            t = toks[j]
            if t.kind == "punct" and t.text in _OPEN:
                depth += 1
            elif t.kind == "punct" and t.text in _CLOSE:
                depth -= 1
            if t.text == "," and depth == 0:
                self._finish_param(segment, params)
                segment = []
            else:
                segment.append(t)
        self._finish_param(segment, params)
        return params

    def _finish_param(self, segment: list[Token], out: list[tuple[str, str]]):
        if not segment:
            return
        idx = 0
        while idx < len(segment) and segment[idx].kind == "ident" and segment[idx].text in ("mut", "ref"):
            idx += 1
        if idx >= len(segment) or segment[idx].kind != "ident":
            return  # self, patterns: skip
        name = segment[idx].text
        if name in ("self", "Self"):
            return
        if idx + 1 < len(segment) and segment[idx + 1].text == ":":
            ty = self.text[segment[idx + 2].start:segment[-1].end] if idx + 2 < len(segment) else ""
            out.append((name, ty.strip()))
        else:
            out.append((name, ""))

    def _parse_clause_exprs(self, start_idx: int) -> tuple[list[tuple[int, int]], int]:
        """Comma-separated expression list; stops at a clause keyword or body `{`."""
        toks = self.tokens
        exprs: list[tuple[int, int]] = []
        i = start_idx
        expr_start: int | None = None
        expr_end: int | None = None
        depth = 0
        pipe_open = False
        pending_quant = False
        while i < len(toks):
            t = toks[i]
            if depth == 0 and not pipe_open and t.kind == "ident" and t.text in _CLAUSE_KEYWORDS:
                break
            if depth == 0 and not pipe_open and t.kind == "punct" and t.text == "{":
                break
            if depth == 0 and not pipe_open and t.kind == "punct" and t.text == ";":
                break
            if t.kind == "ident" and t.text in _QUANTIFIERS:
                pending_quant = True
            elif t.kind == "punct":
                if t.text in _OPEN:
                    depth += 1
                elif t.text in _CLOSE:
                    depth -= 1
                elif t.text == "|" and pending_quant and not pipe_open:
                    pipe_open = True
                elif t.text == "|" and pipe_open:
                    pipe_open = False
                    pending_quant = False
            if t.text == "," and depth == 0 and not pipe_open:
                if expr_start is not None:
                    exprs.append((expr_start, expr_end))
                expr_start = None
                expr_end = None
                self._last_commas.append((t.start, t.end))
                i += 1
                continue
            if expr_start is None:
                expr_start = t.start
            expr_end = t.end
            i += 1
        if expr_start is not None:
            exprs.append((expr_start, expr_end))
        return exprs, i

    def _note_clause_overhead(self, kw: Token, regions: list[tuple[int, int]]):
        self._extra_nonexec.append((kw.start, kw.end))
        for c in self._last_commas:
            self._extra_nonexec.append(c)
        self._last_commas = []

    # -- bodies ----------------------------------------------------------

    def _parse_body(self, fn: FunctionRegion, start_idx: int, close_idx: int):
        """Scan a function body for loops, annotations, and nested functions."""
        toks = self.tokens
        declared: dict[str, str] = dict(fn.params)
        i = start_idx
        while i < close_idx:
            t = toks[i]
            if t.kind != "ident":
                i += 1
                continue
            word = t.text
            if word == "fn":
                i = self._parse_function(i)
                continue
            if word in ("while", "loop", "for"):
                # 1-based in source order across the whole function, nested
                # loops included, so replay names never collide
                self._loop_counts[id(fn)] = self._loop_counts.get(id(fn), 0) + 1
                i = self._parse_loop(fn, declared, t, i, self._loop_counts[id(fn)])
                continue
            if word in ("assert", "assume"):
                i = self._parse_assert(i)
                continue
            if word == "proof" and i + 1 < close_idx and toks[i + 1].text == "{":
                close = self._match_bracket(i + 1)
                self.annotations.append(AnnotationRegion(
                    kind=AnnotationKind.ProofBlock,
                    start=t.start,
                    end=toks[close].end,
                    expression=self.text[t.start:toks[close].end],
                ))
                i = close + 1
                continue
            if word == "let":
                i = self._parse_let(declared, i)
                continue
            i += 1

    def _parse_assert(self, idx: int) -> int:
        """assert(...) ;  |  assert ... by { ... }  |  assume(...);"""
        toks = self.tokens
        start = toks[idx].start
        i = idx + 1
        end = toks[idx].end
        while i < len(toks):
            t = toks[i]
            if t.kind == "punct" and t.text in _OPEN:
                close = self._match_bracket(i)
                end = toks[close].end
                if t.text == "{":
                    # `by {..}` proof body finishes the statement
                    i = close + 1
                    if i < len(toks) and toks[i].text == ";":
                        end = toks[i].end
                        i += 1
                    break
                i = close + 1
                continue
            if t.kind == "punct" and t.text == ";":
                end = t.end
                i += 1
                break
            if t.kind == "punct" and t.text in _CLOSE:
                break
            end = t.end
            i += 1
        self.annotations.append(AnnotationRegion(
            kind=AnnotationKind.Assert,
            start=start,
            end=end,
            expression=self.text[start:end],
        ))
        return i

    def _parse_let(self, declared: dict[str, str], idx: int) -> int:
        toks = self.tokens
        i = idx + 1
        is_ghost = False
        if i < len(toks) and toks[i].kind == "ident" and toks[i].text in ("ghost", "tracked"):
            is_ghost = True
            i += 1
        if i < len(toks) and toks[i].kind == "ident" and toks[i].text == "mut":
            i += 1
        if i >= len(toks) or toks[i].kind != "ident":
            return idx + 1
        name = toks[i].text
        i += 1
        ty = ""
        if i < len(toks) and toks[i].text == ":":
            ty_start = i + 1
            j = ty_start
            depth = 0
            while j < len(toks):
                t = toks[j]
                if t.text == "<":
                    j = self._skip_generics(j)
                    continue
                if t.kind == "punct" and t.text in _OPEN:
                    depth += 1
                elif t.kind == "punct" and t.text in _CLOSE:
                    if depth == 0:
                        break
                    depth -= 1
                elif depth == 0 and t.text in ("=", ";"):
                    break
                j += 1
            ty = self.text[toks[ty_start].start:toks[j - 1].end].strip() if j > ty_start else ""
            i = j
        # consume to end of statement
        depth = 0
        stmt_end = toks[idx].end
        while i < len(toks):
            t = toks[i]
            if t.kind == "punct" and t.text in _OPEN:
                close = self._match_bracket(i)
                stmt_end = toks[close].end
                i = close + 1
                continue
            if t.kind == "punct" and t.text == ";":
                stmt_end = t.end
                i += 1
                break
            if t.kind == "punct" and t.text in _CLOSE:
                break
            stmt_end = t.end
            i += 1
        declared[name] = ty
        if is_ghost:
            self.annotations.append(AnnotationRegion(
                kind=AnnotationKind.Ghost,
                start=toks[idx].start,
                end=stmt_end,
                expression=self.text[toks[idx].start:stmt_end],
            ))
        return i

    def _parse_loop(self, fn: FunctionRegion, declared: dict[str, str],
                    kw: Token, idx: int, loop_counter: int) -> int:
        toks = self.tokens
        i = idx + 1
        condition_text = ""
        if kw.text == "while":
            cond_start = i
            depth = 0
            while i < len(toks):
                t = toks[i]
                if depth == 0 and t.kind == "ident" and t.text in _CLAUSE_KEYWORDS:
                    break
                if depth == 0 and t.kind == "punct" and t.text == "{":
                    break
                if t.kind == "punct" and t.text in ("(", "["):
                    depth += 1
                elif t.kind == "punct" and t.text in (")", "]"):
                    depth -= 1
                i += 1
            if i > cond_start:
                condition_text = self.text[toks[cond_start].start:toks[i - 1].end].strip()
        elif kw.text == "for":
            while i < len(toks) and not (
                toks[i].text == "{" or (toks[i].kind == "ident" and toks[i].text in _CLAUSE_KEYWORDS)
            ):
                i += 1
            condition_text = self.text[kw.end:toks[i].start].strip()

        invariants: list[str] = []
        invariant_regions: list[tuple[int, int]] = []
        decreases_text = ""
        while i < len(toks) and toks[i].kind == "ident" and toks[i].text in _CLAUSE_KEYWORDS:
            clause_kw = toks[i]
            exprs, i = self._parse_clause_exprs(i + 1)
            commas = list(self._last_commas)
            self._note_clause_overhead(clause_kw, exprs)
            if clause_kw.text.startswith("invariant"):
                sibs = [(lo, hi) for lo, hi in exprs]
                for k, (lo, hi) in enumerate(exprs):
                    sep = (-1, -1)
                    for cs, ce in commas:
                        if cs >= hi:
                            sep = (cs, ce)
                            break
                    invariants.append(self.text[lo:hi])
                    invariant_regions.append((lo, hi))
                    self.annotations.append(AnnotationRegion(
                        kind=AnnotationKind.Invariant,
                        start=lo,
                        end=hi,
                        expression=self.text[lo:hi],
                        sep_start=sep[0],
                        sep_end=sep[1],
                        clause_kw_start=clause_kw.start,
                        clause_kw_end=clause_kw.end,
                        sibling_exprs=sibs,
                    ))
            elif clause_kw.text == "decreases":
                end = exprs[-1][1] if exprs else clause_kw.end
                decreases_text = self.text[clause_kw.start:end]
                self.annotations.append(AnnotationRegion(
                    kind=AnnotationKind.Decreases,
                    start=clause_kw.start,
                    end=end,
                    expression=decreases_text,
                ))

        if i >= len(toks) or toks[i].text != "{":
            raise _parse_error(self.text, kw.start, f"expected body for {kw.text} loop")
        body_open = i
        body_close = self._match_bracket(i)

        site = LoopSite(
            enclosing_function=fn.name,
            kind=kw.text,
            header_start=kw.start,
            header_end=toks[body_open].start,
            condition_text=condition_text,
            invariants=invariants,
            invariant_regions=invariant_regions,
            body_start=toks[body_open].start,
            body_end=toks[body_close].end,
            live_variables=[],
            index=loop_counter,
            decreases_text=decreases_text,
        )
        self.loops.append(site)
        # scan inner statements (nested loops, annotations, lets)
        self._parse_body(fn, body_open + 1, body_close)
        # live variables and mutation info need the full declaration map
        site.live_variables = self._live_variables(site, declared)
        site.mutated = frozenset(self._mutated_names(body_open, body_close))
        site.loop_isolation = not self._isolation_disabled(fn)
        return body_close + 1

    def _live_variables(self, site: LoopSite, declared: dict[str, str]) -> list[tuple[str, str]]:
        used: set[str] = set()
        hunks = [self.text[site.body_start:site.body_end], site.condition_text]
        hunks.extend(site.invariants)
        for hunk in hunks:
            for m in re.finditer(r"[A-Za-z_][A-Za-z0-9_]*", hunk):
                used.add(m.group(0))
        ordered = []
        for name, ty in declared.items():
            if name in used:
                ordered.append((name, ty))
        return ordered

    def _mutated_names(self, body_open: int, body_close: int) -> set[str]:
        toks = self.tokens
        mutated: set[str] = set()
        assign_ops = {"=", "+=", "-=", "*=", "/=", "%=", "^=", "&=", "|=", "<<=", ">>="}
        for j in range(body_open + 1, body_close):
            t = toks[j]
            if t.kind == "punct" and t.text in assign_ops:
                k = j - 1
                if k <= body_open:
                    continue
                if toks[k].text == "]":
                    depth = 0
                    while k > body_open:
                        if toks[k].text == "]":
                            depth += 1
                        elif toks[k].text == "[":
                            depth -= 1
                            if depth == 0:
                                k -= 1
                                break
                        k -= 1
                if toks[k].kind == "ident" and toks[k - 1].text not in (".", "::", "let"):
                    mutated.add(toks[k].text)
            elif t.kind == "ident" and t.text in _MUTATING_METHODS:
                if j + 1 < body_close and toks[j + 1].text == "(" and toks[j - 1].text == ".":
                    if toks[j - 2].kind == "ident":
                        mutated.add(toks[j - 2].text)
        return mutated

    def _isolation_disabled(self, fn: FunctionRegion) -> bool:
        needle = "loop_isolation(false)"
        if needle in self.text[fn.signature_start:fn.body_end]:
            return True
        head = self.text[:fn.signature_start]
        return "#![verifier::" + needle in head.replace(" ", "")


def parse_proof(text: str) -> ProofDocument:
    """Parse a candidate Verus source file into a region-structured document."""
    return _Parser(text).parse()


def _attach_token_views(doc: ProofDocument, tokens: list[Token],
                        extra_nonexec: list[tuple[int, int]]):
    """Compute the normalized token streams the preservation guard compares."""
    ann_spans = [(a.start, a.end) for a in doc.annotations]
    ann_spans.extend(extra_nonexec)

    def inside_annotation(tok: Token) -> bool:
        return any(lo <= tok.start < hi for lo, hi in ann_spans)

    def toks_in(lo: int, hi: int) -> tuple:
        return tuple((t.kind, t.text) for t in tokens if lo <= t.start < hi)

    for fn in doc.functions:
        sig = [t for t in tokens if fn.signature_start <= t.start < fn.signature_end]
        fn.signature_tokens = tuple((t.kind, t.text) for t in sig)
        fn.return_type_tokens = tuple(
            tokenize_normalized(fn.return_binding[1]) if fn.return_binding[1] else ()
        )
        req: list = []
        for lo, hi in fn.requires_regions:
            req.extend(toks_in(lo, hi))
            req.append(("punct", ","))
        fn.requires_tokens = tuple(req)
        ens: list = []
        for lo, hi in fn.ensures_regions:
            ens.extend(toks_in(lo, hi))
            ens.append(("punct", ","))
        fn.ensures_tokens = tuple(ens)
        body = [
            t for t in tokens
            if fn.body_start <= t.start < fn.body_end and not inside_annotation(t)
        ]
        fn.executable_tokens = tuple((t.kind, t.text) for t in body)


def tokenize_normalized(text: str) -> list[tuple[str, str]]:
    return [(t.kind, t.text) for t in tokenize(text)]


# ---------------------------------------------------------------------------
# replay programs
# ---------------------------------------------------------------------------

REPLAY_PREAMBLE = "use vstd::prelude::*;\n\nverus! {\n\n"
REPLAY_EPILOGUE = "\nfn main() {}\n\n} // verus!\n"

_SEQ_TYPE_RE = re.compile(r"^(Vec|Seq)\s*<\s*(.+?)\s*>$")

INT_TYPES = {
    "u8", "u16", "u32", "u64", "u128", "usize",
    "i8", "i16", "i32", "i64", "i128", "isize",
    "int", "nat",
}


def strip_ref(ty: str) -> str:
    ty = ty.strip()
    while ty.startswith("&"):
        ty = ty[1:].strip()
        if ty.startswith("mut "):
            ty = ty[4:].strip()
    return ty


def seq_element_type(ty: str) -> str | None:
    m = _SEQ_TYPE_RE.match(strip_ref(ty))
    return m.group(2) if m else None


def default_literal(ty: str) -> str:
    base = strip_ref(ty)
    if base == "bool":
        return "false"
    if seq_element_type(base) is not None:
        return "vec![]"
    return "0"


@dataclass
class ReplayProgram:
    source_text: str
    loop_func_name: str
    injection_point: Span
    loop_start_assertions: list[tuple[int, Span]]
    loop_end_assertions: list[tuple[int, Span]]
    # render state, kept so substitution and injection re-render byte-stably
    decl_lines: list[str] = field(default_factory=list)
    live_variables: list[tuple[str, str]] = field(default_factory=list)
    mutated: frozenset[str] = frozenset()
    condition_text: str = ""
    body_text: str = ""
    invariants: list[str] = field(default_factory=list)
    injected: bool = False


def _render_replay(name: str, decl_lines: list[str], mutated_rebinds: list[str],
                   invariants: list[str], condition: str, body_text: str,
                   ) -> tuple[str, Span, list[tuple[int, Span]], list[tuple[int, Span]]]:
    parts: list[str] = [REPLAY_PREAMBLE, f"fn {name}()\n{{\n"]
    offset = sum(len(p) for p in parts)
    decl_start = offset
    for line in decl_lines:
        text = f"    {line}\n"
        parts.append(text)
        offset += len(text)
    decl_end = offset
    for line in mutated_rebinds:
        text = f"    {line}\n"
        parts.append(text)
        offset += len(text)

    def emit_asserts() -> list[tuple[int, int, int]]:
        nonlocal offset
        spans = []
        for k, inv in enumerate(invariants):
            prefix = "    assert("
            text = f"{prefix}{inv});\n"
            spans.append((k, offset + len(prefix), offset + len(prefix) + len(inv)))
            parts.append(text)
            offset += len(text)
        return spans

    start_raw = emit_asserts()
    if condition:
        guard = f"    if {condition} {{\n"
    else:
        guard = "    {\n"
    parts.append(guard)
    offset += len(guard)
    parts.append(body_text)
    offset += len(body_text)
    closing = "\n    }\n" if not body_text.endswith("\n") else "    }\n"
    parts.append(closing)
    offset += len(closing)
    end_raw = emit_asserts()
    parts.append("}\n")
    parts.append(REPLAY_EPILOGUE)

    source = "".join(parts)
    index = LineIndex(source)
    start_spans = [(k, index.span(lo, hi)) for k, lo, hi in start_raw]
    end_spans = [(k, index.span(lo, hi)) for k, lo, hi in end_raw]
    injection_span = index.span(decl_start, max(decl_start + 1, decl_end))
    return source, injection_span, start_spans, end_spans


def _scan_for_unsupported(body_text: str):
    """Reject bodies whose exits cannot be rewritten without changing meaning."""
    toks = tokenize(body_text)
    loop_depth = 0
    brace_stack: list[bool] = []  # True when the brace belongs to a nested loop
    pending_loop = False
    for idx, t in enumerate(toks):
        if t.kind == "ident" and t.text in ("while", "loop", "for"):
            pending_loop = True
        elif t.kind == "punct" and t.text == "{":
            brace_stack.append(pending_loop)
            if pending_loop:
                loop_depth += 1
            pending_loop = False
        elif t.kind == "punct" and t.text == "}":
            if brace_stack and brace_stack.pop():
                loop_depth -= 1
        elif t.kind == "ident" and loop_depth == 0:
            if t.text == "continue":
                raise UnsupportedLoop("loop body uses continue; back-edge semantics "
                                      "cannot be preserved in a replay")
            if t.text == "break":
                nxt = toks[idx + 1] if idx + 1 < len(toks) else None
                if nxt is not None and not (nxt.kind == "punct" and nxt.text in (";", "}")):
                    raise UnsupportedLoop("labeled or valued break in loop body")
            if t.text == "return":
                nxt = toks[idx + 1] if idx + 1 < len(toks) else None
                if nxt is not None and not (nxt.kind == "punct" and nxt.text in (";", "}")):
                    raise UnsupportedLoop("value-returning return in loop body")


def _rewrite_exits(body_text: str) -> str:
    """Bare `break` exits one transition early; model it as leaving the replay."""
    toks = tokenize(body_text)
    loop_depth = 0
    brace_stack: list[bool] = []
    pending_loop = False
    out = []
    last = 0
    for idx, t in enumerate(toks):
        if t.kind == "ident" and t.text in ("while", "loop", "for"):
            pending_loop = True
        elif t.kind == "punct" and t.text == "{":
            brace_stack.append(pending_loop)
            if pending_loop:
                loop_depth += 1
            pending_loop = False
        elif t.kind == "punct" and t.text == "}":
            if brace_stack and brace_stack.pop():
                loop_depth -= 1
        elif t.kind == "ident" and t.text == "break" and loop_depth == 0:
            out.append(body_text[last:t.start])
            out.append("return")
            last = t.end
    out.append(body_text[last:])
    return "".join(out)


def extract_loop(doc: ProofDocument, site: LoopSite) -> ReplayProgram:
    """Isolate one loop transition as a standalone, compilable function.

    The loop body is copied verbatim; invariants become assertion blocks
    before and after it; live variables get placeholder declarations that
    injection later overwrites with counterexample values.
    """
    if site not in doc.loops:
        raise ValueError("loop site does not belong to this document")
    if site.kind == "for":
        raise UnsupportedLoop("for-loops carry an implicit iterator state the "
                              "replay cannot close over")

    body_text = doc.source_text[site.body_start + 1:site.body_end - 1]
    _scan_for_unsupported(body_text)
    body_text = _rewrite_exits(body_text)

    decl_lines = []
    for name, ty in site.live_variables:
        base = strip_ref(ty)
        if base:
            decl_lines.append(f"let {name}: {base} = {default_literal(base)};")
        else:
            decl_lines.append(f"let {name} = 0;")
    rebinds = [f"let mut {name} = {name};" for name, _ in site.live_variables
               if name in site.mutated]

    name = f"{site.enclosing_function}_loop_{site.index}"
    source, injection_span, start_spans, end_spans = _render_replay(
        name, decl_lines, rebinds, site.invariants, site.condition_text, body_text)

    return ReplayProgram(
        source_text=source,
        loop_func_name=name,
        injection_point=injection_span,
        loop_start_assertions=start_spans,
        loop_end_assertions=end_spans,
        decl_lines=decl_lines,
        live_variables=list(site.live_variables),
        mutated=site.mutated,
        condition_text=site.condition_text,
        body_text=body_text,
        invariants=list(site.invariants),
    )


def render_assignment(name: str, ty: str, value) -> str:
    """One concrete initializer line for an injected counterexample value."""
    from .cex_engine import TypedValue  # local import to avoid a cycle

    base = strip_ref(ty)
    if isinstance(value, TypedValue):
        if value.kind == "seq":
            items = ", ".join(str(v) for v in value.value)
            if not value.value and base and seq_element_type(base):
                return f"let {name}: {base} = vec![];"
            return f"let {name} = vec![{items}];"
        if value.kind == "bool":
            return f"let {name}: bool = {'true' if value.value else 'false'};"
        if value.kind == "text":
            escaped = str(value.value).replace("\\", "\\\\").replace('"', '\\"')
            return f'let {name} = "{escaped}";'
        ty_name = value.machine_type or base
        if ty_name and ty_name in INT_TYPES:
            return f"let {name}: {ty_name} = {value.value};"
        return f"let {name} = {value.value};"
    raise TypeRenderError(name, f"unsupported value {value!r}")


def inject_into_replay(replay: ReplayProgram, cex) -> ReplayProgram:
    """Re-render the replay with the counterexample's values as initializers."""
    decl_lines = []
    for name, ty in replay.live_variables:
        if name not in cex.assignments:
            raise MissingAssignment(name)
        decl_lines.append(render_assignment(name, ty, cex.assignments[name]))
    rebinds = [f"let mut {name} = {name};" for name, _ in replay.live_variables
               if name in replay.mutated]
    source, injection_span, start_spans, end_spans = _render_replay(
        replay.loop_func_name, decl_lines, rebinds, replay.invariants,
        replay.condition_text, replay.body_text)
    return replace(
        replay,
        source_text=source,
        injection_point=injection_span,
        loop_start_assertions=start_spans,
        loop_end_assertions=end_spans,
        decl_lines=decl_lines,
        injected=True,
    )


def inject_counterexample(replay: ReplayProgram, cex) -> ProofDocument:
    """Spec-facing wrapper: injected replay, parsed back into a document."""
    injected = inject_into_replay(replay, cex)
    return parse_proof(injected.source_text)


def substitute_invariants(replay: ReplayProgram, new_invariants: list[str]) -> ReplayProgram:
    """Regenerate both assertion blocks from a mutant's invariant list."""
    for expr in new_invariants:
        try:
            toks = tokenize(expr)
        except ParseError as exc:
            raise ParseError(f"invariant expression does not lex: {expr!r}") from exc
        if not toks:
            raise ParseError(f"empty invariant expression: {expr!r}")
    rebinds = [f"let mut {name} = {name};" for name, _ in replay.live_variables
               if name in replay.mutated]
    source, injection_span, start_spans, end_spans = _render_replay(
        replay.loop_func_name, replay.decl_lines, rebinds, list(new_invariants),
        replay.condition_text, replay.body_text)
    return replace(
        replay,
        source_text=source,
        injection_point=injection_span,
        loop_start_assertions=start_spans,
        loop_end_assertions=end_spans,
        invariants=list(new_invariants),
    )


# ---------------------------------------------------------------------------
# pruning and diffing
# ---------------------------------------------------------------------------

def _blank(text: str, lo: int, hi: int) -> str:
    """Overwrite [lo, hi) with spaces, newlines preserved, offsets stable."""
    window = text[lo:hi]
    blanked = "".join("\n" if c == "\n" else " " for c in window)
    return text[:lo] + blanked + text[hi:]


def _blank_annotation(text: str, ann: AnnotationRegion) -> str:
    out = _blank(text, ann.start, ann.end)
    if ann.sep_start >= 0:
        out = _blank(out, ann.sep_start, ann.sep_end)
    if ann.clause_kw_start >= 0:
        live_sibling = any(
            out[lo:hi].strip() and (lo, hi) != (ann.start, ann.end)
            for lo, hi in ann.sibling_exprs
        )
        if not live_sibling:
            out = _blank(out, ann.clause_kw_start, ann.clause_kw_end)
    return out


PRUNABLE_KINDS = (
    AnnotationKind.Invariant,
    AnnotationKind.Assert,
    AnnotationKind.ProofBlock,
    AnnotationKind.Decreases,
    AnnotationKind.Ghost,
)


def prune_redundant_annotations(doc: ProofDocument, verify_fn) -> ProofDocument:
    """Greedy single pass: drop each annotation whose removal keeps the proof green.

    Blanking with spaces keeps every other annotation's offsets valid, so the
    pass can accumulate removals without re-locating regions.
    """
    if verify_fn(doc).status != Status.Pass:
        raise NotVerified("prune requires a verifying document")
    current = doc.source_text
    annotations = sorted(
        (a for a in doc.annotations if a.kind in PRUNABLE_KINDS),
        key=lambda a: a.start,
    )
    for ann in annotations:
        if not current[ann.start:ann.end].strip():
            continue  # already blanked as part of an earlier clause collapse
        candidate = _blank_annotation(current, ann)
        try:
            cand_doc = parse_proof(candidate)
        except ParseError:
            continue
        if verify_fn(cand_doc).status == Status.Pass:
            current = candidate
    return parse_proof(current)


def diff(original: ProofDocument | str, candidate: ProofDocument | str) -> str:
    """Standard unified diff with 3 context lines; empty string when identical."""
    orig = original if isinstance(original, str) else original.source_text
    cand = candidate if isinstance(candidate, str) else candidate.source_text
    if orig == cand:
        return ""
    lines = difflib.unified_diff(
        orig.splitlines(keepends=True),
        cand.splitlines(keepends=True),
        fromfile="original.rs",
        tofile="candidate.rs",
        n=3,
    )
    return "".join(lines)


def changed_line_count(diff_text: str) -> int:
    """Added plus removed lines, headers excluded; the ranking tie-break."""
    count = 0
    for line in diff_text.splitlines():
        if line.startswith("+++") or line.startswith("---"):
            continue
        if line.startswith("+") or line.startswith("-"):
            count += 1
    return count
