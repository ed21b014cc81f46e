"""Offline verifier doubles for hermetic runs.

`SimulatedVerifier` concretely executes the straight-line replay functions
this package generates (injected declarations, assertion blocks, one guarded
body copy) and reports failures in the real verifier's console format. It is
a test double for replay checking only: it evaluates assertions on concrete
values and does not attempt inductive reasoning, trigger selection, or
overflow checking on full proofs.

`FixtureVerifier` replays canned console logs keyed by the SHA-256 of the
source text, which is how recorded verifier behavior is wired into tests.

Spec-arithmetic notes: integer division and modulo follow the SMT (Euclidean)
convention; quantifiers are evaluated over the finite domain implied by the
comparison bounds on the bound variable, and an `exists` whose body is an
implication is read as a witness search over that domain (antecedent and
consequent both required), matching how such invariants are meant.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

from .errors import ParseError
from .source_model import Token, parse_proof, tokenize
from .verifier import VerifierReport, report_from_log

_CMP_OPS = {"==", "!=", "<", "<=", ">", ">="}
_ADD_OPS = {"+", "-"}
_MUL_OPS = {"*", "/", "%"}


class SimError(Exception):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(message)
        self.offset = offset


class AssertFailure(Exception):
    def __init__(self, offset: int, expr_text: str):
        super().__init__(f"assertion failed: {expr_text}")
        self.offset = offset
        self.expr_text = expr_text


def _euclid_div(a: int, b: int) -> int:
    if b == 0:
        raise SimError("division by zero")
    q = abs(a) // abs(b)
    if (a < 0) != (b < 0) and q * abs(b) != abs(a):
        q += 1
    return q if (a < 0) == (b < 0) else -q


def _euclid_mod(a: int, b: int) -> int:
    return a - b * _euclid_div(a, b)


class _ExprParser:
    """Pratt parser over the shared token stream; returns small tuple ASTs."""

    def __init__(self, text: str, tokens: list[Token], pos: int, end: int):
        self.text = text
        self.tokens = tokens
        self.pos = pos
        self.end = end

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < self.end else None

    def take(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise SimError("unexpected end of expression")
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.take()
        if tok.text != text:
            raise SimError(f"expected {text!r}, found {tok.text!r}", tok.start)
        return tok

    def parse(self):
        return self.parse_iff()

    def parse_iff(self):
        left = self.parse_implies()
        while (tok := self.peek()) and tok.text == "<==>":
            self.take()
            right = self.parse_implies()
            left = ("iff", left, right)
        return left

    def parse_implies(self):
        left = self.parse_or()
        if (tok := self.peek()) and tok.text == "==>":
            self.take()
            right = self.parse_implies()  # right associative
            return ("implies", left, right)
        return left

    def parse_or(self):
        left = self.parse_and()
        while (tok := self.peek()) and tok.text in ("||", "|||"):
            self.take()
            left = ("or", left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_cmp()
        while (tok := self.peek()) and tok.text in ("&&", "&&&"):
            self.take()
            left = ("and", left, self.parse_cmp())
        return left

    def parse_cmp(self):
        operands = [self.parse_add()]
        ops: list[str] = []
        while (tok := self.peek()) and tok.text in _CMP_OPS:
            ops.append(self.take().text)
            operands.append(self.parse_add())
        if not ops:
            return operands[0]
        return ("chain", operands, ops)

    def parse_add(self):
        left = self.parse_mul()
        while (tok := self.peek()) and tok.text in _ADD_OPS and tok.kind == "punct":
            op = self.take().text
            left = ("bin", op, left, self.parse_mul())
        return left

    def parse_mul(self):
        left = self.parse_unary()
        while (tok := self.peek()) and tok.text in _MUL_OPS and tok.kind == "punct":
            op = self.take().text
            left = ("bin", op, left, self.parse_unary())
        return left

    def parse_unary(self):
        tok = self.peek()
        if tok and tok.text == "-" and tok.kind == "punct":
            self.take()
            return ("neg", self.parse_unary())
        if tok and tok.text == "!" and tok.kind == "punct":
            self.take()
            return ("not", self.parse_unary())
        return self.parse_postfix()

    def parse_postfix(self):
        node = self.parse_atom()
        while (tok := self.peek()) is not None:
            if tok.text == "@":
                self.take()
                node = ("view", node)
            elif tok.text == "[":
                self.take()
                index = self.parse()
                self.expect("]")
                node = ("index", node, index)
            elif tok.text == ".":
                self.take()
                name = self.take()
                if name.kind == "num":
                    node = ("index", node, ("int", int(name.text)))
                    continue
                args = []
                if (nxt := self.peek()) and nxt.text == "(":
                    self.take()
                    while (nxt := self.peek()) and nxt.text != ")":
                        args.append(self.parse())
                        if (sep := self.peek()) and sep.text == ",":
                            self.take()
                    self.expect(")")
                    node = ("call", node, name.text, args)
                else:
                    node = ("field", node, name.text)
            elif tok.kind == "ident" and tok.text == "as":
                self.take()
                ty = self.take()
                if (nxt := self.peek()) and nxt.text == "<":
                    raise SimError("generic cast unsupported", tok.start)
                node = ("cast", node, ty.text)
            else:
                break
        return node

    def parse_atom(self):
        tok = self.take()
        if tok.kind == "num":
            digits = tok.text
            for i, c in enumerate(digits):
                if c.isalpha() and not digits.startswith("0x"):
                    digits = digits[:i]
                    break
            return ("int", int(digits, 0))
        if tok.kind == "ident":
            if tok.text == "true":
                return ("bool", True)
            if tok.text == "false":
                return ("bool", False)
            if tok.text in ("forall", "exists"):
                return self.parse_quantifier(tok.text)
            if tok.text == "vec" and (nxt := self.peek()) and nxt.text == "!":
                self.take()
                self.expect("[")
                items = []
                while (nxt := self.peek()) and nxt.text != "]":
                    items.append(self.parse())
                    if (sep := self.peek()) and sep.text == ",":
                        self.take()
                self.expect("]")
                return ("vec", items)
            return ("var", tok.text, tok.start)
        if tok.text == "(":
            inner = self.parse()
            self.expect(")")
            return inner
        raise SimError(f"cannot parse expression at {tok.text!r}", tok.start)

    def parse_quantifier(self, kind: str):
        self.expect("|")
        var = self.take()
        if var.kind != "ident":
            raise SimError("expected quantifier variable", var.start)
        if (nxt := self.peek()) and nxt.text == ":":
            self.take()
            self.take()  # type name, unused
        self.expect("|")
        body = self.parse()
        return ("quant", kind, var.text, body)


def _clone(value):
    return list(value) if isinstance(value, list) else value


class _Evaluator:
    def __init__(self):
        pass

    def eval(self, node, env: dict):
        tag = node[0]
        if tag == "int":
            return node[1]
        if tag == "bool":
            return node[1]
        if tag == "var":
            name = node[1]
            if name not in env:
                raise SimError(f"unknown variable {name!r}", node[2])
            return env[name]
        if tag == "vec":
            return [self._int(self.eval(item, env)) for item in node[1]]
        if tag == "neg":
            return -self._int(self.eval(node[1], env))
        if tag == "not":
            return not self._bool(self.eval(node[1], env))
        if tag == "view":
            return self.eval(node[1], env)
        if tag == "cast":
            return self.eval(node[1], env)
        if tag == "index":
            base = self.eval(node[1], env)
            index = self._int(self.eval(node[2], env))
            if not isinstance(base, list):
                raise SimError("indexing a non-sequence value")
            if index < 0 or index >= len(base):
                raise SimError(f"index {index} out of bounds for length {len(base)}")
            return base[index]
        if tag == "field":
            raise SimError(f"field access .{node[2]} unsupported")
        if tag == "call":
            return self._call(node, env)
        if tag == "bin":
            left = self._int(self.eval(node[2], env))
            right = self._int(self.eval(node[3], env))
            op = node[1]
            if op == "+":
                return left + right
            if op == "-":
                return left - right
            if op == "*":
                return left * right
            if op == "/":
                return _euclid_div(left, right)
            if op == "%":
                return _euclid_mod(left, right)
            raise SimError(f"operator {op} unsupported")
        if tag == "chain":
            operands = [self.eval(e, env) for e in node[1]]
            for (a, op, b) in zip(operands, node[2], operands[1:]):
                if not self._compare(a, op, b):
                    return False
            return True
        if tag == "and":
            return self._bool(self.eval(node[1], env)) and self._bool(self.eval(node[2], env))
        if tag == "or":
            return self._bool(self.eval(node[1], env)) or self._bool(self.eval(node[2], env))
        if tag == "implies":
            if not self._bool(self.eval(node[1], env)):
                return True
            return self._bool(self.eval(node[2], env))
        if tag == "iff":
            return self._bool(self.eval(node[1], env)) == self._bool(self.eval(node[2], env))
        if tag == "quant":
            return self._quant(node, env)
        raise SimError(f"unsupported expression node {tag}")

    def _call(self, node, env):
        base = self.eval(node[1], env)
        name = node[2]
        args = [self.eval(a, env) for a in node[3]]
        if name == "len":
            if not isinstance(base, list):
                raise SimError(".len() on a non-sequence value")
            return len(base)
        if name in ("index", "spec_index"):
            return self.eval(("index", node[1], node[3][0]), env)
        raise SimError(f"method .{name}() unsupported in simulation")

    def _compare(self, a, op, b) -> bool:
        if op == "==":
            return a == b
        if op == "!=":
            return a != b
        a = self._int(a)
        b = self._int(b)
        return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]

    def _int(self, value) -> int:
        if isinstance(value, bool):
            raise SimError("expected an integer, found a boolean")
        if isinstance(value, int):
            return value
        raise SimError(f"expected an integer, found {type(value).__name__}")

    def _bool(self, value) -> bool:
        if isinstance(value, bool):
            return value
        raise SimError(f"expected a boolean, found {type(value).__name__}")

    def _quant(self, node, env) -> bool:
        _, kind, var, body = node
        domain = self._domain(body, var, env)
        if kind == "forall":
            for x in domain:
                local = dict(env)
                local[var] = x
                if not self._bool(self.eval(body, local)):
                    return False
            return True
        # exists: an implication body is a witness search over the bounded
        # domain, so both sides must hold at the witness.
        check = body
        if body[0] == "implies":
            check = ("and", body[1], body[2])
        for x in domain:
            local = dict(env)
            local[var] = x
            if self._bool(self.eval(check, local)):
                return True
        return False

    def _domain(self, body, var: str, env: dict) -> range:
        lo = None
        hi = None

        def visit(node):
            nonlocal lo, hi
            tag = node[0]
            if tag in ("implies", "and"):
                visit(node[1])
                if tag == "and":
                    visit(node[2])
            elif tag == "chain":
                operands, ops = node[1], node[2]
                for i, operand in enumerate(operands):
                    if operand[0] == "var" and operand[1] == var:
                        if i > 0:
                            bound = self._int(self.eval(operands[i - 1], env))
                            op = ops[i - 1]
                            if op == "<=":
                                lo = bound if lo is None else max(lo, bound)
                            elif op == "<":
                                lo = bound + 1 if lo is None else max(lo, bound + 1)
                        if i < len(ops):
                            bound_expr = operands[i + 1]
                            if _mentions(bound_expr, var):
                                continue
                            bound = self._int(self.eval(bound_expr, env))
                            op = ops[i]
                            if op == "<":
                                hi = bound if hi is None else min(hi, bound)
                            elif op == "<=":
                                hi = bound + 1 if hi is None else min(hi, bound + 1)

        visit(body)
        if lo is None or hi is None:
            raise SimError(f"cannot bound quantifier variable {var!r}")
        return range(lo, max(lo, hi))


def _mentions(node, var: str) -> bool:
    if node[0] == "var":
        return node[1] == var
    return any(_mentions(child, var) for child in node[1:]
               if isinstance(child, tuple))


@dataclass
class _Failure:
    offset: int
    message: str
    kind: str  # assert | runtime


class _Interpreter:
    """Executes one loop-free function body on concrete values."""

    def __init__(self, text: str, tokens: list[Token]):
        self.text = text
        self.tokens = tokens
        self.evaluator = _Evaluator()

    def run(self, start: int, end: int, env: dict) -> _Failure | None:
        """Execute tokens[start:end]; first assertion failure wins."""
        pos = start
        while pos < end:
            tok = self.tokens[pos]
            if tok.kind == "punct" and tok.text == ";":
                pos += 1
                continue
            if tok.kind == "punct" and tok.text == "#":
                pos = self._skip_attribute(pos)
                continue
            if tok.kind != "ident":
                raise SimError(f"unsupported statement at {tok.text!r}", tok.start)
            word = tok.text
            if word == "let":
                pos = self._exec_let(pos, end, env)
            elif word in ("assert", "assume"):
                outcome, pos = self._exec_assert(pos, end, env, check=word == "assert")
                if outcome is not None:
                    return outcome
            elif word == "proof":
                pos = self._skip_block(pos + 1)
            elif word == "if":
                outcome, pos = self._exec_if(pos, end, env)
                if outcome is not None:
                    return outcome
            elif word == "return":
                return None
            elif word in ("while", "loop", "for"):
                raise SimError("loops inside a replay body are not simulated", tok.start)
            else:
                pos = self._exec_assign_or_call(pos, end, env)
        return None

    # -- statement helpers -------------------------------------------------

    def _skip_attribute(self, pos: int) -> int:
        pos += 1
        if pos < len(self.tokens) and self.tokens[pos].text == "!":
            pos += 1
        if pos < len(self.tokens) and self.tokens[pos].text == "[":
            depth = 0
            while pos < len(self.tokens):
                t = self.tokens[pos].text
                if t == "[":
                    depth += 1
                elif t == "]":
                    depth -= 1
                    if depth == 0:
                        return pos + 1
                pos += 1
        return pos

    def _skip_block(self, pos: int) -> int:
        if self.tokens[pos].text != "{":
            raise SimError("expected block", self.tokens[pos].start)
        depth = 0
        while pos < len(self.tokens):
            t = self.tokens[pos].text
            if t == "{":
                depth += 1
            elif t == "}":
                depth -= 1
                if depth == 0:
                    return pos + 1
            pos += 1
        raise SimError("unclosed block")

    def _exec_let(self, pos: int, end: int, env: dict) -> int:
        pos += 1  # let
        if self.tokens[pos].kind == "ident" and self.tokens[pos].text in ("ghost", "tracked"):
            pos += 1
        if self.tokens[pos].kind == "ident" and self.tokens[pos].text == "mut":
            pos += 1
        name = self.tokens[pos]
        pos += 1
        if self.tokens[pos].text == ":":
            pos += 1
            depth = 0
            while pos < end:
                t = self.tokens[pos].text
                if t == "<":
                    depth += 1
                elif t == ">":
                    depth -= 1
                elif depth == 0 and t in ("=", ";"):
                    break
                pos += 1
        if self.tokens[pos].text == ";":
            raise SimError(f"declaration of {name.text!r} has no initializer", name.start)
        pos += 1  # =
        parser = _ExprParser(self.text, self.tokens, pos, end)
        node = parser.parse()
        env[name.text] = _clone(self.evaluator.eval(node, env))
        pos = parser.pos
        if pos < end and self.tokens[pos].text == ";":
            pos += 1
        return pos

    def _exec_assert(self, pos: int, end: int, env: dict, check: bool
                     ) -> tuple[_Failure | None, int]:
        kw = self.tokens[pos]
        pos += 1
        if self.tokens[pos].text != "(":
            raise SimError("bare assert forms are not simulated", kw.start)
        close = self._match(pos)
        parser = _ExprParser(self.text, self.tokens, pos + 1, close)
        node = parser.parse()
        expr_start = self.tokens[pos + 1].start
        expr_text = self.text[expr_start:self.tokens[close].start].strip()
        value = self.evaluator.eval(node, env)
        pos = close + 1
        if pos < end and self.tokens[pos].kind == "ident" and self.tokens[pos].text == "by":
            pos = self._skip_block(pos + 1)
        if pos < end and self.tokens[pos].text == ";":
            pos += 1
        if check and not self.evaluator._bool(value):
            return _Failure(offset=expr_start, message="assertion failed",
                            kind="assert"), pos
        return None, pos

    def _exec_if(self, pos: int, end: int, env: dict) -> tuple[_Failure | None, int]:
        pos += 1  # if
        brace = pos
        while brace < end and self.tokens[brace].text != "{":
            brace += 1
        parser = _ExprParser(self.text, self.tokens, pos, brace)
        cond = self.evaluator._bool(self.evaluator.eval(parser.parse(), env))
        body_close = self._match(brace)
        else_pos = body_close + 1
        if cond:
            outcome = self.run(brace + 1, body_close, env)
        else:
            outcome = None
        pos = body_close + 1
        if (pos < end and self.tokens[pos].kind == "ident"
                and self.tokens[pos].text == "else"):
            pos += 1
            if self.tokens[pos].kind == "ident" and self.tokens[pos].text == "if":
                if cond:
                    # skip the entire else-if chain
                    pos = self._skip_if_chain(pos, end)
                    return outcome, pos
                return self._exec_if(pos, end, env)
            body_close2 = self._match(pos)
            if not cond:
                outcome = self.run(pos + 1, body_close2, env)
            pos = body_close2 + 1
        return outcome, pos

    def _skip_if_chain(self, pos: int, end: int) -> int:
        # pos is at `if`; skip condition and block, then any else continuation
        brace = pos
        while brace < end and self.tokens[brace].text != "{":
            brace += 1
        pos = self._match(brace) + 1
        if (pos < end and self.tokens[pos].kind == "ident"
                and self.tokens[pos].text == "else"):
            pos += 1
            if pos < end and self.tokens[pos].kind == "ident" and self.tokens[pos].text == "if":
                return self._skip_if_chain(pos, end)
            return self._match(pos) + 1
        return pos

    def _exec_assign_or_call(self, pos: int, end: int, env: dict) -> int:
        name = self.tokens[pos]
        if name.text not in env:
            raise SimError(f"unknown variable {name.text!r}", name.start)
        nxt = self.tokens[pos + 1]
        if nxt.text == ".":
            method = self.tokens[pos + 2]
            if self.tokens[pos + 3].text != "(":
                raise SimError(f"unsupported statement on {name.text!r}", name.start)
            close = self._match(pos + 3)
            args = self._parse_args(pos + 4, close, env)
            self._apply_method(name.text, method.text, args, env, name.start)
            pos = close + 1
            if pos < end and self.tokens[pos].text == ";":
                pos += 1
            return pos
        index_node = None
        if nxt.text == "[":
            close = self._match(pos + 1)
            parser = _ExprParser(self.text, self.tokens, pos + 2, close)
            index_node = parser.parse()
            nxt = self.tokens[close + 1]
            op_pos = close + 1
        else:
            op_pos = pos + 1
        op = self.tokens[op_pos].text
        if op not in ("=", "+=", "-=", "*=", "/=", "%="):
            raise SimError(f"unsupported statement at {name.text!r}", name.start)
        parser = _ExprParser(self.text, self.tokens, op_pos + 1, end)
        value = self.evaluator.eval(parser.parse(), env)
        pos = parser.pos
        if pos < end and self.tokens[pos].text == ";":
            pos += 1
        if index_node is not None:
            target = env[name.text]
            idx = self.evaluator._int(self.evaluator.eval(index_node, env))
            if not isinstance(target, list) or not 0 <= idx < len(target):
                raise SimError(f"index {idx} out of bounds on {name.text!r}", name.start)
            if op == "=":
                target[idx] = value
            else:
                target[idx] = self._combine(target[idx], op, value)
            return pos
        if op == "=":
            env[name.text] = _clone(value)
        else:
            env[name.text] = self._combine(env[name.text], op, value)
        return pos

    def _combine(self, old, op: str, value):
        table = {
            "+=": lambda a, b: a + b,
            "-=": lambda a, b: a - b,
            "*=": lambda a, b: a * b,
            "/=": _euclid_div,
            "%=": _euclid_mod,
        }
        return table[op](old, value)

    def _parse_args(self, pos: int, close: int, env: dict) -> list:
        args = []
        parser = _ExprParser(self.text, self.tokens, pos, close)
        while parser.pos < close:
            args.append(self.evaluator.eval(parser.parse(), env))
            if parser.pos < close and self.tokens[parser.pos].text == ",":
                parser.pos += 1
        return args

    def _apply_method(self, name: str, method: str, args: list, env: dict, offset: int):
        target = env[name]
        if not isinstance(target, list):
            raise SimError(f"method .{method}() on a non-sequence value", offset)
        if method == "set":
            idx, value = int(args[0]), args[1]
            if not 0 <= idx < len(target):
                raise SimError(f"set index {idx} out of bounds", offset)
            target[idx] = value
        elif method == "push":
            target.append(args[0])
        elif method == "pop":
            if not target:
                raise SimError("pop from empty vector", offset)
            target.pop()
        elif method == "truncate":
            del target[int(args[0]):]
        elif method == "clear":
            del target[:]
        else:
            raise SimError(f"method .{method}() unsupported in simulation", offset)

    def _match(self, pos: int) -> int:
        opener = self.tokens[pos].text
        closer = {"(": ")", "[": "]", "{": "}"}[opener]
        depth = 0
        for j in range(pos, len(self.tokens)):
            t = self.tokens[j].text
            if t == opener:
                depth += 1
            elif t == closer:
                depth -= 1
                if depth == 0:
                    return j
        raise SimError(f"unclosed {opener!r}", self.tokens[pos].start)


class SimulatedVerifier:
    """verify_fn double: interprets every function body and emits a Verus-style log."""

    file_name = "proof.rs"

    def __call__(self, source) -> VerifierReport:
        text = source if isinstance(source, str) else source.source_text
        return report_from_log(self.render_log(text))

    def render_log(self, text: str) -> str:
        try:
            doc = parse_proof(text)
            tokens = tokenize(text)
        except ParseError as exc:
            return (f"error: expected item, found parse failure\n"
                    f"  --> {self.file_name}:{exc.line}:{exc.col}\n"
                    f"verification results: 0 verified, 0 errors\n")
        interp = _Interpreter(text, tokens)
        verified = 0
        failures: list[tuple[int, str]] = []
        for fn in doc.functions:
            body_tokens = [i for i, t in enumerate(tokens)
                           if fn.body_start <= t.start < fn.body_end]
            if not body_tokens:
                verified += 1
                continue
            start, end = body_tokens[0] + 1, body_tokens[-1]
            try:
                failure = interp.run(start, end, {})
            except SimError as exc:
                return (f"error[E9999]: cannot interpret function {fn.name}: {exc}\n"
                        f"  --> {self.file_name}"
                        f":{self._line(text, exc.offset)}:{self._col(text, exc.offset)}\n"
                        f"verification results: 0 verified, 1 errors\n")
            if failure is None:
                verified += 1
            else:
                failures.append((failure.offset, failure.message))
        lines = []
        for offset, message in failures:
            line = self._line(text, offset)
            col = self._col(text, offset)
            source_line = text.splitlines()[line - 1] if line <= len(text.splitlines()) else ""
            lines.append(f"error: {message}")
            lines.append(f"  --> {self.file_name}:{line}:{col}")
            lines.append("   |")
            lines.append(f"{line} | {source_line.strip()}")
            lines.append("")
        lines.append(f"verification results: {verified} verified, {len(failures)} errors")
        lines.append("")
        return "\n".join(lines)

    @staticmethod
    def _line(text: str, offset: int) -> int:
        return text.count("\n", 0, offset) + 1

    @staticmethod
    def _col(text: str, offset: int) -> int:
        return offset - (text.rfind("\n", 0, offset) + 1) + 1


def source_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class FixtureVerifier:
    """verify_fn double serving recorded console logs keyed by source hash."""

    def __init__(self, fixtures_dir: str, fallback=None):
        self.fixtures_dir = fixtures_dir
        self.fallback = fallback
        os.makedirs(fixtures_dir, exist_ok=True)

    def _manifest_path(self) -> str:
        return os.path.join(self.fixtures_dir, "manifest.json")

    def _manifest(self) -> dict:
        try:
            with open(self._manifest_path(), encoding="utf-8") as fh:
                return json.load(fh)
        except (OSError, json.JSONDecodeError):
            return {}

    def record(self, source, raw_log: str):
        text = source if isinstance(source, str) else source.source_text
        digest = source_digest(text)
        manifest = self._manifest()
        log_name = f"log_{digest[:16]}.txt"
        with open(os.path.join(self.fixtures_dir, log_name), "w", encoding="utf-8") as fh:
            fh.write(raw_log)
        manifest[digest] = log_name
        with open(self._manifest_path(), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)

    def __call__(self, source) -> VerifierReport:
        text = source if isinstance(source, str) else source.source_text
        digest = source_digest(text)
        manifest = self._manifest()
        if digest in manifest:
            with open(os.path.join(self.fixtures_dir, manifest[digest]),
                      encoding="utf-8") as fh:
                return report_from_log(fh.read())
        if self.fallback is not None:
            return self.fallback(text)
        raise KeyError(f"no recorded verifier log for source digest {digest[:16]}")
