"""Tiny expression language for scalar fields on chart domains.

Grammar (deliberately small; no unary minus — write ``0-x``):

    expr   := term (('+' | '-') term)*
    term   := factor ('*' factor)*
    factor := atom ('^' uint)?
    atom   := number | variable | func '(' expr ')' | '(' expr ')'
    func   := 'sin' | 'cos' | 'exp'

Numbers are IEEE-754 doubles; exponents are nonnegative integer literals.
Parse errors carry the byte offset of the offending token.  On compact
chart domains (angle variables), expressions must be periodic: every
occurrence of an angle variable has to sit inside sin/cos of an
integer-coefficient linear combination of angle variables (so
``sin(theta)^2`` and ``exp(cos(theta))`` are fine, bare ``theta`` is not).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Add",
    "Sub",
    "Mul",
    "Pow",
    "Call",
    "ExpressionError",
    "ParseError",
    "UnknownVariableError",
    "NonPeriodicError",
    "parse",
    "evaluate",
    "differentiate",
    "simplify",
    "to_source",
    "variables_of",
    "is_periodic",
    "ensure_periodic",
]

FUNCTIONS = ("sin", "cos", "exp")


class ExpressionError(ValueError):
    """Base class for expression-language errors."""


class ParseError(ExpressionError):
    def __init__(self, message: str, source: str, pos: int):
        super().__init__(f"{message} (byte {pos} of {source!r})")
        self.source = source
        self.pos = pos


class UnknownVariableError(ParseError):
    def __init__(self, name: str, source: str, pos: int, known: Iterable[str]):
        known_list = ", ".join(sorted(known)) or "<none>"
        ParseError.__init__(
            self,
            f"unknown variable '{name}' (known: {known_list})",
            source,
            pos,
        )
        self.name = name


class NonPeriodicError(ExpressionError):
    """Expression is not periodic in an angle variable on a compact chart."""


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Add, Sub, Mul, Pow, Call]


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[+\-*^()])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # 'num' | 'name' | 'op' | 'end'
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    while i < len(source):
        m = _TOKEN_RE.match(source, i)
        if m is None:
            raise ParseError(f"unexpected character {source[i]!r}", source, i)
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), i))
        i = m.end()
    tokens.append(_Token("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, variables):
        self.source = source
        self.variables = None if variables is None else frozenset(variables)
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, text: str) -> None:
        tok = self.peek()
        if tok.kind != "op" or tok.text != text:
            raise ParseError(f"expected '{text}'", self.source, tok.pos)
        self.advance()

    def parse(self) -> Expr:
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected trailing input {tok.text!r}", self.source, tok.pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text == "*":
            self.advance()
            node = Mul(node, self.factor())
        return node

    def factor(self) -> Expr:
        node = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.advance()
            tok = self.peek()
            if tok.kind != "num" or not tok.text.isdigit():
                raise ParseError("expected nonnegative integer exponent", self.source, tok.pos)
            self.advance()
            node = Pow(node, int(tok.text))
        return node

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "name":
            self.advance()
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(
                        f"unknown function '{tok.text}' (have: {', '.join(FUNCTIONS)})",
                        self.source,
                        tok.pos,
                    )
                self.advance()
                arg = self.expr()
                self.expect_op(")")
                return Call(tok.text, arg)
            if self.variables is not None and tok.text not in self.variables:
                raise UnknownVariableError(tok.text, self.source, tok.pos, self.variables)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"expected a number, variable or '(', got {tok.text!r}", self.source, tok.pos)


def parse(source: str, variables=None) -> Expr:
    """Parse ``source``; if ``variables`` is given, reject names outside it."""
    return _Parser(source, variables).parse()


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_NUMPY_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


def evaluate(node: Expr, env: Mapping[str, "float | np.ndarray"]):
    """Evaluate on floats or numpy arrays (broadcasting as numpy does)."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Add):
        return evaluate(node.left, env) + evaluate(node.right, env)
    if isinstance(node, Sub):
        return evaluate(node.left, env) - evaluate(node.right, env)
    if isinstance(node, Mul):
        return evaluate(node.left, env) * evaluate(node.right, env)
    if isinstance(node, Pow):
        return evaluate(node.base, env) ** node.exponent
    if isinstance(node, Call):
        return _NUMPY_FUNCS[node.func](evaluate(node.arg, env))
    raise TypeError(f"not an expression node: {node!r}")


def variables_of(node: Expr) -> frozenset[str]:
    if isinstance(node, Num):
        return frozenset()
    if isinstance(node, Var):
        return frozenset((node.name,))
    if isinstance(node, (Add, Sub, Mul)):
        return variables_of(node.left) | variables_of(node.right)
    if isinstance(node, Pow):
        return variables_of(node.base)
    if isinstance(node, Call):
        return variables_of(node.arg)
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Simplification and differentiation
# ---------------------------------------------------------------------------

_MATH_FUNCS = {"sin": math.sin, "cos": math.cos, "exp": math.exp}


def simplify(node: Expr) -> Expr:
    """Constant folding plus the obvious 0/1 identities."""
    if isinstance(node, (Num, Var)):
        return node
    if isinstance(node, Add):
        a, b = simplify(node.left), simplify(node.right)
        if isinstance(a, Num) and isinstance(b, Num):
            return Num(a.value + b.value)
        if isinstance(a, Num) and a.value == 0.0:
            return b
        if isinstance(b, Num) and b.value == 0.0:
            return a
        return Add(a, b)
    if isinstance(node, Sub):
        a, b = simplify(node.left), simplify(node.right)
        if isinstance(a, Num) and isinstance(b, Num):
            return Num(a.value - b.value)
        if isinstance(b, Num) and b.value == 0.0:
            return a
        return Sub(a, b)
    if isinstance(node, Mul):
        a, b = simplify(node.left), simplify(node.right)
        if isinstance(a, Num) and isinstance(b, Num):
            return Num(a.value * b.value)
        for x, y in ((a, b), (b, a)):
            if isinstance(x, Num):
                if x.value == 0.0:
                    return Num(0.0)
                if x.value == 1.0:
                    return y
        return Mul(a, b)
    if isinstance(node, Pow):
        base = simplify(node.base)
        if node.exponent == 0:
            return Num(1.0)
        if node.exponent == 1:
            return base
        if isinstance(base, Num):
            return Num(base.value**node.exponent)
        return Pow(base, node.exponent)
    if isinstance(node, Call):
        arg = simplify(node.arg)
        if isinstance(arg, Num):
            return Num(_MATH_FUNCS[node.func](arg.value))
        return Call(node.func, arg)
    raise TypeError(f"not an expression node: {node!r}")


def differentiate(node: Expr, var: str) -> Expr:
    """Symbolic partial derivative, simplified."""
    return simplify(_diff(node, var))


def _diff(node: Expr, var: str) -> Expr:
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.name == var else 0.0)
    if isinstance(node, Add):
        return Add(_diff(node.left, var), _diff(node.right, var))
    if isinstance(node, Sub):
        return Sub(_diff(node.left, var), _diff(node.right, var))
    if isinstance(node, Mul):
        return Add(
            Mul(_diff(node.left, var), node.right),
            Mul(node.left, _diff(node.right, var)),
        )
    if isinstance(node, Pow):
        if node.exponent == 0:
            return Num(0.0)
        return Mul(
            Mul(Num(float(node.exponent)), Pow(node.base, node.exponent - 1)),
            _diff(node.base, var),
        )
    if isinstance(node, Call):
        inner = _diff(node.arg, var)
        if node.func == "sin":
            outer: Expr = Call("cos", node.arg)
        elif node.func == "cos":
            outer = Mul(Num(-1.0), Call("sin", node.arg))
        else:  # exp
            outer = Call("exp", node.arg)
        return Mul(outer, inner)
    raise TypeError(f"not an expression node: {node!r}")


def is_zero(node: Expr) -> bool:
    """True if the simplified expression is the literal 0."""
    s = simplify(node)
    return isinstance(s, Num) and s.value == 0.0


# ---------------------------------------------------------------------------
# Printing (round-trips through parse)
# ---------------------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4


def _prec(node: Expr) -> int:
    if isinstance(node, (Add, Sub)):
        return _PREC_ADD
    if isinstance(node, Mul):
        return _PREC_MUL
    if isinstance(node, Pow):
        return _PREC_POW
    return _PREC_ATOM


def _emit(node: Expr, required: int) -> str:
    if isinstance(node, Num):
        if node.value < 0 or (node.value == 0.0 and math.copysign(1.0, node.value) < 0):
            return f"(0-{abs(node.value)!r})"
        text = repr(node.value)
        return text
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Add):
        body = f"{_emit(node.left, _PREC_ADD)}+{_emit(node.right, _PREC_MUL)}"
        return f"({body})" if _PREC_ADD < required else body
    if isinstance(node, Sub):
        body = f"{_emit(node.left, _PREC_ADD)}-{_emit(node.right, _PREC_MUL)}"
        return f"({body})" if _PREC_ADD < required else body
    if isinstance(node, Mul):
        body = f"{_emit(node.left, _PREC_MUL)}*{_emit(node.right, _PREC_POW)}"
        return f"({body})" if _PREC_MUL < required else body
    if isinstance(node, Pow):
        body = f"{_emit(node.base, _PREC_ATOM)}^{node.exponent}"
        return f"({body})" if _PREC_POW < required else body
    if isinstance(node, Call):
        return f"{node.func}({_emit(node.arg, _PREC_ADD)})"
    raise TypeError(f"not an expression node: {node!r}")


def to_source(node: Expr) -> str:
    """Grammar-valid text that parses back to an equivalent expression."""
    return _emit(node, _PREC_ADD)


# ---------------------------------------------------------------------------
# Periodicity on compact charts
# ---------------------------------------------------------------------------


def _constant_value(node: Expr):
    """Value of a variable-free subtree, or None."""
    if variables_of(node):
        return None
    return float(evaluate(node, {}))


def _linear_angle_coeffs(node: Expr, angle_vars: frozenset[str]):
    """(coeffs {var: c}, const) if node == sum(c_v * v) + const, else None."""
    const = _constant_value(node)
    if const is not None:
        return {}, const
    if isinstance(node, Var):
        return ({node.name: 1.0}, 0.0) if node.name in angle_vars else None
    if isinstance(node, (Add, Sub)):
        a = _linear_angle_coeffs(node.left, angle_vars)
        b = _linear_angle_coeffs(node.right, angle_vars)
        if a is None or b is None:
            return None
        sign = 1.0 if isinstance(node, Add) else -1.0
        out = dict(a[0])
        for k, v in b[0].items():
            out[k] = out.get(k, 0.0) + sign * v
        return out, a[1] + sign * b[1]
    if isinstance(node, Mul):
        for x, y in ((node.left, node.right), (node.right, node.left)):
            c = _constant_value(x)
            if c is not None:
                inner = _linear_angle_coeffs(y, angle_vars)
                if inner is None:
                    return None
                return {k: c * v for k, v in inner[0].items()}, c * inner[1]
        return None
    if isinstance(node, Pow) and node.exponent == 1:
        return _linear_angle_coeffs(node.base, angle_vars)
    return None


def _integer_linear_angle(node: Expr, angle_vars: frozenset[str]):
    """(int coeffs, const) when the arg is integer-linear in angle vars."""
    lin = _linear_angle_coeffs(node, angle_vars)
    if lin is None:
        return None
    coeffs, const = lin
    if not all(abs(c - round(c)) <= 1e-9 for c in coeffs.values()):
        return None
    return {k: int(round(c)) for k, c in coeffs.items() if round(c) != 0}, const


def is_periodic(node: Expr, angle_vars) -> bool:
    """True if 2π-periodic in every angle variable.

    Sufficient syntactic criterion: each angle-variable occurrence lies inside
    sin/cos applied to an integer-coefficient linear combination of angle
    variables (or inside an already-periodic subexpression).
    """
    angle_vars = frozenset(angle_vars)
    if not (variables_of(node) & angle_vars):
        return True
    if isinstance(node, (Add, Sub, Mul)):
        return is_periodic(node.left, angle_vars) and is_periodic(node.right, angle_vars)
    if isinstance(node, Pow):
        return is_periodic(node.base, angle_vars)
    if isinstance(node, Call):
        if node.func in ("sin", "cos"):
            if _integer_linear_angle(node.arg, angle_vars) is not None:
                return True
        return is_periodic(node.arg, angle_vars)
    return False  # bare angle Var


def ensure_periodic(node: Expr, angle_vars, context: str = "expression") -> None:
    if not is_periodic(node, angle_vars):
        raise NonPeriodicError(
            f"{context} {to_source(node)!r} is not periodic in "
            f"{sorted(frozenset(angle_vars))}; on compact charts only "
            "sin/cos of integer multiples of angles (combined with +, -, *, "
            "integer powers, exp) are allowed"
        )


# ---------------------------------------------------------------------------
# Trig linearization: rewrite sin/cos of integer angle combinations as
# polynomials in per-angle cosine/sine symbols (`theta__c`, `theta__s`).
# Lets hot loops evaluate periodic fields directly from embedded
# coordinates, with no inverse trig.
# ---------------------------------------------------------------------------


def cos_symbol(var: str) -> str:
    return f"{var}__c"


def sin_symbol(var: str) -> str:
    return f"{var}__s"


def _angle_multiple(var: str, n: int) -> tuple[Expr, Expr]:
    """(cos(n*var), sin(n*var)) as expressions in the cos/sin symbols, n >= 0."""
    if n == 0:
        return Num(1.0), Num(0.0)
    c1: Expr = Var(cos_symbol(var))
    s1: Expr = Var(sin_symbol(var))
    c, s = c1, s1
    for _ in range(n - 1):
        c, s = Sub(Mul(c, c1), Mul(s, s1)), Add(Mul(s, c1), Mul(c, s1))
    return c, s


def _angle_pair(coeffs: dict, const: float) -> tuple[Expr, Expr]:
    """(cos, sin) of sum(n_v * v) + const via angle addition."""
    cos_e: Expr = Num(math.cos(const))
    sin_e: Expr = Num(math.sin(const))
    for var in sorted(coeffs):
        n = coeffs[var]
        cn, sn = _angle_multiple(var, abs(n))
        if n < 0:
            sn = Mul(Num(-1.0), sn)
        cos_e, sin_e = (
            Sub(Mul(cos_e, cn), Mul(sin_e, sn)),
            Add(Mul(sin_e, cn), Mul(cos_e, sn)),
        )
    return cos_e, sin_e


def linearize_trig(node: Expr, angle_vars) -> Expr:
    """Eliminate angle variables in favor of their cos/sin symbols.

    Requires the expression to be periodic (checked upstream); a bare angle
    variable outside sin/cos is an error.
    """
    angle_vars = frozenset(angle_vars)

    def rec(n: Expr) -> Expr:
        if isinstance(n, Num):
            return n
        if isinstance(n, Var):
            if n.name in angle_vars:
                raise NonPeriodicError(
                    f"bare angle variable '{n.name}' cannot be linearized"
                )
            return n
        if isinstance(n, Add):
            return Add(rec(n.left), rec(n.right))
        if isinstance(n, Sub):
            return Sub(rec(n.left), rec(n.right))
        if isinstance(n, Mul):
            return Mul(rec(n.left), rec(n.right))
        if isinstance(n, Pow):
            return Pow(rec(n.base), n.exponent)
        if isinstance(n, Call):
            if n.func in ("sin", "cos"):
                il = _integer_linear_angle(n.arg, angle_vars)
                if il is not None:
                    cos_e, sin_e = _angle_pair(*il)
                    return cos_e if n.func == "cos" else sin_e
            return Call(n.func, rec(n.arg))
        raise TypeError(f"not an expression node: {n!r}")

    return simplify(rec(node))


def to_python(node: Expr, names=None, math_module: str = "math") -> str:
    """Emit Python source (fully parenthesized) for scalar-math evaluation."""
    names = names or {}

    def rec(n: Expr) -> str:
        if isinstance(n, Num):
            return repr(n.value)
        if isinstance(n, Var):
            return names.get(n.name, n.name)
        if isinstance(n, Add):
            return f"({rec(n.left)} + {rec(n.right)})"
        if isinstance(n, Sub):
            return f"({rec(n.left)} - {rec(n.right)})"
        if isinstance(n, Mul):
            return f"({rec(n.left)} * {rec(n.right)})"
        if isinstance(n, Pow):
            return f"({rec(n.base)})**{n.exponent}"
        if isinstance(n, Call):
            return f"{math_module}.{n.func}({rec(n.arg)})"
        raise TypeError(f"not an expression node: {n!r}")

    return rec(node)
