"""Expression trees for model equations.

Expressions are immutable trees over manifest variables, latent variables and
parameters.  They can be parsed from text, printed back, evaluated on scalars
or on whole data columns (numpy broadcasting), and differentiated in reverse
mode.  Evaluation over columns is the hot path of the estimator, so every
expression is compiled once into a flat :class:`Tape`.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence, Union

import numpy as np

MANIFEST = "manifest"
LATENT = "latent"
PARAM = "param"
SYMBOL_KINDS = (MANIFEST, LATENT, PARAM)

FUNCTIONS = ("exp", "abs", "theta")


class ExprSyntaxError(ValueError):
    """Malformed expression text; ``pos`` is the 0-based character offset."""

    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at position {pos}")


class UndeclaredIdentifierError(ValueError):
    def __init__(self, name: str, pos: int | None = None):
        self.name = name
        self.pos = pos
        where = f" at position {pos}" if pos is not None else ""
        super().__init__(f"undeclared identifier {name!r}{where}")


class EvaluationError(ArithmeticError):
    """Raised when an expression cannot be evaluated (division by zero)."""


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: str


@dataclass(frozen=True)
class Unary:
    op: str  # 'neg', 'abs', 'exp', 'theta'
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # '+', '-', '*', '/'
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Power:
    base: "Expr"
    exponent: int


Expr = Union[Const, Symbol, Unary, Binary, Power]


def const(value: float) -> Const:
    return Const(float(value))


def manifest(name: str) -> Symbol:
    return Symbol(name, MANIFEST)


def latent(name: str) -> Symbol:
    return Symbol(name, LATENT)


def param(name: str) -> Symbol:
    return Symbol(name, PARAM)


def add(a: Expr, b: Expr) -> Binary:
    return Binary("+", a, b)


def sub(a: Expr, b: Expr) -> Binary:
    return Binary("-", a, b)


def mul(a: Expr, b: Expr) -> Binary:
    return Binary("*", a, b)


def div(a: Expr, b: Expr) -> Binary:
    return Binary("/", a, b)


def neg(a: Expr) -> Unary:
    return Unary("neg", a)


def theta(a: Expr) -> Unary:
    return Unary("theta", a)


def symbols_of(expr: Expr, kind: str | None = None) -> set[str]:
    """Names of the symbols referenced in ``expr`` (optionally of one kind)."""
    out: set[str] = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Symbol):
            if kind is None or node.kind == kind:
                out.add(node.name)
        elif isinstance(node, Unary):
            stack.append(node.arg)
        elif isinstance(node, Binary):
            stack.append(node.left)
            stack.append(node.right)
        elif isinstance(node, Power):
            stack.append(node.base)
    return out


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, symbols: Mapping[str, str]):
        self.text = text
        self.symbols = symbols
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, pos = self.take()
        if val != value or kind == "end":
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos, self.text)

    def parse(self) -> Expr:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", pos, self.text)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Unary("neg", self.factor())
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            kind, val, pos = self.take()
            if kind != "number" or not val.isdigit():
                raise ExprSyntaxError("exponent must be an integer", pos, self.text)
            return Power(base, sign * int(val))
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "number":
            return Const(float(val))
        if kind == "ident":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", pos, self.text)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Unary(val, arg)
            if val in FUNCTIONS:
                raise ExprSyntaxError(f"function {val!r} needs an argument", pos, self.text)
            if val not in self.symbols:
                raise UndeclaredIdentifierError(val, pos)
            return Symbol(val, self.symbols[val])
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", pos, self.text)


def parse_expr(text: str, symbols: Mapping[str, str]) -> Expr:
    """Parse ``text`` into an expression tree.

    Parameters
    ----------
    text : str
        Expression source, e.g. ``"om11*xi1^2 + om12*xi1*xi2"``.
    symbols : mapping
        Declared identifiers, name -> kind (``"manifest"``, ``"latent"`` or
        ``"param"``).

    Raises
    ------
    ExprSyntaxError
        On malformed input; carries the character position.
    UndeclaredIdentifierError
        When an identifier is not in ``symbols``.
    """
    return _Parser(text, symbols).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node: Expr) -> int:
    if isinstance(node, Binary):
        return _PREC[node.op]
    if isinstance(node, Unary) and node.op == "neg":
        return 3
    if isinstance(node, Power):
        return 4
    if isinstance(node, Const) and (node.value < 0 or str(node.value).startswith("-")):
        return 3
    return 5


def _fmt_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def to_text(node: Expr) -> str:
    """Render an expression so that :func:`parse_expr` rebuilds the same tree."""
    if isinstance(node, Const):
        s = _fmt_number(abs(node.value))
        return f"-{s}" if node.value < 0 else s
    if isinstance(node, Symbol):
        return node.name
    if isinstance(node, Unary):
        if node.op == "neg":
            inner = to_text(node.arg)
            return f"-{inner}" if _prec(node.arg) >= 3 else f"-({inner})"
        return f"{node.op}({to_text(node.arg)})"
    if isinstance(node, Power):
        base = to_text(node.base)
        if _prec(node.base) < 5:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    p = _PREC[node.op]
    left = to_text(node.left)
    right = to_text(node.right)
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    sep = " " if p == 1 else ""
    return f"{left}{sep}{node.op}{sep}{right}"


# ---------------------------------------------------------------------------
# Evaluation and reverse-mode differentiation
# ---------------------------------------------------------------------------


class Tape:
    """Flat, topologically ordered form of an expression.

    Shared subtrees are stored once.  ``forward`` binds symbols to scalars or
    equally shaped arrays; ``partials`` runs the backward sweep and returns the
    derivative of the output with respect to every symbol, unreduced (one
    entry per case when bound to columns).
    """

    def __init__(self, expr: Expr):
        self.expr = expr
        self.ops: list[tuple] = []
        self.leaves: dict[str, int] = {}
        index: dict[int, int] = {}
        self._emit(expr, index)

    def _emit(self, node: Expr, index: dict[int, int]) -> int:
        key = id(node)
        if key in index:
            return index[key]
        # one slot per symbol name, so repeated occurrences share an adjoint
        if isinstance(node, Symbol) and node.name in self.leaves:
            index[key] = self.leaves[node.name]
            return index[key]
        if isinstance(node, Const):
            entry = ("const", node.value)
        elif isinstance(node, Symbol):
            entry = ("sym", node.name)
        elif isinstance(node, Unary):
            entry = (node.op, self._emit(node.arg, index))
        elif isinstance(node, Binary):
            a = self._emit(node.left, index)
            b = self._emit(node.right, index)
            entry = (node.op, a, b)
        elif isinstance(node, Power):
            entry = ("pow", self._emit(node.base, index), node.exponent)
        else:
            raise TypeError(f"not an expression node: {node!r}")
        self.ops.append(entry)
        k = len(self.ops) - 1
        index[key] = k
        if entry[0] == "sym":
            self.leaves.setdefault(node.name, k)
        return k

    def forward(self, bindings: Mapping[str, object]) -> list:
        vals: list = []
        for entry in self.ops:
            op = entry[0]
            if op == "const":
                v = entry[1]
            elif op == "sym":
                try:
                    v = bindings[entry[1]]
                except KeyError:
                    raise KeyError(f"no value bound for {entry[1]!r}") from None
            elif op == "+":
                v = vals[entry[1]] + vals[entry[2]]
            elif op == "-":
                v = vals[entry[1]] - vals[entry[2]]
            elif op == "*":
                v = vals[entry[1]] * vals[entry[2]]
            elif op == "/":
                den = vals[entry[2]]
                if np.any(np.asarray(den) == 0):
                    raise EvaluationError("division by zero")
                v = vals[entry[1]] / den
            elif op == "pow":
                base, k = vals[entry[1]], entry[2]
                if k < 0 and np.any(np.asarray(base) == 0):
                    raise EvaluationError("division by zero in negative power")
                v = base**k if k >= 0 else 1.0 / base ** (-k)
            elif op == "neg":
                v = -vals[entry[1]]
            elif op == "abs":
                v = np.abs(vals[entry[1]])
            elif op == "exp":
                with np.errstate(over="ignore"):
                    v = np.exp(vals[entry[1]])
            elif op == "theta":
                a = vals[entry[1]]
                v = (a + np.abs(a)) / 2.0
            else:  # pragma: no cover
                raise ValueError(op)
            vals.append(v)
        return vals

    def value(self, bindings: Mapping[str, object]):
        return self.forward(bindings)[-1]

    def partials(self, vals: list) -> dict[str, object]:
        """Backward sweep seeded with ones; ``vals`` comes from :meth:`forward`."""
        nops = len(self.ops)
        adj: list = [None] * nops
        adj[-1] = np.ones_like(np.asarray(vals[-1], dtype=float))
        for k in range(nops - 1, -1, -1):
            g = adj[k]
            if g is None:
                continue
            entry = self.ops[k]
            op = entry[0]
            if op in ("const", "sym"):
                continue
            if op == "+":
                _acc(adj, entry[1], g)
                _acc(adj, entry[2], g)
            elif op == "-":
                _acc(adj, entry[1], g)
                _acc(adj, entry[2], -g)
            elif op == "*":
                _acc(adj, entry[1], g * vals[entry[2]])
                _acc(adj, entry[2], g * vals[entry[1]])
            elif op == "/":
                den = vals[entry[2]]
                _acc(adj, entry[1], g / den)
                _acc(adj, entry[2], -g * vals[k] / den)
            elif op == "pow":
                e = entry[2]
                if e != 0:
                    base = vals[entry[1]]
                    d = e * base ** (e - 1) if e >= 1 else e / base ** (1 - e)
                    _acc(adj, entry[1], g * d)
            elif op == "neg":
                _acc(adj, entry[1], -g)
            elif op == "abs":
                _acc(adj, entry[1], g * np.sign(vals[entry[1]]))
            elif op == "exp":
                _acc(adj, entry[1], g * vals[k])
            elif op == "theta":
                _acc(adj, entry[1], g * (np.asarray(vals[entry[1]]) > 0))
        out = {}
        for name, k in self.leaves.items():
            out[name] = adj[k] if adj[k] is not None else np.zeros_like(adj[-1])
        return out


def _acc(adj: list, k: int, g) -> None:
    adj[k] = g if adj[k] is None else adj[k] + g


@lru_cache(maxsize=1024)
def compile_expr(expr: Expr) -> Tape:
    return Tape(expr)


def evaluate(expr: Expr, row: Mapping[str, object]):
    """Value of ``expr`` with symbols bound by name in ``row``.

    Bindings may be floats or numpy arrays of a common shape, in which case
    the result is an array.  Division by zero raises :class:`EvaluationError`.
    """
    with np.errstate(invalid="ignore"):
        v = compile_expr(expr).value(row)
    if np.ndim(v) == 0:
        return float(v)
    return np.broadcast_to(v, np.broadcast_shapes(*(np.shape(x) for x in row.values()))).astype(float)


def grad(expr: Expr, wrt: Sequence[str], row: Mapping[str, object]) -> np.ndarray:
    """Partial derivatives of ``expr`` with respect to the names in ``wrt``.

    ``abs`` and ``theta`` take subgradient 0 at the kink.  With array
    bindings the result has shape ``(len(wrt),) + shape``.
    """
    tape = compile_expr(expr)
    with np.errstate(invalid="ignore"):
        vals = tape.forward(row)
        parts = tape.partials(vals)
    shape = np.shape(vals[-1])
    out = []
    for name in wrt:
        d = parts.get(name)
        out.append(np.zeros(shape) if d is None else np.broadcast_to(d, shape))
    return np.array(out, dtype=float)
