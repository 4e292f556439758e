"""Closed-form expression language with exact first and second derivatives.

A small grammar for scalar formulas over the variables of a first-order
density problem: spatial coordinates ``x1..xn``, map components ``u1..uN``,
value-slot variables ``eta1..etaN`` and gradient entries ``P11..PNn``
(first index = component, second = axis; single digit each, so expressions
support n, N <= 9).

Evaluation is forward-mode with second-order dual numbers, so gradients and
Hessians with respect to a chosen seed set are exact up to floating point.
All arithmetic is numpy-broadcasting aware: bindings may be scalars or
arrays of a common batch shape, in which case values/derivatives come back
with that batch shape appended.

Non-differentiable points are loud by policy: ``abs``, ``sqrt`` and
fractional powers raise :class:`SingularityError` exactly at their
kink/branch point, and ``log``/division/negative fractional bases raise
:class:`DomainEvalError`.  Callers that want to scan a grid for bad nodes
can pass ``on_singularity="nan"`` to poison offending entries instead.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "Ast",
    "BinOp",
    "Call",
    "DomainEvalError",
    "Dual2",
    "EvalError",
    "Neg",
    "Num",
    "ParseError",
    "SingularityError",
    "Var",
    "eval_jet2",
    "eval_value",
    "parse",
    "to_source",
    "variable_names",
]


class ParseError(ValueError):
    """Lexical/syntactic/name error, carrying the byte offset into the source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalError(ArithmeticError):
    """Base class for runtime evaluation failures."""


class DomainEvalError(EvalError):
    """Evaluation outside the mathematical domain (log of nonpositive, x/0, ...)."""


class SingularityError(EvalError):
    """Evaluation at a non-differentiable point (kink of abs, branch point of a fractional power)."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    lhs: "Node"
    rhs: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Num, Var, Neg, BinOp, Call]

_FUNCTIONS = {"abs": 1, "sqrt": 1, "exp": 1, "log": 1, "sin": 1, "cos": 1, "pow": 2}

_VAR_X = re.compile(r"^x([1-9][0-9]*)$")
_VAR_U = re.compile(r"^u([1-9][0-9]*)$")
_VAR_ETA = re.compile(r"^eta([1-9][0-9]*)$")
_VAR_P = re.compile(r"^P([1-9])([1-9])$")


@dataclass(frozen=True)
class Ast:
    """Parsed expression together with the (n, N) dimensions it was checked against."""

    root: Node
    n: int
    N: int
    variables: frozenset

    def depends_on(self, prefix: str) -> bool:
        return any(v.startswith(prefix) for v in self.variables)


def variable_names(n: int, N: int) -> list:
    """All legal variable names for the given dimensions, in canonical order."""
    names = [f"x{i}" for i in range(1, n + 1)]
    names += [f"eta{a}" for a in range(1, N + 1)]
    names += [f"u{a}" for a in range(1, N + 1)]
    names += [f"P{a}{i}" for a in range(1, N + 1) for i in range(1, n + 1)]
    return names


def _check_variable(name: str, n: int, N: int, offset: int) -> None:
    m = _VAR_X.match(name)
    if m:
        if not 1 <= int(m.group(1)) <= n:
            raise ParseError(f"variable {name!r} out of range (n={n})", offset)
        return
    m = _VAR_U.match(name) or _VAR_ETA.match(name)
    if m:
        if not 1 <= int(m.group(1)) <= N:
            raise ParseError(f"variable {name!r} out of range (N={N})", offset)
        return
    m = _VAR_P.match(name)
    if m:
        a, i = int(m.group(1)), int(m.group(2))
        if not (1 <= a <= N and 1 <= i <= n):
            raise ParseError(f"variable {name!r} out of range (N={N}, n={n})", offset)
        return
    if name.startswith("P") and name[1:].isdigit():
        raise ParseError(
            f"variable {name!r} malformed: P takes two single-digit indices (P<component><axis>)",
            offset,
        )
    raise ParseError(f"unknown variable {name!r}", offset)


# ---------------------------------------------------------------------------
# Lexer / parser

_TOKEN_RE = re.compile(
    r"(?P<num>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),])"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # num | ident | op | end
    text: str
    offset: int


def _tokenize(src: str) -> list:
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ParseError(f"unexpected character {src[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(src)))
    return tokens


class _Parser:
    """Recursive descent with the precedence ladder ^ > unary - > * / > + -.

    All binary operators are left-associative, including ^.  The right
    operand of ^ may carry a leading sign (x^-2), but otherwise unary minus
    binds looser than ^, so -x^2 parses as -(x^2).
    """

    def __init__(self, src: str, n: int, N: int):
        self.src = src
        self.n = n
        self.N = N
        self.tokens = _tokenize(src)
        self.pos = 0
        self.variables = set()

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, text: str) -> None:
        tok = self.peek()
        if tok.kind != "op" or tok.text != text:
            raise ParseError(f"expected {text!r}", tok.offset)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        while self.peek().kind == "op" and self.peek().text == "^":
            self.advance()
            node = BinOp("^", node, self.signed_atom())
        return node

    def signed_atom(self) -> Node:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return Neg(self.signed_atom())
        return self.atom()

    def atom(self) -> Node:
        tok = self.peek()
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "ident":
            self.advance()
            if self.peek().kind == "op" and self.peek().text == "(":
                return self.call(tok)
            _check_variable(tok.text, self.n, self.N, tok.offset)
            self.variables.add(tok.text)
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {tok.text!r}" if tok.kind != "end" else "unexpected end of input", tok.offset)

    def call(self, name_tok: _Token) -> Node:
        name = name_tok.text
        if name not in _FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", name_tok.offset)
        self.expect_op("(")
        args = [self.expr()]
        while self.peek().kind == "op" and self.peek().text == ",":
            self.advance()
            args.append(self.expr())
        self.expect_op(")")
        if len(args) != _FUNCTIONS[name]:
            raise ParseError(
                f"function {name!r} takes {_FUNCTIONS[name]} argument(s), got {len(args)}",
                name_tok.offset,
            )
        return Call(name, tuple(args))


def parse(src: str, dims: tuple) -> Ast:
    """Parse ``src`` against dimensions ``dims = (n, N)``.

    Raises :class:`ParseError` (with byte offset) on syntax errors, unknown
    identifiers, out-of-range variable indices and arity mismatches.
    """
    n, N = dims
    if not src or not src.strip():
        raise ParseError("empty expression", 0)
    if n < 1 or N < 1:
        raise ValueError(f"dimensions must be positive, got (n={n}, N={N})")
    parser = _Parser(src, n, N)
    root = parser.parse()
    return Ast(root=root, n=n, N=N, variables=frozenset(parser.variables))


# ---------------------------------------------------------------------------
# Printing (canonical form; parse(to_source(ast)) == ast)

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 10, 20, 30, 40, 50


def _node_prec(node: Node) -> int:
    if isinstance(node, BinOp):
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL, "^": _PREC_POW}[node.op]
    if isinstance(node, Neg):
        return _PREC_NEG
    return _PREC_ATOM


def _fmt(node: Node, min_prec: int) -> str:
    prec = _node_prec(node)
    if isinstance(node, Num):
        text = repr(node.value)
    elif isinstance(node, Var):
        text = node.name
    elif isinstance(node, Neg):
        text = "-" + _fmt(node.arg, _PREC_NEG)
    elif isinstance(node, BinOp):
        # left-associative: right operand needs strictly higher precedence
        text = f"{_fmt(node.lhs, prec)} {node.op} {_fmt(node.rhs, prec + 1)}"
    elif isinstance(node, Call):
        text = f"{node.func}({', '.join(_fmt(a, 0) for a in node.args)})"
    else:  # pragma: no cover
        raise TypeError(f"unknown node {node!r}")
    if prec < min_prec:
        return f"({text})"
    return text


def to_source(ast: Ast) -> str:
    """Render ``ast`` back to source text in canonical form."""
    return _fmt(ast.root, 0)


# ---------------------------------------------------------------------------
# Second-order forward-mode duals


@dataclass
class Dual2:
    """Value with gradient and (optionally) Hessian over k seed directions.

    ``val`` has some batch shape S; ``grad`` broadcasts to (k,) + S and
    ``hess`` to (k, k) + S, with the seed axes leading and the batch axes
    trailing.  ``hess`` is ``None`` in first-order mode.  Internally arrays
    may carry size-1 batch axes; :func:`eval_jet2` broadcasts the final
    result to full shape.
    """

    val: np.ndarray
    grad: np.ndarray
    hess: "np.ndarray | None"

    def __add__(self, other):
        return dual_add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return dual_sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return dual_sub(_coerce(other, self), self)

    def __mul__(self, other):
        return dual_mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return dual_div(self, _coerce(other, self), "raise")

    def __rtruediv__(self, other):
        return dual_div(_coerce(other, self), self, "raise")

    def __pow__(self, other):
        return dual_pow(self, _coerce(other, self), "raise")

    def __neg__(self):
        return dual_neg(self)


def dual_constant(value, nseeds: int, order: int = 2, batch_ndim: int = 0) -> Dual2:
    # trailing size-1 axes keep seed axes from colliding with batch axes
    val = np.asarray(value, dtype=float)
    pad = (1,) * max(batch_ndim, val.ndim)
    grad = np.zeros((nseeds,) + pad)
    hess = np.zeros((nseeds, nseeds) + pad) if order >= 2 else None
    return Dual2(val, grad, hess)


def dual_seed(value, index: int, nseeds: int, order: int = 2, batch_ndim: int = 0) -> Dual2:
    d = dual_constant(value, nseeds, order, batch_ndim)
    d.grad[(index,) + (0,) * (d.grad.ndim - 1)] = 1.0
    return d


def _coerce(other, like: Dual2) -> Dual2:
    if isinstance(other, Dual2):
        return other
    return dual_constant(
        other,
        like.grad.shape[0],
        1 if like.hess is None else 2,
        batch_ndim=like.grad.ndim - 1,
    )


def _outer(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    return g1[:, None] * g2[None, :]


def dual_add(a: Dual2, b: Dual2) -> Dual2:
    hess = None if a.hess is None else a.hess + b.hess
    return Dual2(a.val + b.val, a.grad + b.grad, hess)


def dual_sub(a: Dual2, b: Dual2) -> Dual2:
    hess = None if a.hess is None else a.hess - b.hess
    return Dual2(a.val - b.val, a.grad - b.grad, hess)


def dual_neg(a: Dual2) -> Dual2:
    return Dual2(-a.val, -a.grad, None if a.hess is None else -a.hess)


def dual_mul(a: Dual2, b: Dual2) -> Dual2:
    val = a.val * b.val
    grad = a.val * b.grad + b.val * a.grad
    hess = None
    if a.hess is not None:
        # grouping the two outer products first keeps the hessian
        # bitwise symmetric (float + is commutative, not associative)
        outer = _outer(a.grad, b.grad)
        outer = outer + np.swapaxes(outer, 0, 1)
        hess = a.val * b.hess + b.val * a.hess + outer
    return Dual2(val, grad, hess)


def _report(policy: str, bad, exc, message: str):
    """Either raise on any flagged entry or return the mask for NaN-poisoning."""
    bad = np.asarray(bad)
    if not bad.any():
        return None
    if policy == "raise":
        raise exc(message)
    return bad


def _poison(arr: np.ndarray, bad) -> np.ndarray:
    if bad is None:
        return arr
    arr = np.array(np.broadcast_arrays(arr, bad)[0], dtype=float, copy=True)
    arr[np.broadcast_to(bad, arr.shape)] = np.nan
    return arr


def _compose(d: Dual2, f0, f1, f2) -> Dual2:
    """Chain rule through a scalar function with elementwise derivative values."""
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    grad = f1 * d.grad
    hess = None
    if d.hess is not None:
        f2 = np.asarray(f2, dtype=float)
        hess = f1 * d.hess + f2 * _outer(d.grad, d.grad)
    return Dual2(f0, grad, hess)


def dual_div(a: Dual2, b: Dual2, policy: str) -> Dual2:
    bad = _report(policy, b.val == 0.0, DomainEvalError, "division by zero")
    with np.errstate(all="ignore"):
        inv = _poison(1.0 / b.val, bad)
        binv = _compose(b, inv, -(inv ** 2), 2.0 * inv ** 3 if b.hess is not None else None)
    return dual_mul(a, binv)


def dual_abs(a: Dual2, policy: str) -> Dual2:
    bad = _report(policy, a.val == 0.0, SingularityError, "abs evaluated at its kink (0)")
    s = _poison(np.sign(a.val), bad)
    return _compose(a, np.abs(a.val), s, 0.0)


def dual_sqrt(a: Dual2, policy: str) -> Dual2:
    bad_neg = _report(policy, a.val < 0.0, DomainEvalError, "sqrt of negative value")
    bad_zero = _report(policy, a.val == 0.0, SingularityError, "sqrt at branch point 0")
    bad = None
    if bad_neg is not None or bad_zero is not None:
        bad = np.zeros(np.shape(a.val), dtype=bool)
        if bad_neg is not None:
            bad |= bad_neg
        if bad_zero is not None:
            bad |= bad_zero
    with np.errstate(all="ignore"):
        v = _poison(a.val, bad)
        r = np.sqrt(v)
        f1 = 0.5 / r
        f2 = (-0.25 / (v * r)) if a.hess is not None else None
    return _compose(a, r, f1, f2)


def dual_exp(a: Dual2) -> Dual2:
    e = np.exp(a.val)
    return _compose(a, e, e, e)


def dual_log(a: Dual2, policy: str) -> Dual2:
    bad = _report(policy, a.val <= 0.0, DomainEvalError, "log of nonpositive value")
    with np.errstate(all="ignore"):
        v = _poison(a.val, bad)
        return _compose(a, np.log(v), 1.0 / v, -1.0 / v ** 2 if a.hess is not None else None)


def dual_sin(a: Dual2) -> Dual2:
    return _compose(a, np.sin(a.val), np.cos(a.val), -np.sin(a.val))


def dual_cos(a: Dual2) -> Dual2:
    return _compose(a, np.cos(a.val), -np.sin(a.val), -np.cos(a.val))


def _is_constant(d: Dual2) -> bool:
    if d.grad.size and np.any(d.grad != 0.0):
        return False
    if d.hess is not None and d.hess.size and np.any(d.hess != 0.0):
        return False
    return True


def _coeff_pow(c, v, e):
    """c * v**e with the convention that a zero coefficient kills the factor."""
    with np.errstate(all="ignore"):
        raw = c * np.power(v, e)
    return np.where(np.asarray(c) == 0.0, 0.0, raw)


def dual_pow(a: Dual2, b: Dual2, policy: str) -> Dual2:
    if not _is_constant(b):
        # genuinely varying exponent: a^b = exp(b log a), requires a > 0
        return dual_exp(dual_mul(b, dual_log(a, policy)))
    m = np.asarray(b.val, dtype=float)
    v = a.val
    is_int = (m == np.floor(m)) & np.isfinite(m)
    vzero = np.asarray(v == 0.0)
    vneg = np.asarray(v < 0.0)
    bad_domain = _report(
        policy,
        (vneg & ~is_int) | (vzero & (m < 0)),
        DomainEvalError,
        "power: negative base with non-integer exponent, or zero base with negative exponent",
    )
    bad_sing = _report(
        policy,
        vzero & ~is_int & (m > 0),
        SingularityError,
        "fractional power at branch point 0",
    )
    bad = None
    if bad_domain is not None or bad_sing is not None:
        bad = np.zeros(np.broadcast_shapes(np.shape(v), np.shape(m)), dtype=bool)
        if bad_domain is not None:
            bad |= bad_domain
        if bad_sing is not None:
            bad |= bad_sing
    with np.errstate(all="ignore"):
        f0 = _poison(np.power(v, m), bad)
        f1 = _poison(_coeff_pow(m, v, m - 1.0), bad)
        f2 = _poison(_coeff_pow(m * (m - 1.0), v, m - 2.0), bad) if a.hess is not None else None
    return _compose(a, f0, f1, f2)


# ---------------------------------------------------------------------------
# Evaluation


def _batch_shape(binding: Mapping) -> tuple:
    shapes = [np.shape(v) for v in binding.values()]
    return np.broadcast_shapes(*shapes) if shapes else ()


def eval_jet2(
    ast: Ast,
    binding: Mapping,
    seeds: Sequence,
    order: int = 2,
    on_singularity: str = "raise",
) -> Dual2:
    """Evaluate ``ast`` with exact derivatives over the seeded variables.

    ``binding`` maps every variable used by the expression to a float or to
    an array (common batch shape); ``seeds`` is an ordered subset of the
    bound variables.  The result's ``grad[j]`` / ``hess[j, k]`` are the
    first/second partials with respect to ``seeds[j]`` / ``seeds[k]``.
    """
    seeds = list(seeds)
    missing = [v for v in ast.variables if v not in binding]
    if missing:
        raise KeyError(f"unbound variables: {sorted(missing)}")
    for s in seeds:
        if s not in binding:
            raise KeyError(f"seed {s!r} is not bound")
    k = len(seeds)
    seed_index = {name: j for j, name in enumerate(seeds)}
    policy = on_singularity
    if policy not in ("raise", "nan"):
        raise ValueError(f"on_singularity must be 'raise' or 'nan', got {policy!r}")
    S = _batch_shape(binding)
    nd = len(S)

    def ev(node: Node) -> Dual2:
        if isinstance(node, Num):
            return dual_constant(node.value, k, order, nd)
        if isinstance(node, Var):
            j = seed_index.get(node.name)
            if j is None:
                return dual_constant(binding[node.name], k, order, nd)
            return dual_seed(binding[node.name], j, k, order, nd)
        if isinstance(node, Neg):
            return dual_neg(ev(node.arg))
        if isinstance(node, BinOp):
            a = ev(node.lhs)
            b = ev(node.rhs)
            if node.op == "+":
                return dual_add(a, b)
            if node.op == "-":
                return dual_sub(a, b)
            if node.op == "*":
                return dual_mul(a, b)
            if node.op == "/":
                return dual_div(a, b, policy)
            return dual_pow(a, b, policy)
        if isinstance(node, Call):
            if node.func == "pow":
                return dual_pow(ev(node.args[0]), ev(node.args[1]), policy)
            a = ev(node.args[0])
            if node.func == "abs":
                return dual_abs(a, policy)
            if node.func == "sqrt":
                return dual_sqrt(a, policy)
            if node.func == "exp":
                return dual_exp(a)
            if node.func == "log":
                return dual_log(a, policy)
            if node.func == "sin":
                return dual_sin(a)
            if node.func == "cos":
                return dual_cos(a)
        raise TypeError(f"unknown node {node!r}")  # pragma: no cover

    out = ev(ast.root)
    val = np.broadcast_to(np.asarray(out.val, dtype=float), S)
    grad = np.broadcast_to(out.grad, (k,) + S)
    hess = None
    if order >= 2:
        hess = np.broadcast_to(out.hess, (k, k) + S)
    return Dual2(np.array(val), np.array(grad), None if hess is None else np.array(hess))


def eval_value(ast: Ast, binding: Mapping, on_singularity: str = "raise") -> np.ndarray:
    """Plain evaluation (no derivatives); scalars in, scalar/array out."""
    return eval_jet2(ast, binding, seeds=(), order=1, on_singularity=on_singularity).val
