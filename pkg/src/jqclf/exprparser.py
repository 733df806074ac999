"""Parser and evaluator for scalar expressions over state and input variables.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'

Variables are ``x1..xn`` and ``u1..um``; callers may declare extra scalar
names (for instance ``s`` for one-variable functions). Evaluation routes
every operation through the generic functions of :mod:`jqclf.fields`, so
the same tree evaluates floats, arrays and dual numbers along one code path.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from . import fields as F
from .fields import DomainError

__all__ = [
    "ParseError",
    "DomainError",
    "Num",
    "Var",
    "BinOp",
    "Neg",
    "Call",
    "Expression",
    "parse",
    "evaluate",
    "evaluate_generic",
    "FUNCTIONS",
]


class ParseError(ValueError):
    """Syntax or name error; ``position`` is the 1-based character index."""

    def __init__(self, message: str, position: int):
        self.message = message
        self.position = position
        super().__init__(f"{message} at position {position}")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Num, Var, BinOp, Neg, Call]

#: name -> (arity, implementation)
FUNCTIONS: dict[str, tuple[int, Callable]] = {
    "sqrt": (1, F.sqrt),
    "sin": (1, F.sin),
    "cos": (1, F.cos),
    "exp": (1, F.exp),
    "log": (1, F.log),
    "angle": (1, F.angle),
    "min2": (2, F.min2),
    "max2": (2, F.max2),
}

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)
_STATE = re.compile(r"x([1-9]\d*)$")
_INPUT = re.compile(r"u([1-9]\d*)$")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.lastgroup is None:
            start = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ParseError(f"unexpected character {source[start]!r}", start + 1)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start + 1))
        pos = m.end()
    tokens.append(("eof", "", len(source) + 1))
    return tokens


class _Parser:
    def __init__(self, source: str, state_dim: int, input_dim: int, names: Sequence[str]):
        self.tokens = _tokenize(source)
        self.i = 0
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.names = set(names)

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value or kind != "op":
            found = "end of input" if kind == "eof" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "eof":
            raise ParseError(f"unexpected {text!r}", pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.unary())
        if kind == "op" and text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.advance()
        if kind == "num":
            value = float(text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {text!r} overflows", pos)
            return Num(value)
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(text, pos)
            return self.variable(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "eof" else repr(text)
        raise ParseError(f"unexpected {found}", pos)

    def call(self, name: str, pos: int) -> Node:
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", pos)
        self.advance()  # '('
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        arity = FUNCTIONS[name][0]
        if len(args) != arity:
            raise ParseError(f"{name} takes {arity} argument(s), got {len(args)}", pos)
        return Call(name, tuple(args))

    def variable(self, name: str, pos: int) -> Node:
        if name in self.names:
            return Var(name)
        m = _STATE.match(name)
        if m:
            if int(m.group(1)) > self.state_dim:
                raise ParseError(f"state index out of range in {name!r} (n={self.state_dim})", pos)
            return Var(name)
        m = _INPUT.match(name)
        if m:
            if int(m.group(1)) > self.input_dim:
                raise ParseError(f"input index out of range in {name!r} (m={self.input_dim})", pos)
            return Var(name)
        if name in FUNCTIONS:
            raise ParseError(f"function {name!r} used without arguments", pos)
        raise ParseError(f"unknown identifier {name!r}", pos)


def _to_source(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{_to_source(node.operand)})"
    if isinstance(node, BinOp):
        return f"({_to_source(node.left)} {node.op} {_to_source(node.right)})"
    return f"{node.func}({', '.join(_to_source(a) for a in node.args)})"


def _eval(node: Node, env: Mapping[str, object]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise KeyError(f"no value supplied for variable {node.name!r}") from None
    try:
        if isinstance(node, BinOp):
            a = _eval(node.left, env)
            b = _eval(node.right, env)
            op = node.op
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if op == "/":
                return F.div(a, b)
            return F.power(a, b)
        if isinstance(node, Neg):
            return -_eval(node.operand, env)
        args = [_eval(a, env) for a in node.args]
        return FUNCTIONS[node.func][1](*args)
    except DomainError as err:
        raise err.with_expr(_to_source(node)) from None


def _variables(node: Node, out: set) -> set:
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, BinOp):
        _variables(node.left, out)
        _variables(node.right, out)
    elif isinstance(node, Neg):
        _variables(node.operand, out)
    elif isinstance(node, Call):
        for a in node.args:
            _variables(a, out)
    return out


@dataclass(frozen=True)
class Expression:
    """Immutable parsed expression with its declared dimensions."""

    root: Node
    state_dim: int
    input_dim: int = 0
    source: str = ""
    names: tuple = ()

    def variables(self) -> set:
        return _variables(self.root, set())

    def to_source(self) -> str:
        return _to_source(self.root)

    def evaluate(self, env: Mapping[str, float]):
        return evaluate(self, env)

    def evaluate_generic(self, env: Mapping[str, object]):
        return evaluate_generic(self, env)

    def bind(self, x: Sequence, u: Sequence = (), extra: Mapping[str, object] | None = None) -> dict:
        """Environment mapping ``x1..``/``u1..`` to the given coordinates."""
        env = {f"x{i + 1}": xi for i, xi in enumerate(x)}
        env.update({f"u{k + 1}": uk for k, uk in enumerate(u)})
        if extra:
            env.update(extra)
        return env

    def __call__(self, x: Sequence, u: Sequence = ()):
        return _eval(self.root, self.bind(x, u))


def parse(source: str, state_dim: int, input_dim: int = 0, names: Sequence[str] = ()) -> Expression:
    """Parse ``source`` into an :class:`Expression`.

    Raises :class:`ParseError` with a 1-based character position on syntax
    errors, unknown identifiers and out-of-range variable indices.
    """
    if not isinstance(source, str) or source.strip() == "":
        raise ParseError("empty expression", 1)
    root = _Parser(source, state_dim, input_dim, names).parse()
    return Expression(root, state_dim, input_dim, source, tuple(names))


def evaluate(expr: Expression, env: Mapping[str, float]):
    """Evaluate on floats or arrays; domain errors name the subexpression."""
    out = _eval(expr.root, env)
    if isinstance(out, F.Dual):
        raise TypeError("evaluate received dual-valued inputs; use evaluate_generic")
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


def evaluate_generic(expr: Expression, env: Mapping[str, object]):
    """Evaluate over dual numbers (or any mix of floats, arrays and duals)."""
    return _eval(expr.root, env)
