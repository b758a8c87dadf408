"""A minimal arithmetic expression parser for structural formulas.

Grammar (recursive descent, usual precedence, ``^`` binds tightest and is
right-associative):

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

so ``-x^2`` means ``-(x^2)`` and ``2^-1`` is valid.

Supported functions: ``sin(x)`` and the indicator-threshold ``ind(x)``
(1 where ``x >= 0``, else 0).  Identifiers refer to columns; evaluation is
vectorized over numpy arrays.  This deliberately covers only the function
shapes used by the bundled simulation families — it is not a general
expression language.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = ["Expression", "parse_expression"]

_FUNCTIONS = {
    "sin": np.sin,
    "ind": lambda x: (np.asarray(x) >= 0).astype(np.float64),
}


@dataclass(frozen=True)
class _Token:
    kind: str  # 'num', 'ident', 'op', 'lparen', 'rparen', 'end'
    text: str
    pos: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, total = 0, len(source)
    while i < total:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < total and (source[j].isdigit() or source[j] in ".eE" or
                                 (source[j] in "+-" and j > i and source[j - 1] in "eE")):
                j += 1
            tokens.append(_Token("num", source[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < total and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("ident", source[i:j], i))
            i = j
            continue
        if ch in "+-*/^":
            tokens.append(_Token("op", ch, i))
            i += 1
            continue
        if ch == "(":
            tokens.append(_Token("lparen", ch, i))
            i += 1
            continue
        if ch == ")":
            tokens.append(_Token("rparen", ch, i))
            i += 1
            continue
        raise ValueError(f"unexpected character {ch!r} at position {i}")
    tokens.append(_Token("end", "", total))
    return tokens


class _Node:
    def evaluate(self, env: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def names(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class _Const(_Node):
    value: float

    def evaluate(self, env):
        return np.float64(self.value)

    def names(self):
        return set()


@dataclass(frozen=True)
class _Name(_Node):
    name: str

    def evaluate(self, env):
        try:
            return np.asarray(env[self.name], dtype=np.float64)
        except KeyError:
            raise KeyError(f"unknown identifier {self.name!r}") from None

    def names(self):
        return {self.name}


@dataclass(frozen=True)
class _Call(_Node):
    func: str
    arg: _Node

    def evaluate(self, env):
        return _FUNCTIONS[self.func](self.arg.evaluate(env))

    def names(self):
        return self.arg.names()


@dataclass(frozen=True)
class _Unary(_Node):
    operand: _Node

    def evaluate(self, env):
        return -self.operand.evaluate(env)

    def names(self):
        return self.operand.names()


@dataclass(frozen=True)
class _Binary(_Node):
    op: str
    left: _Node
    right: _Node

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            return a / b
        return np.power(a, b)

    def names(self):
        return self.left.names() | self.right.names()


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.advance()
        if tok.kind != kind:
            raise ValueError(
                f"expected {kind} at position {tok.pos}, found {tok.text!r}"
            )
        return tok

    def parse(self) -> _Node:
        node = self.expr()
        tail = self.peek()
        if tail.kind != "end":
            raise ValueError(f"trailing input at position {tail.pos}: {tail.text!r}")
        return node

    def expr(self) -> _Node:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = _Binary(op, node, self.term())
        return node

    def term(self) -> _Node:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = _Binary(op, node, self.unary())
        return node

    def unary(self) -> _Node:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return _Unary(self.unary())
        return self.power()

    def power(self) -> _Node:
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.advance()
            return _Binary("^", base, self.unary())
        return base

    def atom(self) -> _Node:
        tok = self.advance()
        if tok.kind == "num":
            try:
                return _Const(float(tok.text))
            except ValueError:
                raise ValueError(
                    f"malformed number {tok.text!r} at position {tok.pos}"
                ) from None
        if tok.kind == "ident":
            if self.peek().kind == "lparen":
                if tok.text not in _FUNCTIONS:
                    raise ValueError(
                        f"unknown function {tok.text!r} at position {tok.pos}"
                    )
                self.advance()
                arg = self.expr()
                self.expect("rparen")
                return _Call(tok.text, arg)
            return _Name(tok.text)
        if tok.kind == "lparen":
            node = self.expr()
            self.expect("rparen")
            return node
        raise ValueError(f"unexpected token {tok.text!r} at position {tok.pos}")


@dataclass(frozen=True)
class Expression:
    """A parsed formula; evaluate against a name -> array environment."""

    source: str
    root: _Node

    def __call__(self, env: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.asarray(self.root.evaluate(env), dtype=np.float64)

    @property
    def identifiers(self) -> tuple[str, ...]:
        return tuple(sorted(self.root.names()))


def parse_expression(source: str) -> Expression:
    """Parse ``source`` into an :class:`Expression`; raises ``ValueError``
    with a character position on malformed input."""
    if not isinstance(source, str) or not source.strip():
        raise ValueError("empty formula")
    return Expression(source, _Parser(_tokenize(source)).parse())
