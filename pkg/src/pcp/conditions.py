"""Small boolean condition language for pre/post-condition checks.

Atoms:
    completed(<task-id>)        a task has a completed execution
    phase_completed(<phase-id>) a phase has a completed iteration
    responded(<stakeholder-id>) an external request to that party was answered

combined with ``and``, ``or``, ``not`` and parentheses. The language is kept
this small on purpose: the only ordering rules the workflow needs are
precedence-style, so the whole space stays exhaustively testable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Protocol

ATOM_KINDS = ("completed", "phase_completed", "responded")

_TOKEN_RE = re.compile(r"\s*(\(|\)|[A-Za-z_][A-Za-z0-9_\-]*)")


class ConditionSyntaxError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at position {position})")
        self.position = position


class StateView(Protocol):
    """What a condition needs to know about a running instance."""

    def task_completed(self, task_id: str) -> bool: ...

    def phase_completed(self, phase_id: str) -> bool: ...

    def responded(self, party_id: str) -> bool: ...


@dataclass(frozen=True)
class Atom:
    kind: str  # one of ATOM_KINDS
    ident: str

    def evaluate(self, state: StateView) -> bool:
        if self.kind == "completed":
            return state.task_completed(self.ident)
        if self.kind == "phase_completed":
            return state.phase_completed(self.ident)
        return state.responded(self.ident)

    def atoms(self) -> Iterator["Atom"]:
        yield self

    def __str__(self) -> str:
        return f"{self.kind}({self.ident})"


@dataclass(frozen=True)
class Not:
    child: "ConditionExpr"

    def evaluate(self, state: StateView) -> bool:
        return not self.child.evaluate(state)

    def atoms(self) -> Iterator[Atom]:
        yield from self.child.atoms()

    def __str__(self) -> str:
        return f"not {_wrap(self.child)}"


@dataclass(frozen=True)
class And:
    left: "ConditionExpr"
    right: "ConditionExpr"

    def evaluate(self, state: StateView) -> bool:
        return self.left.evaluate(state) and self.right.evaluate(state)

    def atoms(self) -> Iterator[Atom]:
        yield from self.left.atoms()
        yield from self.right.atoms()

    def __str__(self) -> str:
        return f"{_wrap(self.left)} and {_wrap(self.right)}"


@dataclass(frozen=True)
class Or:
    left: "ConditionExpr"
    right: "ConditionExpr"

    def evaluate(self, state: StateView) -> bool:
        return self.left.evaluate(state) or self.right.evaluate(state)

    def atoms(self) -> Iterator[Atom]:
        yield from self.left.atoms()
        yield from self.right.atoms()

    def __str__(self) -> str:
        return f"{_wrap(self.left)} or {_wrap(self.right)}"


ConditionExpr = Atom | Not | And | Or


def _wrap(expr: ConditionExpr) -> str:
    if isinstance(expr, Atom):
        return str(expr)
    return f"({expr})"


class _Parser:
    """Recursive descent over: or_expr := and_expr ('or' and_expr)* etc."""

    def __init__(self, text: str) -> None:
        self.text = text
        self.tokens: list[tuple[str, int]] = []
        pos = 0
        while pos < len(text):
            match = _TOKEN_RE.match(text, pos)
            if match is None:
                rest = text[pos:].lstrip()
                if not rest:
                    break
                raise ConditionSyntaxError(f"unexpected character {rest[0]!r}", pos)
            self.tokens.append((match.group(1), match.start(1)))
            pos = match.end()
        self.index = 0

    def peek(self) -> str | None:
        if self.index < len(self.tokens):
            return self.tokens[self.index][0]
        return None

    def next(self, expected: str | None = None) -> tuple[str, int]:
        if self.index >= len(self.tokens):
            raise ConditionSyntaxError(
                f"unexpected end of input{' (expected ' + expected + ')' if expected else ''}",
                len(self.text),
            )
        token = self.tokens[self.index]
        self.index += 1
        if expected is not None and token[0] != expected:
            raise ConditionSyntaxError(f"expected {expected!r}, got {token[0]!r}", token[1])
        return token

    def parse(self) -> ConditionExpr:
        expr = self.or_expr()
        if self.index < len(self.tokens):
            token, pos = self.tokens[self.index]
            raise ConditionSyntaxError(f"trailing input {token!r}", pos)
        return expr

    def or_expr(self) -> ConditionExpr:
        expr = self.and_expr()
        while self.peek() == "or":
            self.next()
            expr = Or(expr, self.and_expr())
        return expr

    def and_expr(self) -> ConditionExpr:
        expr = self.not_expr()
        while self.peek() == "and":
            self.next()
            expr = And(expr, self.not_expr())
        return expr

    def not_expr(self) -> ConditionExpr:
        if self.peek() == "not":
            self.next()
            return Not(self.not_expr())
        return self.atom()

    def atom(self) -> ConditionExpr:
        token, pos = self.next()
        if token == "(":
            expr = self.or_expr()
            self.next(")")
            return expr
        if token in ATOM_KINDS:
            self.next("(")
            ident, ident_pos = self.next()
            if ident in ("(", ")", "and", "or", "not"):
                raise ConditionSyntaxError(f"expected identifier, got {ident!r}", ident_pos)
            self.next(")")
            return Atom(token, ident)
        raise ConditionSyntaxError(f"expected atom, got {token!r}", pos)


def parse_condition(text: str) -> ConditionExpr:
    """Parse a condition expression; raises ConditionSyntaxError with position."""
    return _Parser(text).parse()


def evaluate_condition(expr: ConditionExpr, state: StateView) -> bool:
    """Pure fold of the expression tree over the given state view."""
    return expr.evaluate(state)


def unknown_identifiers(expr: ConditionExpr, task_ids: set[str], phase_ids: set[str]) -> list[str]:
    """Atoms whose identifier is not declared in the model.

    ``responded`` atoms reference runtime-registered stakeholders, which a
    model cannot declare, so they are not checked here.
    """
    problems = []
    for atom in expr.atoms():
        if atom.kind == "completed" and atom.ident not in task_ids:
            problems.append(str(atom))
        elif atom.kind == "phase_completed" and atom.ident not in phase_ids:
            problems.append(str(atom))
    return problems
