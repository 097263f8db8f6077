"""Parser for the ``Surv(time, status) ~ a + log(b) + ...`` formula language.

Grammar::

    formula := "Surv" "(" ident "," ident ")" "~" term ("+" term)*
    term    := ident | "log" "(" ident ")"
    ident   := [A-Za-z_][A-Za-z0-9_.]*

Whitespace is insignificant.  Only the ``log`` transform is recognised;
anything else has to be precomputed as a column.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import (
    DuplicateTerm,
    EmptyRHS,
    FormulaSyntaxError,
    IndexOutOfRange,
    MissingSurv,
    UnknownCovariate,
    UnknownTransform,
)

TRANSFORMS = ("identity", "log")

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")


@dataclass(frozen=True)
class Term:
    source: str
    transform: str = "identity"

    @property
    def label(self) -> str:
        if self.transform == "log":
            return f"log({self.source})"
        return self.source

    @property
    def aliases(self) -> tuple[str, ...]:
        if self.transform == "log":
            return (self.label, f"log_{self.source}")
        return (self.source,)


@dataclass(frozen=True)
class ModelSpec:
    time_col: str
    status_col: str
    terms: tuple[Term, ...]

    @property
    def p(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    @property
    def columns(self) -> list[str]:
        """Source columns referenced by the formula, response first, no repeats."""
        cols = [self.time_col, self.status_col]
        for t in self.terms:
            if t.source not in cols:
                cols.append(t.source)
        return cols

    def __str__(self) -> str:
        rhs = " + ".join(self.labels)
        return f"Surv({self.time_col}, {self.status_col}) ~ {rhs}"


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise FormulaSyntaxError(self.pos, repr(ch), self.text)
        self.pos += 1

    def ident(self) -> str:
        self.skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if m is None:
            raise FormulaSyntaxError(self.pos, "identifier", self.text)
        self.pos = m.end()
        return m.group(0)


def parse_formula(text: str) -> ModelSpec:
    """Parse a model formula into a :class:`ModelSpec`.

    Raises a :class:`~afttest.errors.FormulaError` subclass on malformed
    input; ``FormulaSyntaxError`` carries the offending character offset.
    """
    if not isinstance(text, str):
        raise TypeError("formula must be a string")
    sc = _Scanner(text)
    sc.skip_ws()
    head = _IDENT.match(text, sc.pos)
    if head is None or head.group(0) != "Surv":
        raise MissingSurv()
    sc.pos = head.end()
    sc.expect("(")
    time_col = sc.ident()
    sc.expect(",")
    status_col = sc.ident()
    sc.expect(")")
    sc.expect("~")
    if sc.at_end():
        raise EmptyRHS()

    terms: list[Term] = []
    while True:
        start = sc.pos
        name = sc.ident()
        if sc.peek() == "(":
            if name not in TRANSFORMS or name == "identity":
                raise UnknownTransform(name)
            sc.expect("(")
            source = sc.ident()
            sc.expect(")")
            term = Term(source, name)
        else:
            term = Term(name)
        if term in terms:
            sc.pos = start
            raise DuplicateTerm(term.label)
        terms.append(term)
        if sc.at_end():
            break
        sc.expect("+")
    return ModelSpec(time_col, status_col, tuple(terms))


def resolve_covariate(spec: ModelSpec, key: int | str = 1) -> int:
    """Map a covariate key to its 1-based term index.

    Integers are taken as indices; strings are matched against term labels,
    so ``"log_bili"`` and ``"log(bili)"`` both select a log-transformed
    ``bili`` term.  Numeric strings such as ``"2"`` are treated as indices.
    """
    if isinstance(key, bool):
        raise UnknownCovariate(key)
    if isinstance(key, str) and key.strip().isdigit():
        key = int(key.strip())
    if isinstance(key, int):
        if not 1 <= key <= spec.p:
            raise IndexOutOfRange(key)
        return key
    name = key.replace(" ", "")
    for idx, term in enumerate(spec.terms, start=1):
        if name in term.aliases:
            return idx
    raise UnknownCovariate(key)
