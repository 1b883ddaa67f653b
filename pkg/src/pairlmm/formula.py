"""Model-formula parsing for two-level mixed models.

Grammar (one level of nesting, additive terms only):

    formula   := name "~" term ("+" term)*
    term      := "0" | "1" | name | "(" reterm ("+" reterm)* "|" name ")"
    reterm    := "0" | "1" | name

``1`` adds an intercept (the default), ``0`` suppresses it, either in the
fixed part or inside a random-effect group.  Several random-effect groups
may share the same grouping factor; their effects are then independent
blocks of the random-effect covariance, e.g. ``y ~ (1|g) + (0+z|g)``.
Interactions and nesting operators are not supported.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class FormulaError(ValueError):
    """Syntax or semantic error in a model formula, with byte position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>[0-9]+)|(?P<op>[~+|()]))"
)


@dataclass(frozen=True)
class RandomGroup:
    """One parenthesised random-effect group ``(terms | factor)``."""

    factor: str
    intercept: bool
    terms: tuple[str, ...] = ()

    @property
    def n_effects(self) -> int:
        return int(self.intercept) + len(self.terms)

    def unparse(self) -> str:
        inner = _term_list(self.intercept, self.terms)
        return f"({inner} | {self.factor})"


@dataclass(frozen=True)
class ModelFormula:
    """Parsed fixed- and random-effect structure of a model formula."""

    response: str
    fixed_intercept: bool
    fixed_terms: tuple[str, ...] = ()
    re_groups: tuple[RandomGroup, ...] = ()

    @property
    def grouping_factors(self) -> tuple[str, ...]:
        seen: list[str] = []
        for g in self.re_groups:
            if g.factor not in seen:
                seen.append(g.factor)
        return tuple(seen)

    @property
    def variables(self) -> tuple[str, ...]:
        """All data columns the formula references (response first)."""
        out = [self.response]
        for t in self.fixed_terms:
            if t not in out:
                out.append(t)
        for g in self.re_groups:
            for t in g.terms:
                if t not in out:
                    out.append(t)
            if g.factor not in out:
                out.append(g.factor)
        return tuple(out)

    def unparse(self) -> str:
        parts = [_term_list(self.fixed_intercept, self.fixed_terms)]
        parts.extend(g.unparse() for g in self.re_groups)
        return f"{self.response} ~ {' + '.join(parts)}"


def _term_list(intercept: bool, terms: tuple[str, ...]) -> str:
    toks = ["1" if intercept else "0"]
    toks.extend(terms)
    return " + ".join(toks)


@dataclass
class _Tokenizer:
    text: str
    pos: int = 0
    tokens: list[tuple[str, str, int]] = field(default_factory=list)

    def run(self) -> list[tuple[str, str, int]]:
        pos = 0
        text = self.text
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                # skip whitespace-only tails
                if text[pos:].strip() == "":
                    break
                bad = len(text) - len(text[pos:].lstrip())
                raise FormulaError(f"unexpected character {text[bad]!r}", bad)
            at = m.start("name") if m.group("name") else (
                m.start("num") if m.group("num") else m.start("op"))
            if m.group("name"):
                self.tokens.append(("name", m.group("name"), at))
            elif m.group("num"):
                if m.group("num") not in ("0", "1"):
                    raise FormulaError(
                        f"unknown grammar token {m.group('num')!r}", at)
                self.tokens.append(("num", m.group("num"), at))
            else:
                self.tokens.append(("op", m.group("op"), at))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        return self.tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _Tokenizer(text).run()
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, at = self.peek()
        if kind != "op" or val != op:
            raise FormulaError(f"expected {op!r}", at)
        return self.advance()

    def parse(self) -> ModelFormula:
        kind, resp, at = self.advance()
        if kind != "name":
            raise FormulaError("expected response variable name", at)
        self.expect_op("~")

        fixed_intercept = True
        fixed_terms: list[str] = []
        re_groups: list[RandomGroup] = []

        while True:
            kind, val, at = self.peek()
            if kind == "op" and val == "(":
                re_groups.append(self._parse_regroup(resp))
            elif kind == "num":
                self.advance()
                fixed_intercept = val == "1"
            elif kind == "name":
                self.advance()
                if val == resp:
                    raise FormulaError(
                        f"response {resp!r} reused as a term", at)
                if val in fixed_terms:
                    raise FormulaError(f"fixed term {val!r} repeated", at)
                fixed_terms.append(val)
            else:
                raise FormulaError("expected a term", at)
            kind, val, at = self.peek()
            if kind == "op" and val == "+":
                self.advance()
                continue
            if kind == "end":
                break
            raise FormulaError(f"unexpected token {val!r}", at)

        return ModelFormula(
            response=resp,
            fixed_intercept=fixed_intercept,
            fixed_terms=tuple(fixed_terms),
            re_groups=tuple(re_groups),
        )

    def _parse_regroup(self, resp: str) -> RandomGroup:
        _, _, open_at = self.expect_op("(")
        intercept = True
        terms: list[str] = []
        while True:
            kind, val, at = self.peek()
            if kind == "num":
                self.advance()
                intercept = val == "1"
            elif kind == "name":
                self.advance()
                if val == resp:
                    raise FormulaError(
                        f"response {resp!r} reused as a term", at)
                if val in terms:
                    raise FormulaError(
                        f"random-effect term {val!r} repeated", at)
                terms.append(val)
            else:
                raise FormulaError("expected a random-effect term", at)
            kind, val, at = self.peek()
            if kind == "op" and val == "+":
                self.advance()
                continue
            break
        _, _, bar_at = self.expect_op("|")
        kind, factor, at = self.advance()
        if kind != "name":
            raise FormulaError("expected grouping variable name", at)
        if factor == resp:
            raise FormulaError(
                f"grouping variable {factor!r} equals the response", at)
        self.expect_op(")")
        if not intercept and not terms:
            raise FormulaError("empty random group", open_at)
        return RandomGroup(factor=factor, intercept=intercept,
                           terms=tuple(terms))


def parse_formula(text: str) -> ModelFormula:
    """Parse a model formula string.

    Args:
        text: formula such as ``"y ~ (1 + z | school) + x + z"``.

    Returns:
        The structured :class:`ModelFormula`.

    Raises:
        FormulaError: on any syntax or semantic violation, carrying the
            byte position of the offending token.
    """
    return _Parser(text).parse()
