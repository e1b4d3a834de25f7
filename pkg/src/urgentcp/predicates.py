"""Condition expressions for workflow edge routing.

Grammar (&& binds tighter than ||)::

    expr       := and_expr ("||" and_expr)*
    and_expr   := atom ("&&" atom)*
    atom       := "(" expr ")" | comparison
    comparison := path op literal
    op         := == | != | <= | >= | < | >
    literal    := number | "quoted string" | true | false
    path       := dotted identifier, e.g. fire.area

Paths are looked up verbatim in the (flat, dotted-key) stage context.
Ordering operators apply to numbers only; equality requires both sides to
share a type.  Parsing an expression, printing it, and re-parsing the
result is a fixed point.
"""

import json
import re
from dataclasses import dataclass

from .errors import MissingField, PredicateSyntax, TypeMismatch

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<bool_and>&&)
  | (?P<bool_or>\|\|)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<number>-?\d+(\.\d+)?)
  | (?P<string>"(\\.|[^"\\])*")
  | (?P<path>[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*)
""", re.VERBOSE)

_KEYWORDS = {"true": True, "false": False}


@dataclass
class Comparison:
    path: str
    op: str
    literal: object

    def __str__(self):
        if isinstance(self.literal, bool):
            lit = "true" if self.literal else "false"
        elif isinstance(self.literal, str):
            lit = json.dumps(self.literal)
        else:
            lit = repr(self.literal)
        return f"{self.path} {self.op} {lit}"


@dataclass
class And:
    terms: list

    def __str__(self):
        return " && ".join(
            f"({t})" if isinstance(t, Or) else str(t) for t in self.terms)


@dataclass
class Or:
    terms: list

    def __str__(self):
        return " || ".join(str(t) for t in self.terms)


class _Tokens:
    def __init__(self, text):
        self.text = text
        self.items = []  # (kind, value, offset)
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if not m:
                raise PredicateSyntax(f"unexpected character {text[pos]!r}", pos)
            kind = m.lastgroup
            if kind != "ws":
                self.items.append((kind, m.group(), pos))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.items[self.i] if self.i < len(self.items) else ("eof", "", len(self.text))

    def take(self, kind=None):
        tok = self.peek()
        if kind is not None and tok[0] != kind:
            raise PredicateSyntax(f"expected {kind}, got {tok[1]!r}", tok[2])
        self.i += 1
        return tok


def parse(text: str):
    """Parse an expression into its AST; raises PredicateSyntax with the
    offending character offset."""
    tokens = _Tokens(text)
    node = _parse_or(tokens)
    trailing = tokens.peek()
    if trailing[0] != "eof":
        raise PredicateSyntax(f"unexpected trailing {trailing[1]!r}", trailing[2])
    return node


def _parse_or(tokens):
    terms = [_parse_and(tokens)]
    while tokens.peek()[0] == "bool_or":
        tokens.take()
        terms.append(_parse_and(tokens))
    return terms[0] if len(terms) == 1 else Or(terms)


def _parse_and(tokens):
    terms = [_parse_atom(tokens)]
    while tokens.peek()[0] == "bool_and":
        tokens.take()
        terms.append(_parse_atom(tokens))
    return terms[0] if len(terms) == 1 else And(terms)


def _parse_atom(tokens):
    kind, value, offset = tokens.peek()
    if kind == "lparen":
        tokens.take()
        node = _parse_or(tokens)
        tokens.take("rparen")
        return node
    if kind == "path":
        if value in _KEYWORDS:
            raise PredicateSyntax(f"{value!r} is not a valid path", offset)
        tokens.take()
        op = tokens.take("op")[1]
        return Comparison(value, op, _parse_literal(tokens))
    raise PredicateSyntax(f"expected a comparison, got {value!r}", offset)


def _parse_literal(tokens):
    kind, value, offset = tokens.take()
    if kind == "number":
        return float(value) if "." in value else int(value)
    if kind == "string":
        return json.loads(value)
    if kind == "path" and value in _KEYWORDS:
        return _KEYWORDS[value]
    raise PredicateSyntax(f"expected a literal, got {value!r}", offset)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _compare(node: Comparison, context: dict) -> bool:
    if node.path not in context:
        raise MissingField(node.path)
    left, right = context[node.path], node.literal
    if node.op in ("<", "<=", ">", ">="):
        if not (_is_number(left) and _is_number(right)):
            raise TypeMismatch(
                f"ordering needs numbers: {node.path} is {type(left).__name__}")
        return {"<": left < right, "<=": left <= right,
                ">": left > right, ">=": left >= right}[node.op]
    same_kind = (_is_number(left) and _is_number(right)) or \
        (isinstance(left, str) and isinstance(right, str)) or \
        (isinstance(left, bool) and isinstance(right, bool))
    if not same_kind:
        raise TypeMismatch(
            f"cannot compare {type(left).__name__} with {type(right).__name__}")
    return left == right if node.op == "==" else left != right


def evaluate(expression, context: dict) -> bool:
    """Evaluate an expression (string or pre-parsed AST) against a context."""
    node = parse(expression) if isinstance(expression, str) else expression
    return _eval(node, context)


def _eval(node, context):
    if isinstance(node, Comparison):
        return _compare(node, context)
    if isinstance(node, And):
        return all(_eval(t, context) for t in node.terms)
    if isinstance(node, Or):
        return any(_eval(t, context) for t in node.terms)
    raise TypeError(f"not an expression node: {node!r}")
