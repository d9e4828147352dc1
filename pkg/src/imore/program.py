"""Reasoning-program DSL: AST, parser, canonical printer and linearization.

Canonical text looks like::

    query_action(relate(before, filter_direction(left)))

A bare ``filter(x)`` is accepted on input and resolved to the typed filter
whose vocabulary contains ``x``; output always uses the typed form.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Union

from .errors import ArityError, EmptyVocabulary, ProgramSyntaxError
from .vocab import Concept, ConceptKind, ConceptVocabulary


class Relation(str, Enum):
    BEFORE = "before"
    AFTER = "after"
    BETWEEN = "between"

    @property
    def arity(self) -> int:
        return 2 if self is Relation.BETWEEN else 1


class QuestionType(str, Enum):
    QUERY_ACTION = "query_action"
    QUERY_DIRECTION = "query_direction"
    QUERY_BODY_PART = "query_body_part"

    @property
    def answer_kind(self) -> ConceptKind:
        return _QTYPE_KIND[self]

    @classmethod
    def for_kind(cls, kind: ConceptKind) -> "QuestionType":
        return {v: k for k, v in _QTYPE_KIND.items()}[ConceptKind(kind)]


_QTYPE_KIND = {
    QuestionType.QUERY_ACTION: ConceptKind.ACTION,
    QuestionType.QUERY_DIRECTION: ConceptKind.DIRECTION,
    QuestionType.QUERY_BODY_PART: ConceptKind.BODY_PART,
}

FILTER_FUNCS = {
    ConceptKind.ACTION: "filter_action",
    ConceptKind.DIRECTION: "filter_direction",
    ConceptKind.BODY_PART: "filter_body_part",
}
_FILTER_KIND = {v: k for k, v in FILTER_FUNCS.items()}
_FILTER_KIND["filter_bodypart"] = ConceptKind.BODY_PART


# -- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class Filter:
    concept: Concept

    @property
    def func(self) -> str:
        return FILTER_FUNCS[self.concept.kind]

    @property
    def children(self) -> tuple:
        return ()


@dataclass(frozen=True)
class Relate:
    relation: Relation
    args: tuple

    def __post_init__(self):
        if len(self.args) != self.relation.arity:
            raise ArityError(
                f"relate({self.relation.value}) takes {self.relation.arity} argument(s), "
                f"got {len(self.args)}"
            )

    func = "relate"

    @property
    def children(self) -> tuple:
        return self.args


@dataclass(frozen=True)
class Query:
    question_type: QuestionType
    child: "Node"

    @property
    def func(self) -> str:
        return self.question_type.value

    @property
    def children(self) -> tuple:
        return (self.child,)


Node = Union[Filter, Relate, Query]


@dataclass(frozen=True)
class ProgramStep:
    index: int
    func: str
    concept: Optional[Concept] = None
    relation: Optional[Relation] = None
    deps: tuple[int, ...] = ()

    @property
    def op(self) -> str:
        """Function key with the relation folded in (``relate_before``)."""
        if self.relation is not None:
            return f"{self.func}_{self.relation.value}"
        return self.func


@dataclass(frozen=True)
class Program:
    root: Query
    steps: tuple[ProgramStep, ...] = field(compare=False)

    @classmethod
    def from_root(cls, root: Node) -> "Program":
        validate(root)
        return cls(root, tuple(linearize(root)))

    @property
    def question_type(self) -> QuestionType:
        return self.root.question_type

    def __len__(self):
        return len(self.steps)

    def __str__(self):
        return to_text(self)


def validate(root: Node) -> None:
    if not isinstance(root, Query):
        raise ArityError("program root must be a query_* function")

    def check(node, depth):
        if isinstance(node, Query):
            if depth:
                raise ArityError("query_* may only appear at the root")
            check(node.child, depth + 1)
        elif isinstance(node, Relate):
            for a in node.args:
                check(a, depth + 1)
        elif not isinstance(node, Filter):
            raise TypeError(f"not a program node: {node!r}")

    check(root, 0)


def linearize(root: Node) -> list[ProgramStep]:
    """Post-order steps; each step's deps are the indices of its children."""
    steps: list[ProgramStep] = []

    def visit(node) -> int:
        deps = tuple(visit(c) for c in node.children)
        idx = len(steps)
        if isinstance(node, Filter):
            steps.append(ProgramStep(idx, node.func, concept=node.concept))
        elif isinstance(node, Relate):
            steps.append(ProgramStep(idx, "relate", relation=node.relation, deps=deps))
        else:
            steps.append(ProgramStep(idx, node.func, deps=deps))
        return idx

    visit(root)
    return steps


# -- text form ----------------------------------------------------------------

def _node_text(node: Node) -> str:
    if isinstance(node, Filter):
        return f"{node.func}({node.concept.label})"
    if isinstance(node, Relate):
        inner = ", ".join(_node_text(a) for a in node.args)
        return f"relate({node.relation.value}, {inner})"
    return f"{node.func}({_node_text(node.child)})"


def to_text(program: Union[Program, Node]) -> str:
    root = program.root if isinstance(program, Program) else program
    return _node_text(root)


_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_]*)|(\()|(\))|(,))")


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ProgramSyntaxError(f"unexpected character {text[pos:].lstrip()[:1]!r} at {pos}")
        out.append(m.group(m.lastindex))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens, vocab):
        self.toks = tokens
        self.i = 0
        self.vocab = vocab

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None:
            raise ProgramSyntaxError("unexpected end of program (unbalanced parentheses?)")
        if expected is not None and tok != expected:
            raise ProgramSyntaxError(f"expected {expected!r}, got {tok!r}")
        self.i += 1
        return tok

    def name(self):
        tok = self.take()
        if tok in "(),":
            raise ProgramSyntaxError(f"expected a name, got {tok!r}")
        return tok

    def args(self):
        self.take("(")
        items = [self.item()]
        while self.peek() == ",":
            self.take(",")
            items.append(self.item())
        self.take(")")
        return items

    def item(self):
        # a bare identifier not followed by "(" is an atom (relation or label)
        name = self.name()
        if self.peek() == "(":
            self.i -= 1
            return self.node()
        return name

    def node(self):
        func = self.name().lower()
        if self.peek() != "(":
            raise ProgramSyntaxError(f"expected '(' after {func!r}")
        args = self.args()
        if func == "filter" or func in _FILTER_KIND:
            if len(args) != 1 or not isinstance(args[0], str):
                raise ArityError(f"{func}() takes exactly one concept label")
            label = args[0]
            if func == "filter":
                concept = self.vocab.resolve(label)
            else:
                concept = self.vocab.concept(_FILTER_KIND[func], label)
            return Filter(concept)
        if func == "relate":
            if not args or not isinstance(args[0], str):
                raise ArityError("relate() needs a relation as first argument")
            try:
                rel = Relation(args[0].lower())
            except ValueError:
                raise ProgramSyntaxError(f"unknown relation {args[0]!r}") from None
            children = args[1:]
            if any(isinstance(c, str) for c in children):
                raise ArityError("relate() arguments after the relation must be functions")
            return Relate(rel, tuple(children))
        try:
            qtype = QuestionType(func)
        except ValueError:
            raise ProgramSyntaxError(f"unknown function {func!r}") from None
        if len(args) != 1 or isinstance(args[0], str):
            raise ArityError(f"{func}() takes exactly one function argument")
        return Query(qtype, args[0])


def parse_program(text: str, vocab: ConceptVocabulary | None = None) -> Program:
    if not text or not text.strip():
        raise ProgramSyntaxError("empty program text")
    vocab = vocab or ConceptVocabulary()
    p = _Parser(_tokenize(text), vocab)
    root = p.node()
    if p.peek() is not None:
        raise ProgramSyntaxError(f"trailing input after program: {p.peek()!r}")
    return Program.from_root(root)


# -- random programs ----------------------------------------------------------

@dataclass(frozen=True)
class TemplateSet:
    """Grammar cells to draw from: (question type, relation) pairs and filter kinds.

    A relation of ``None`` denotes a bare ``query(filter(...))`` program.
    """

    cells: tuple = tuple(
        (q, r) for q in QuestionType for r in Relation
    )
    filter_kinds: tuple = tuple(ConceptKind)

    @classmethod
    def restrict(cls, question_types=None, relations=None, filter_kinds=None):
        qs = tuple(QuestionType(q) for q in (question_types or QuestionType))
        rs = tuple(Relation(r) if r is not None else None for r in (relations or Relation))
        fk = tuple(ConceptKind(k) for k in (filter_kinds or ConceptKind))
        return cls(tuple((q, r) for q in qs for r in rs), fk)


def random_program(
    rng_seed: int | random.Random,
    vocab: ConceptVocabulary,
    template_set: TemplateSet | None = None,
) -> Program:
    ts = template_set or TemplateSet()
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    kinds = [k for k in ts.filter_kinds if vocab.labels(k)]
    if not kinds or not ts.cells:
        raise EmptyVocabulary("no filter kind with a non-empty vocabulary")
    qtype, rel = ts.cells[rng.randrange(len(ts.cells))]

    def leaf():
        kind = kinds[rng.randrange(len(kinds))]
        labels = vocab.labels(kind)
        return Filter(Concept(kind, labels[rng.randrange(len(labels))]))

    if rel is None:
        child: Node = leaf()
    else:
        child = Relate(rel, tuple(leaf() for _ in range(rel.arity)))
    return Program.from_root(Query(qtype, child))


def filter_nodes(root: Node) -> Sequence[Filter]:
    out = []

    def visit(n):
        if isinstance(n, Filter):
            out.append(n)
        for c in n.children:
            visit(c)

    visit(root)
    return out
