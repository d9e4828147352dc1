import random

import pytest
from hypothesis import given, settings, strategies as st

from imore.errors import AmbiguousConcept, ArityError, EmptyVocabulary, ProgramSyntaxError, UnknownConcept
from imore.program import (
    Filter, Program, Query, QuestionType, Relate, Relation, TemplateSet, linearize, parse_program,
    random_program, to_text,
)
from imore.vocab import Concept, ConceptKind, ConceptVocabulary

VOCAB = ConceptVocabulary()
A = lambda s: Concept(ConceptKind.ACTION, s)
D = lambda s: Concept(ConceptKind.DIRECTION, s)
B = lambda s: Concept(ConceptKind.BODY_PART, s)


def test_parse_bare_filter_resolves_to_direction():
    prog = parse_program("query_action(relate(before, filter(left)))", VOCAB)
    assert prog.root == Query(QuestionType.QUERY_ACTION, Relate(Relation.BEFORE, (Filter(D("left")),)))
    assert len(prog) == 3


def test_parse_minimal_program():
    prog = parse_program("query_body_part(filter_action(jump))", VOCAB)
    assert prog.root == Query(QuestionType.QUERY_BODY_PART, Filter(A("jump")))
    assert len(prog) == 2


def test_parse_unknown_concept():
    with pytest.raises(UnknownConcept):
        parse_program("query_action(relate(before, filter(nosuch)))", VOCAB)


def test_parse_ambiguous_bare_filter():
    vocab = ConceptVocabulary(actions=("up", "walk"))
    with pytest.raises(AmbiguousConcept):
        parse_program("query_action(filter(up))", vocab)


@pytest.mark.parametrize("text", [
    "query_action(relate(before, filter(left))",
    "query_action(relate(before, filter(left))))",
    "query_action(frobnicate(left))",
    "",
    "query_action relate",
])
def test_parse_syntax_errors(text):
    with pytest.raises(ProgramSyntaxError):
        parse_program(text, VOCAB)


@pytest.mark.parametrize("text", [
    "query_action(relate(between, filter(left)))",
    "query_action(relate(before, filter(left), filter(jump)))",
    "filter_action(jump)",
])
def test_parse_arity_errors(text):
    with pytest.raises(ArityError):
        parse_program(text, VOCAB)


def test_relate_arity_checked_at_construction():
    with pytest.raises(ArityError):
        Relate(Relation.BETWEEN, (Filter(A("jump")),))


def test_to_text_canonical_forms():
    p = Program.from_root(Query(QuestionType.QUERY_ACTION, Relate(Relation.BEFORE, (Filter(D("left")),))))
    assert to_text(p) == "query_action(relate(before, filter_direction(left)))"
    p = Program.from_root(Query(QuestionType.QUERY_BODY_PART, Filter(A("crawl"))))
    assert to_text(p) == "query_body_part(filter_action(crawl))"


def test_filter_bodypart_alias_parses():
    p = parse_program("query_action(filter_bodypart(right_hand))", VOCAB)
    assert to_text(p) == "query_action(filter_body_part(right_hand))"


def test_linearize_example_program():
    steps = parse_program("query_action(relate(before, filter(left)))", VOCAB).steps
    assert [(s.index, s.func, s.deps) for s in steps] == [
        (0, "filter_direction", ()), (1, "relate", (0,)), (2, "query_action", (1,)),
    ]
    assert steps[0].concept == D("left")
    assert steps[1].relation is Relation.BEFORE


def test_linearize_single_filter():
    steps = linearize(Query(QuestionType.QUERY_DIRECTION, Filter(A("walk"))))
    assert len(steps) == 2 and steps[1].deps == (0,)


def test_linearize_between():
    root = Query(QuestionType.QUERY_ACTION, Relate(Relation.BETWEEN, (Filter(A("sit")), Filter(A("stand")))))
    steps = linearize(root)
    assert len(steps) == 4
    assert steps[2].func == "relate" and steps[2].deps == (0, 1)
    assert steps[0].concept == A("sit") and steps[1].concept == A("stand")
    assert steps[3].deps == (2,)


def _check_invariants(prog):
    assert isinstance(prog.root, Query)
    assert prog.question_type is prog.root.question_type
    parents = {}
    for s in prog.steps:
        assert all(d < s.index for d in s.deps)
        for d in s.deps:
            assert d not in parents
            parents[d] = s.index
    roots = [s.index for s in prog.steps if s.index not in parents]
    assert roots == [len(prog.steps) - 1]


def _count_nodes(node):
    return 1 + sum(_count_nodes(c) for c in node.children)


def test_random_program_deterministic():
    assert random_program(0, VOCAB) == random_program(0, VOCAB)
    assert to_text(random_program(0, VOCAB)) == to_text(random_program(0, VOCAB))


def test_random_program_invariants_1000_draws():
    rng = random.Random(1)
    for _ in range(1000):
        prog = random_program(rng, VOCAB)
        _check_invariants(prog)
        assert len(prog) == _count_nodes(prog.root)


def test_random_program_restricted_template():
    ts = TemplateSet.restrict([QuestionType.QUERY_ACTION], [Relation.BEFORE])
    for seed in range(200):
        prog = random_program(seed, VOCAB, ts)
        assert prog.question_type is QuestionType.QUERY_ACTION
        assert isinstance(prog.root.child, Relate) and prog.root.child.relation is Relation.BEFORE


def test_random_program_empty_vocab():
    vocab = ConceptVocabulary(actions=(), directions=(), body_parts=())
    with pytest.raises(EmptyVocabulary):
        random_program(0, vocab)


def test_round_trip_1000_random_programs():
    rng = random.Random(0)
    for _ in range(1000):
        prog = random_program(rng, VOCAB, TemplateSet.restrict(relations=[None, *Relation]))
        back = parse_program(to_text(prog), VOCAB)
        assert back == prog
        assert back.steps == prog.steps


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_round_trip_property(seed):
    prog = random_program(seed, VOCAB)
    assert parse_program(to_text(prog), VOCAB) == prog


def test_whitespace_insensitive():
    a = parse_program("query_action( relate( between ,filter(sit),  filter(stand) ) )", VOCAB)
    assert to_text(a) == "query_action(relate(between, filter_action(sit), filter_action(stand)))"
