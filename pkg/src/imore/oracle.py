"""Explicit program execution over ground-truth segment annotations.

This is the reference semantics used to label generated questions, and the
explicit-reasoning baseline the neural model is compared against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

from .errors import AmbiguousResult, EmptyResult, MissingAttribute
from .motion import MotionSequence
from .program import Program, ProgramStep, QuestionType, Relation
from .vocab import Concept, ConceptKind

SegmentSet = tuple[int, ...]


def _segset(indices) -> SegmentSet:
    return tuple(sorted(set(indices)))


def exec_filter(motion: MotionSequence, kind: ConceptKind, concept: Concept) -> SegmentSet:
    kind = ConceptKind(kind)
    if concept.kind is not kind:
        raise ValueError(f"filter kind {kind.value} does not match concept kind {concept.kind.value}")
    out = []
    for i, seg in enumerate(motion.segments):
        if kind is ConceptKind.ACTION:
            hit = seg.action == concept
        elif kind is ConceptKind.DIRECTION:
            hit = seg.direction == concept
        else:
            hit = concept in seg.body_parts
        if hit:
            out.append(i)
    return _segset(out)


def exec_relate(motion: MotionSequence, relation: Relation, *args: SegmentSet) -> SegmentSet:
    relation = Relation(relation)
    if len(args) != relation.arity:
        raise ValueError(f"relate({relation.value}) takes {relation.arity} set(s)")
    n = len(motion.segments)
    if relation is Relation.BEFORE:
        return _segset(i - 1 for i in args[0] if i - 1 >= 0)
    if relation is Relation.AFTER:
        return _segset(i + 1 for i in args[0] if i + 1 < n)
    left, right = args
    for b in sorted(right):
        earlier = [a for a in left if a < b]
        if earlier:
            return _segset(range(max(earlier) + 1, b))
    return ()


def segment_attribute(motion: MotionSequence, index: int, question_type: QuestionType) -> Concept:
    seg = motion.segments[index]
    qt = QuestionType(question_type)
    if qt is QuestionType.QUERY_ACTION:
        return seg.action
    if qt is QuestionType.QUERY_DIRECTION:
        if seg.direction is None:
            raise MissingAttribute(f"segment {index} ({seg.action.label}) has no direction")
        return seg.direction
    return seg.primary_body_part


def exec_query(motion: MotionSequence, question_type: QuestionType, segs: SegmentSet) -> Concept:
    if not segs:
        raise EmptyResult("query over an empty segment set")
    if len(segs) > 1:
        raise AmbiguousResult(f"query over {len(segs)} segments {list(segs)}")
    return segment_attribute(motion, segs[0], question_type)


@dataclass(frozen=True)
class TraceEntry:
    step: ProgramStep
    output: Union[SegmentSet, Concept, None]
    error: Optional[str] = None

    def to_dict(self) -> dict:
        out = self.output
        return {
            "index": self.step.index,
            "func": self.step.op,
            "concept": self.step.concept.label if self.step.concept else None,
            "output": out.label if isinstance(out, Concept) else (list(out) if out is not None else None),
            "error": self.error,
        }


@dataclass(frozen=True)
class ExecutionResult:
    answer: Optional[Concept]
    trace: tuple[TraceEntry, ...]
    error: Optional[Exception] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def trace_json(self) -> str:
        return json.dumps([t.to_dict() for t in self.trace])


def run(motion: MotionSequence, program: Program) -> ExecutionResult:
    """Execute every step in order, keeping the intermediate values.

    Errors are captured in the result rather than raised; the trace then
    stops at the failing step.
    """
    values: list = []
    trace: list[TraceEntry] = []
    for step in program.steps:
        try:
            if step.concept is not None:
                val = exec_filter(motion, step.concept.kind, step.concept)
            elif step.relation is not None:
                val = exec_relate(motion, step.relation, *(values[d] for d in step.deps))
            else:
                val = exec_query(motion, QuestionType(step.func), values[step.deps[0]])
        except (EmptyResult, AmbiguousResult, MissingAttribute) as exc:
            trace.append(TraceEntry(step, None, f"{type(exc).__name__}: {exc}"))
            return ExecutionResult(None, tuple(trace), exc)
        values.append(val)
        trace.append(TraceEntry(step, val))
    return ExecutionResult(values[-1], tuple(trace))


def execute(motion: MotionSequence, program: Program) -> Concept:
    """Answer ``program`` on ``motion``; raises the execution error if any."""
    res = run(motion, program)
    if res.error is not None:
        raise res.error
    return res.answer
