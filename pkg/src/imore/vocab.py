"""Concept vocabularies for actions, directions and body parts.

Labels use underscores for spaces (``left_arm``, ``pick_up``). Each label
also carries two surface phrases used by the question templates: a finite
verb phrase ("pick up") and a gerund ("picking up").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .errors import AmbiguousConcept, UnknownConcept


class ConceptKind(str, Enum):
    ACTION = "action"
    DIRECTION = "direction"
    BODY_PART = "body_part"


@dataclass(frozen=True, order=True)
class Concept:
    kind: ConceptKind
    label: str

    def __str__(self):
        return self.label


ACTIONS = (
    "walk", "squat", "jump", "kick", "wave", "raise_arm", "crawl", "turn",
    "pick_up", "sit", "stand", "step",
)
DIRECTIONS = ("left", "right", "forward", "backward", "up", "down")
BODY_PARTS = (
    "left_arm", "right_arm", "left_hand", "right_hand", "left_leg",
    "right_leg", "left_foot", "right_foot", "torso", "head",
)

# verb phrase, gerund
_ACTION_PHRASES = {
    "walk": ("walk", "walking"),
    "squat": ("squat", "squatting"),
    "jump": ("jump", "jumping"),
    "kick": ("kick", "kicking"),
    "wave": ("wave", "waving"),
    "raise_arm": ("raise their arm", "raising their arm"),
    "crawl": ("crawl", "crawling"),
    "turn": ("turn around", "turning around"),
    "pick_up": ("pick up", "picking up"),
    "sit": ("sit down", "sitting down"),
    "stand": ("stand up", "standing up"),
    "step": ("take a step", "taking a step"),
}


def _gerund(verb):
    if verb.endswith("e") and not verb.endswith("ee"):
        return verb[:-1] + "ing"
    return verb + "ing"


def default_phrases(concept: Concept) -> tuple[str, str]:
    words = concept.label.replace("_", " ")
    if concept.kind is ConceptKind.ACTION:
        if concept.label in _ACTION_PHRASES:
            return _ACTION_PHRASES[concept.label]
        head, _, rest = words.partition(" ")
        return words, (_gerund(head) + (" " + rest if rest else ""))
    if concept.kind is ConceptKind.DIRECTION:
        return f"move {words}", f"moving {words}"
    return f"use their {words}", f"using their {words}"


@dataclass(frozen=True)
class ConceptVocabulary:
    """Registered labels per concept kind."""

    actions: tuple[str, ...] = ACTIONS
    directions: tuple[str, ...] = DIRECTIONS
    body_parts: tuple[str, ...] = BODY_PARTS
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for kind in ConceptKind:
            for label in self.labels(kind):
                index.setdefault(label, []).append(kind)
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_mapping(cls, m: Mapping[str, Iterable[str]]) -> "ConceptVocabulary":
        return cls(
            actions=tuple(m.get("actions", ACTIONS)),
            directions=tuple(m.get("directions", DIRECTIONS)),
            body_parts=tuple(m.get("body_parts", BODY_PARTS)),
        )

    def to_mapping(self) -> dict:
        return {
            "actions": list(self.actions),
            "directions": list(self.directions),
            "body_parts": list(self.body_parts),
        }

    def labels(self, kind: ConceptKind) -> tuple[str, ...]:
        return {
            ConceptKind.ACTION: self.actions,
            ConceptKind.DIRECTION: self.directions,
            ConceptKind.BODY_PART: self.body_parts,
        }[ConceptKind(kind)]

    def concepts(self, kind: ConceptKind) -> list[Concept]:
        return [Concept(ConceptKind(kind), lab) for lab in self.labels(kind)]

    def all_concepts(self) -> list[Concept]:
        return [c for kind in ConceptKind for c in self.concepts(kind)]

    def concept(self, kind: ConceptKind, label: str) -> Concept:
        kind = ConceptKind(kind)
        if label not in self.labels(kind):
            raise UnknownConcept(f"{label!r} is not a registered {kind.value} label")
        return Concept(kind, label)

    def resolve(self, label: str) -> Concept:
        """Find the unique kind whose vocabulary contains ``label``."""
        kinds = self._index.get(label, [])
        if not kinds:
            raise UnknownConcept(f"{label!r} is in no vocabulary")
        if len(kinds) > 1:
            names = ", ".join(k.value for k in kinds)
            raise AmbiguousConcept(f"{label!r} is registered under several kinds: {names}")
        return Concept(kinds[0], label)

    def __contains__(self, concept: Concept) -> bool:
        return concept.label in self.labels(concept.kind)
