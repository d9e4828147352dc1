"""Question/program/answer generation over annotated motions.

Questions are rendered from a small template grammar, labelled by the
symbolic oracle, and kept only when the oracle's answer is unique. The same
grammar is inverted by :func:`predict_program`, which stands in for a learned
program predictor; :func:`corrupt_program` injects controlled program noise.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import (
    ConfigError, IMoReError, MissingAttribute, QuotaUnreachable, SchemaError,
    UnparsableQuestion,
)
from .motion import MotionSequence
from .oracle import exec_filter, exec_relate, run as run_program, segment_attribute
from .program import (
    Filter, Program, Query, QuestionType, Relate, Relation, parse_program, to_text,
)
from .vocab import Concept, ConceptKind, ConceptVocabulary, default_phrases


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# -- templates -------------------------------------------------------------------

# per question type: (subject clause variants); relation words are appended
_QUESTION_STEMS = {
    QuestionType.QUERY_ACTION: (
        "What action does the person do",
        "Which action does the person perform",
    ),
    QuestionType.QUERY_DIRECTION: (
        "Which direction does the person move",
        "In which direction does the person move",
    ),
    QuestionType.QUERY_BODY_PART: (
        "What body part does the person use",
        "Which body part does the person move",
    ),
}
NUM_TEMPLATE_VARIANTS = 2


def render_question(
    question_type: QuestionType,
    relation: Optional[Relation],
    anchors: Sequence[Concept],
    variant: int = 0,
) -> str:
    """Fill the template for one grammar cell.

    ``variant`` picks one of the surface forms; the generator derives it from
    a hash of the example id.
    """
    qt = QuestionType(question_type)
    rel = Relation(relation) if relation is not None else None
    expected = rel.arity if rel is not None else 1
    if len(anchors) != expected:
        raise ValueError(f"{rel.value if rel else 'plain'} question needs {expected} anchor(s)")
    stem = _QUESTION_STEMS[qt][variant % NUM_TEMPLATE_VARIANTS]
    if rel is None:
        return f"{stem} while they {default_phrases(anchors[0])[0]}?"
    if rel is Relation.BETWEEN:
        a, b = (default_phrases(c)[1] for c in anchors)
        return f"{stem} between {a} and {b}?"
    return f"{stem} {rel.value} they {default_phrases(anchors[0])[0]}?"


def program_for(question_type, relation, anchors) -> Program:
    leaves = tuple(Filter(a) for a in anchors)
    child = leaves[0] if relation is None else Relate(Relation(relation), leaves)
    return Program.from_root(Query(QuestionType(question_type), child))


def program_cell(program: Program):
    """(question type, relation or None, anchor concepts) for a one-level program."""
    child = program.root.child
    if isinstance(child, Filter):
        return program.question_type, None, (child.concept,)
    if isinstance(child, Relate) and all(isinstance(a, Filter) for a in child.args):
        return program.question_type, child.relation, tuple(a.concept for a in child.args)
    raise ValueError(f"program outside the template grammar: {to_text(program)}")


# -- grammar predictor -------------------------------------------------------------

class ProgramPredictor:
    """Inverts :func:`render_question` by pattern matching."""

    def __init__(self, vocab: ConceptVocabulary | None = None):
        self.vocab = vocab or ConceptVocabulary()
        self.verb = {}
        self.gerund = {}
        for c in self.vocab.all_concepts():
            v, g = default_phrases(c)
            self.verb[v.lower()] = c
            self.gerund[g.lower()] = c
        self.patterns = []
        for qt, stems in _QUESTION_STEMS.items():
            for stem in stems:
                s = re.escape(stem.lower())
                self.patterns.append((re.compile(rf"^{s} (before|after) they (.+)\?$"), qt, "rel"))
                self.patterns.append((re.compile(rf"^{s} between (.+?) and (.+)\?$"), qt, "between"))
                self.patterns.append((re.compile(rf"^{s} while they (.+)\?$"), qt, "plain"))
        self._candidates = None

    def _match(self, question: str) -> Optional[Program]:
        q = " ".join(question.strip().lower().split())
        for pat, qt, form in self.patterns:
            m = pat.match(q)
            if not m:
                continue
            if form == "rel":
                c = self.verb.get(m.group(2))
                if c is not None:
                    return program_for(qt, Relation(m.group(1)), [c])
            elif form == "between":
                a, b = self.gerund.get(m.group(1)), self.gerund.get(m.group(2))
                if a is not None and b is not None:
                    return program_for(qt, Relation.BETWEEN, [a, b])
            else:
                c = self.verb.get(m.group(1))
                if c is not None:
                    return program_for(qt, None, [c])
        return None

    def _nearest(self, question: str) -> Program:
        if self._candidates is None:
            cands = {}
            concepts = self.vocab.all_concepts()
            for qt in QuestionType:
                for rel in (Relation.BEFORE, Relation.AFTER, None):
                    for c in concepts:
                        cands[render_question(qt, rel, [c]).lower()] = (qt, rel, (c,))
            self._candidates = cands
        q = question.strip().lower()
        best = difflib.get_close_matches(q, list(self._candidates), n=1, cutoff=0.0)
        qt, rel, anchors = self._candidates[best[0]]
        return program_for(qt, rel, anchors)

    def predict(self, question: str) -> Program:
        prog = self._match(question)
        if prog is None:
            raise UnparsableQuestion(
                f"no template matches {question!r}", fallback=self._nearest(question)
            )
        return prog


def predict_program(question: str, vocab: ConceptVocabulary | None = None) -> Program:
    return ProgramPredictor(vocab).predict(question)


# -- corruption -------------------------------------------------------------------------

_FLIP = {Relation.BEFORE: Relation.AFTER, Relation.AFTER: Relation.BEFORE}


def corrupt_with_stats(program: Program, rate: float, rng: random.Random, vocab: ConceptVocabulary):
    """Returns (program, perturbed step count, perturbable step count)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("corruption rate must be in [0, 1]")
    counts = [0, 0]

    def visit(node):
        if isinstance(node, Filter):
            counts[1] += 1
            if rng.random() < rate:
                others = [lab for lab in vocab.labels(node.concept.kind) if lab != node.concept.label]
                if others:
                    counts[0] += 1
                    return Filter(Concept(node.concept.kind, rng.choice(others)))
            return node
        if isinstance(node, Relate):
            args = tuple(visit(a) for a in node.args)
            counts[1] += 1
            if rng.random() < rate:
                counts[0] += 1
                if node.relation is Relation.BETWEEN:
                    return Relate(node.relation, args[::-1])
                return Relate(_FLIP[node.relation], args)
            return Relate(node.relation, args)
        return Query(node.question_type, visit(node.child))

    out = Program.from_root(visit(program.root))
    return out, counts[0], counts[1]


def corrupt_program(program: Program, rate: float, rng_seed, vocab: ConceptVocabulary | None = None) -> Program:
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    return corrupt_with_stats(program, rate, rng, vocab or ConceptVocabulary())[0]


# -- examples and manifests -------------------------------------------------------------

@dataclass(frozen=True)
class QAExample:
    id: str
    motion_id: str
    question: str
    question_type: QuestionType
    program: Program
    answer: Concept
    split: Split

    @property
    def relation(self) -> Optional[Relation]:
        child = self.program.root.child
        return child.relation if isinstance(child, Relate) else None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "motion_id": self.motion_id,
            "question": self.question,
            "question_type": self.question_type.value,
            "program": to_text(self.program),
            "answer": self.answer.label,
            "split": self.split.value,
        }

    @classmethod
    def from_record(cls, rec: dict, vocab: ConceptVocabulary) -> "QAExample":
        prog = parse_program(rec["program"], vocab)
        qt = QuestionType(rec.get("question_type") or prog.question_type)
        if qt is not prog.question_type:
            raise SchemaError(f"question_type {qt.value} disagrees with program root")
        return cls(
            id=str(rec["id"]),
            motion_id=str(rec["motion_id"]),
            question=rec["question"],
            question_type=qt,
            program=prog,
            answer=vocab.concept(qt.answer_kind, rec["answer"]),
            split=Split(rec["split"]),
        )


@dataclass
class DatasetManifest:
    examples: list[QAExample]
    vocab: ConceptVocabulary = field(default_factory=ConceptVocabulary)
    seed: Optional[int] = None
    config_hash: str = ""
    import_report: list = field(default_factory=list, compare=False)

    def split(self, split) -> list[QAExample]:
        s = Split(split)
        return [e for e in self.examples if e.split is s]

    @property
    def split_counts(self) -> dict:
        c = Counter(e.split.value for e in self.examples)
        return {s.value: c.get(s.value, 0) for s in Split}

    def cell_counts(self) -> dict:
        c = Counter((e.question_type.value, e.relation.value if e.relation else "none") for e in self.examples)
        return {f"{q}/{r}": n for (q, r), n in sorted(c.items())}

    def check_invariants(self, motions: dict | None = None) -> list[str]:
        """Violated invariants, as messages (empty when the manifest is sound)."""
        problems = []
        owner = {}
        for e in self.examples:
            if e.answer.kind is not e.question_type.answer_kind:
                problems.append(f"{e.id}: answer kind does not match question type")
            if e.program.question_type is not e.question_type:
                problems.append(f"{e.id}: program root disagrees with question type")
            prev = owner.setdefault(e.motion_id, e.split)
            if prev is not e.split:
                problems.append(f"motion {e.motion_id} appears in {prev.value} and {e.split.value}")
        train_answers = {e.answer for e in self.split(Split.TRAIN)}
        for ans in sorted({e.answer for e in self.examples}):
            if ans not in train_answers:
                problems.append(f"answer {ans.label!r} never occurs in train")
        if motions is not None:
            for e in self.examples:
                m = motions.get(e.motion_id)
                if m is None:
                    problems.append(f"{e.id}: motion {e.motion_id} missing")
                    continue
                res = run_program(m, e.program)
                if not res.ok or res.answer != e.answer:
                    problems.append(f"{e.id}: oracle gives {res.answer or res.error!s}, stored {e.answer.label}")
        return problems

    def meta(self) -> dict:
        return {
            "vocab": self.vocab.to_mapping(),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "split_counts": self.split_counts,
        }


def assign_split(motion_id: str, ratios=(0.7, 0.15, 0.15)) -> Split:
    u = (stable_hash(motion_id) % 1_000_000) / 1_000_000
    if u < ratios[0]:
        return Split.TRAIN
    if u < ratios[0] + ratios[1]:
        return Split.VAL
    return Split.TEST


@dataclass(frozen=True)
class DatasetConfig:
    per_type_quota: int = 12
    relations: tuple = (Relation.BEFORE, Relation.AFTER, Relation.BETWEEN)
    cell_quota: dict = field(default_factory=dict)  # "query_direction/between" -> n
    filter_kinds: tuple = tuple(ConceptKind)
    split_ratios: tuple = (0.7, 0.15, 0.15)
    max_per_motion: int = 4
    ambiguity_policy: str = "discard"
    strict: bool = False

    @classmethod
    def from_mapping(cls, m: dict) -> "DatasetConfig":
        m = dict(m)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(m) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        if "relations" in m:
            m["relations"] = tuple(Relation(r) if r is not None else None for r in m["relations"])
        if "filter_kinds" in m:
            m["filter_kinds"] = tuple(ConceptKind(k) for k in m["filter_kinds"])
        for k in ("split_ratios",):
            if k in m:
                m[k] = tuple(m[k])
        return cls(**m)

    def to_mapping(self) -> dict:
        return {
            "per_type_quota": self.per_type_quota,
            "relations": [r.value if r else None for r in self.relations],
            "cell_quota": dict(self.cell_quota),
            "filter_kinds": [k.value for k in self.filter_kinds],
            "split_ratios": list(self.split_ratios),
            "max_per_motion": self.max_per_motion,
            "ambiguity_policy": self.ambiguity_policy,
            "strict": self.strict,
        }

    def quotas(self) -> dict:
        """Target count per (question type, relation) cell."""
        out = {}
        rels = list(self.relations)
        for qt in QuestionType:
            base, extra = divmod(self.per_type_quota, len(rels))
            for i, rel in enumerate(rels):
                key = f"{qt.value}/{rel.value if rel else 'none'}"
                out[(qt, rel)] = int(self.cell_quota.get(key, base + (1 if i < extra else 0)))
        return out


def candidate_questions(motion: MotionSequence, config: DatasetConfig, vocab: ConceptVocabulary):
    """All (cell, anchors, answer) with a unique oracle answer on ``motion``.

    Programs are not materialized here; :func:`program_for` builds them for
    the chosen candidates and the generator re-checks each with the oracle.
    """
    anchors = set()
    for seg in motion.segments:
        anchors.add(seg.action)
        if seg.direction is not None:
            anchors.add(seg.direction)
        anchors.update(seg.body_parts)
    anchors = sorted(a for a in anchors if a.kind in config.filter_kinds and a in vocab)
    sets = {a: exec_filter(motion, a.kind, a) for a in anchors}
    out = []
    for rel in config.relations:
        if rel is Relation.BETWEEN:
            combos = [(a, b) for a in anchors for b in anchors if a != b]
        else:
            combos = [(a,) for a in anchors]
        for combo in combos:
            if rel is None:
                segs = sets[combo[0]]
            else:
                segs = exec_relate(motion, rel, *(sets[a] for a in combo))
            if len(segs) != 1:
                continue
            for qt in QuestionType:
                try:
                    ans = segment_attribute(motion, segs[0], qt)
                except MissingAttribute:
                    continue
                if ans in vocab:
                    out.append(((qt, rel), combo, ans))
    return out


def _candidate_key(item):
    mid, (cell, anchors, _) = item
    return (mid, cell[0].value, cell[1].value if cell[1] else "", tuple((a.kind.value, a.label) for a in anchors))


def generate_dataset(
    motions: Sequence[MotionSequence],
    rng_seed: int,
    config: DatasetConfig | None = None,
    vocab: ConceptVocabulary | None = None,
) -> DatasetManifest:
    """Sample questions until every grammar cell reaches its quota.

    Candidates whose oracle result is empty or ambiguous never enter the
    pool. Raises :class:`QuotaUnreachable` in strict mode when a cell cannot
    be filled; otherwise the shortfall is logged in ``import_report``.
    """
    config = config or DatasetConfig()
    vocab = vocab or ConceptVocabulary()
    rng = random.Random(rng_seed)
    quotas = config.quotas()
    for m in motions:
        if len(m.segments) < 2:
            raise ValueError(f"motion {m.id} has fewer than two segments")

    pool = {}  # motion id -> cell -> candidates
    for m in motions:
        by_cell = defaultdict(list)
        for cand in candidate_questions(m, config, vocab):
            by_cell[cand[0]].append(cand)
        pool[m.id] = by_cell
    split_of = {m.id: assign_split(m.id, config.split_ratios) for m in motions}

    order = [m.id for m in motions]
    rng.shuffle(order)
    need = dict(quotas)
    taken = defaultdict(int)
    chosen = []
    used = set()

    def pick(mid, allowed_answers=None):
        cells = [c for c, n in need.items() if n > 0 and pool[mid].get(c)]
        if not cells:
            return False
        cells.sort(key=lambda c: (-need[c], c[0].value, c[1].value if c[1] else ""))
        for cell in cells:
            opts = [x for x in pool[mid][cell] if (mid, x[0], x[1]) not in used
                    and (allowed_answers is None or x[2] in allowed_answers)]
            if opts:
                cand = opts[rng.randrange(len(opts))]
                used.add((mid, cand[0], cand[1]))
                chosen.append((mid, cand))
                need[cell] -= 1
                taken[mid] += 1
                return True
        return False

    progress = True
    while progress and any(n > 0 for n in need.values()):
        progress = False
        for mid in order:
            if taken[mid] < config.max_per_motion and pick(mid):
                progress = True

    # every answer seen outside train must also be seen in train
    def train_answers():
        return {c[2] for mid, c in chosen if split_of[mid] is Split.TRAIN}

    for _ in range(8):
        ta = train_answers()
        bad = [(mid, c) for mid, c in chosen if split_of[mid] is not Split.TRAIN and c[2] not in ta]
        if not bad:
            break
        for mid, c in bad:
            chosen.remove((mid, c))
            need[c[0]] += 1
            taken[mid] -= 1
        progress = True
        while progress and any(n > 0 for n in need.values()):
            progress = False
            for mid in order:
                allowed = None if split_of[mid] is Split.TRAIN else train_answers()
                if taken[mid] < config.max_per_motion and pick(mid, allowed):
                    progress = True

    shortfall = {f"{q.value}/{r.value if r else 'none'}": n for (q, r), n in need.items() if n > 0}
    achieved = {f"{q.value}/{r.value if r else 'none'}": quotas[(q, r)] - n for (q, r), n in need.items()}
    if shortfall and config.strict:
        raise QuotaUnreachable(f"could not fill cells {shortfall}", achieved=achieved)

    motion_by_id = {m.id: m for m in motions}
    examples = []
    per_motion = defaultdict(int)
    for mid, (cell, anchors, answer) in sorted(chosen, key=_candidate_key):
        prog = program_for(cell[0], cell[1], anchors)
        res = run_program(motion_by_id[mid], prog)
        if not res.ok or res.answer != answer:  # pragma: no cover - internal consistency
            raise AssertionError(f"oracle disagrees on {to_text(prog)} over {mid}")
        k = per_motion[mid]
        per_motion[mid] += 1
        ex_id = f"{mid}-q{k}"
        variant = stable_hash(ex_id) % NUM_TEMPLATE_VARIANTS
        examples.append(QAExample(
            id=ex_id, motion_id=mid,
            question=render_question(cell[0], cell[1], anchors, variant),
            question_type=cell[0], program=prog, answer=answer, split=split_of[mid],
        ))
    manifest = DatasetManifest(
        examples, vocab, rng_seed,
        config_hash(dict(config.to_mapping(), vocab=vocab.to_mapping(), seed=rng_seed,
                         motions=sorted(m.id for m in motions))),
    )
    if shortfall:
        manifest.import_report.append({"shortfall": shortfall, "achieved": achieved})
    return manifest


# -- files ------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> Path:
    """JSON-lines question file at ``path``; metadata at ``path`` + '.meta.json'."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.examples:
            f.write(json.dumps(e.to_record(), ensure_ascii=False) + "\n")
    Path(str(path) + ".meta.json").write_text(json.dumps(manifest.meta(), indent=1))
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    vocab = ConceptVocabulary.from_mapping(meta.get("vocab", {}))
    examples = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            examples.append(QAExample.from_record(json.loads(line), vocab))
        except (KeyError, ValueError, IMoReError) as exc:
            raise SchemaError(f"{path}:{n}: {exc}") from exc
    return DatasetManifest(examples, vocab, meta.get("seed"), meta.get("config_hash", ""))


EXTERNAL_FIELDS = ("motion_ref", "question", "program_text", "answer", "split")


def export_external(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for e in manifest.examples:
            f.write(json.dumps({
                "id": e.id, "motion_ref": e.motion_id, "question": e.question,
                "program_text": to_text(e.program), "answer": e.answer.label,
                "split": e.split.value,
            }, ensure_ascii=False) + "\n")
    return path


def import_external(path, schema: str = "babelqa_like", vocab: ConceptVocabulary | None = None) -> DatasetManifest:
    """Read a JSON-lines file of ``{motion_ref, question, program_text, answer, split}``.

    Records that fail validation are skipped and listed in ``import_report``.
    A file that is not JSON lines at all raises :class:`SchemaError`.
    """
    if schema != "babelqa_like":
        raise SchemaError(f"unknown schema {schema!r}")
    vocab = vocab or ConceptVocabulary()
    text = Path(path).read_text(encoding="utf-8")
    examples, report = [], []
    counters = defaultdict(int)
    parsed_any = False
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            if not parsed_any and not examples:
                raise SchemaError(f"{path}:{n}: not a JSON record ({exc.msg})") from exc
            report.append({"line": n, "reason": f"invalid JSON: {exc.msg}"})
            continue
        parsed_any = True
        if not isinstance(rec, dict):
            report.append({"line": n, "reason": "record is not an object"})
            continue
        missing = [k for k in EXTERNAL_FIELDS if k not in rec]
        if missing:
            report.append({"line": n, "reason": f"missing fields {missing}"})
            continue
        try:
            prog = parse_program(rec["program_text"], vocab)
            qt = prog.question_type
            answer = vocab.concept(qt.answer_kind, rec["answer"])
            split = Split(rec["split"])
        except (IMoReError, ValueError) as exc:
            report.append({"line": n, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        mid = str(rec["motion_ref"])
        ex_id = str(rec.get("id") or f"{mid}-x{counters[mid]}")
        counters[mid] += 1
        examples.append(QAExample(ex_id, mid, rec["question"], qt, prog, answer, split))
    manifest = DatasetManifest(examples, vocab, None, config_hash([e.to_record() for e in examples]))
    manifest.import_report = report
    return manifest


# -- tokenizer ------------------------------------------------------------------------

_WORD = re.compile(r"\w+|[^\w\s]")
PAD, UNK = "<pad>", "<unk>"


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Tokenizer:
    itos: list[str]

    def __post_init__(self):
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls([PAD, UNK] + words)

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in tokenize(text)] or [unk]

    def __len__(self):
        return len(self.itos)
