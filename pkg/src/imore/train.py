"""Training, evaluation, ablations and the explicit-execution baseline."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import random
import re
import statistics
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import diff
from .dataset import (
    DatasetManifest, QAExample, Split, Tokenizer, config_hash, corrupt_program, ProgramPredictor,
)
from .errors import ConfigError, DivergenceError, MissingMotion, UnparsableQuestion
from .model import FINAL, QTYPE_PHRASES, IMoRe, ModelConfig, infer_mode_II, mode_one_windows, sample_windows
from .motion import MotionSequence, can_mirror, mirror_concept, mirror_motion
from .oracle import run as run_program
from .program import Filter, Program, Query, QuestionType, Relate, Relation
from .vocab import ConceptVocabulary

log = logging.getLogger(__name__)

RELATION_COLUMNS = ("All", "Before", "After", "Between")
# Feature-selection ablation reported in the original work (overall accuracy).
PAPER_ABLATION_REFERENCE = {"NoFeatureSelection": 0.607, "Full": 0.640}


class Variant(str, Enum):
    FULL = "Full"
    NO_FEATURE_SELECTION = "NoFeatureSelection"
    MAC_CONTROL = "MacControl"
    EXPLICIT_ORACLE = "ExplicitOracle"


PRESETS = {
    "desk": dict(lr=3e-4, weight_decay=1e-4, batch_size=16, epochs=60, dropout=0.1),
    "paper": dict(lr=1e-6, weight_decay=1e-4, batch_size=4, epochs=100, dropout=0.1),
    # fits the 20-minute single-core budget on the 8-action learning-sanity dataset
    "laptop": dict(lr=1e-3, weight_decay=1e-4, batch_size=16, epochs=24, dropout=0.1, trace_supervision=1.0,
                   perception_supervision=1.0, augment=True, lr_schedule="cosine", model={"heads": 4}),
}


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    precision: str = "float32"
    mode: str = "I"
    corruption_rate: float = 0.0
    ablation_variant: Variant = Variant.FULL
    dropout: float = 0.1
    grad_clip: float = 1.0
    mode_II_runs: int = 5
    # weight of the auxiliary loss pulling each step's pool read onto the segments the
    # symbolic executor selects for that step (train-split annotations); 0 = answers only
    trace_supervision: float = 0.0
    # weight of an auxiliary per-token loss predicting the annotated action, direction and
    # body parts under each encoder token (train-split annotations); 0 = off
    perception_supervision: float = 0.0
    augment: bool = False  # random left/right mirror, limb-scale jitter and joint noise
    lr_schedule: str = "constant"  # "constant" | "cosine" (5% linear warmup, cosine decay to 0)
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def __post_init__(self):
        self.ablation_variant = Variant(self.ablation_variant)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("corruption_rate must be in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.mode not in ("I", "II"):
            raise ConfigError(f"mode must be I or II, got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.trace_supervision < 0 or self.perception_supervision < 0:
            raise ConfigError("trace_supervision and perception_supervision must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @classmethod
    def from_mapping(cls, m: dict) -> "TrainConfig":
        m = dict(m)
        unknown = set(m) - set(cls.__dataclass_fields__) - {"preset"}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        ModelConfig.from_mapping(m.get("model", {}))  # validate early
        preset = m.pop("preset", None)
        return cls.preset(preset, **m) if preset else cls(**m)

    def to_mapping(self) -> dict:
        m = asdict(self)
        m["ablation_variant"] = self.ablation_variant.value
        return m

    def model_config(self) -> ModelConfig:
        over = dict(self.model)
        over.setdefault("dropout", self.dropout)
        if self.ablation_variant is Variant.NO_FEATURE_SELECTION:
            over["level_ids"] = ("final",)
        elif self.ablation_variant is Variant.MAC_CONTROL:
            over["control"] = "mac"
        return ModelConfig.from_mapping(over)

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32


# -- data plumbing ----------------------------------------------------------------------


def _motion(motions: dict, ex: QAExample) -> MotionSequence:
    m = motions.get(ex.motion_id)
    if m is None:
        raise MissingMotion(f"example {ex.id} references missing motion {ex.motion_id}")
    return m


class WindowCache:
    """Mode-I windows per motion, computed once."""

    def __init__(self, motions: dict, W: int):
        self.motions, self.W = motions, W
        self._cache = {}

    def __call__(self, motion_id: str):
        if motion_id not in self._cache:
            self._cache[motion_id] = mode_one_windows(self.motions[motion_id].frames, self.W)
        return self._cache[motion_id]


def build_tokenizer(manifest: DatasetManifest) -> Tokenizer:
    """Vocabulary from train-split questions plus the question-type phrases."""
    texts = [e.question for e in manifest.split(Split.TRAIN)]
    return Tokenizer.build(texts + list(QTYPE_PHRASES.values()))


def resolve_programs(examples: Sequence[QAExample], source: str, seed: int, vocab: ConceptVocabulary) -> list[Program]:
    """Programs fed to the reasoner: ``gold``, ``predicted`` or ``corrupted:RATE``."""
    kind, rate = parse_program_source(source)
    if kind == "gold":
        return [e.program for e in examples]
    if kind == "predicted":
        pred = ProgramPredictor(vocab)
        out = []
        for e in examples:
            try:
                out.append(pred.predict(e.question))
            except UnparsableQuestion as exc:
                out.append(exc.fallback)
        return out
    return [corrupt_program(e.program, rate, f"{seed}:{e.id}", vocab) for e in examples]


def parse_program_source(source: str):
    if source in ("gold", "predicted"):
        return source, 0.0
    if source.startswith("corrupted"):
        _, _, r = source.partition(":")
        try:
            rate = float(r) if r else 0.1
        except ValueError:
            raise ConfigError(f"bad corruption rate in {source!r}") from None
        if not 0.0 <= rate <= 1.0:
            raise ConfigError("corruption rate must be in [0, 1]")
        return "corrupted", rate
    raise ConfigError(f"program source must be gold, predicted or corrupted:RATE, got {source!r}")


# -- training ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: IMoRe
    config: TrainConfig
    curve: list  # one dict per epoch
    best_epoch: int
    best_val: float
    config_hash: str

    def write_curve(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "train_acc", "val_acc"])
            w.writeheader()
            for row in self.curve:
                w.writerow(row)
        return path


def train_hash(manifest: DatasetManifest, config: TrainConfig) -> str:
    return config_hash({"train": config.to_mapping(), "model": config.model_config().to_mapping(),
                        "data": manifest.config_hash or config_hash([e.id for e in manifest.examples])})


def _items(model, cache, examples, programs, mode, rng):
    items = []
    for e, prog in zip(examples, programs):
        if mode == "II":
            (w, s), = sample_windows(cache.motions[e.motion_id].frames, model.cfg.window, 1, rng)
        else:
            w, s = cache(e.motion_id)
        items.append((w, s, e.question, prog))
    return items


def step_targets(motion: MotionSequence, program: Program) -> list:
    """Per program step, the segment indices its pool read should cover (None when unusable).

    Filter/relate steps target their own output set; a query step targets the set it reads.
    """
    res = run_program(motion, program)
    outs = [t.output if t.error is None else None for t in res.trace]
    targets = []
    for step in program.steps:
        out = outs[step.index] if step.index < len(outs) else None
        if isinstance(out, tuple):
            targets.append(out or None)
        elif step.deps and step.deps[0] < len(outs) and isinstance(outs[step.deps[0]], tuple):
            targets.append(outs[step.deps[0]] or None)
        else:
            targets.append(None)
    return targets


def segment_index(motion: MotionSequence) -> np.ndarray:
    seg = np.full(motion.num_frames, -1)
    for k, s in enumerate(motion.segments):
        seg[s.start_frame:s.end_frame] = k
    return seg


def pool_frames(model: IMoRe, batch, lengths: Sequence[int]) -> list[np.ndarray]:
    """Source frame (patch centre) of every pool position within one level, per example."""
    P, Np = model.cfg.patch, model.cfg.window // model.cfg.patch
    G = len(model.motion_encoder.groups)
    centre = np.arange(Np) * P + P // 2
    starts = batch.starts.numpy()
    out = [[] for _ in lengths]
    for s0, b in zip(starts, batch.window_owner):
        # loop padding repeats the clip, so frame k of a padded clip is k mod T
        out[b].append(np.tile((s0 + centre) % lengths[b], G))
    return [np.concatenate(x) for x in out]


def trace_loss(model: IMoRe, batch, motions_of: Sequence[MotionSequence], targets: Sequence[list]) -> torch.Tensor:
    """Mean -log(read mass on the executor's segments) over supervisable steps."""
    read_ws, pool_mask, _ = model.last_reads
    M = len(model.cfg.level_ids)
    npos = pool_mask.shape[1] // M
    frames = pool_frames(model, batch, [m.num_frames for m in motions_of])
    terms = []
    for b, (m, tg) in enumerate(zip(motions_of, targets)):
        seg = segment_index(m)[frames[b]]
        for i, t in enumerate(tg):
            if t is None:
                continue
            hit = np.zeros(npos, dtype=bool)
            hit[: len(seg)] = np.isin(seg, t)
            if not hit.any():
                continue
            w = read_ws[i][b].view(M, npos)
            mass = w[:, torch.from_numpy(hit)].sum()
            terms.append(-torch.log(mass + 1e-6))
    if not terms:
        return torch.zeros((), dtype=read_ws[0].dtype)
    return torch.stack(terms).mean()


class PerceptionProbe(torch.nn.Module):
    """Linear read-outs of segment attributes from last-level encoder tokens (training only)."""

    def __init__(self, d: int, vocab: ConceptVocabulary):
        super().__init__()
        self.vocab = vocab
        self.action = torch.nn.Linear(d, len(vocab.actions))
        self.direction = torch.nn.Linear(d, len(vocab.directions) + 1)  # last class = no direction
        self.body = torch.nn.Linear(d, len(vocab.body_parts))

    def labels(self, motion: MotionSequence):
        """Per-frame (action, direction, body-part multi-hot); action -1 where unannotated."""
        T = motion.num_frames
        act = np.full(T, -1)
        dirn = np.full(T, len(self.vocab.directions))
        body = np.zeros((T, len(self.vocab.body_parts)), np.float32)
        for s in motion.segments:
            sl = slice(s.start_frame, s.end_frame)
            act[sl] = self.vocab.actions.index(s.action.label)
            if s.direction is not None:
                dirn[sl] = self.vocab.directions.index(s.direction.label)
            for b in s.body_parts:
                body[sl, self.vocab.body_parts.index(b.label)] = 1
        return act, dirn, body


def perception_loss(model: IMoRe, probe: PerceptionProbe, batch, motions_of: Sequence[MotionSequence], label_cache) -> torch.Tensor:
    tokens = model.last_encoded  # (Nw, G * Np, d)
    P, Np = model.cfg.patch, model.cfg.window // model.cfg.patch
    G = len(model.motion_encoder.groups)
    centre = np.arange(Np) * P + P // 2
    acts, dirs, bodies = [], [], []
    for w, (s0, b) in enumerate(zip(batch.starts.numpy(), batch.window_owner)):
        m = motions_of[b]
        # mirrored copies share their source's id, so key on the object (both stay alive in train())
        if id(m) not in label_cache:
            label_cache[id(m)] = probe.labels(m)
        act, dirn, body = label_cache[id(m)]
        f = np.tile((s0 + centre) % m.num_frames, G)
        acts.append(act[f])
        dirs.append(dirn[f])
        bodies.append(body[f])
    act = torch.from_numpy(np.concatenate(acts))
    dirn = torch.from_numpy(np.concatenate(dirs))
    body = torch.from_numpy(np.concatenate(bodies)).to(tokens.dtype)
    x = tokens.reshape(-1, tokens.shape[-1])
    keep = act >= 0
    if not keep.any():
        return torch.zeros((), dtype=tokens.dtype)
    x, act, dirn, body = x[keep], act[keep], dirn[keep], body[keep]
    F = torch.nn.functional
    return (F.cross_entropy(probe.action(x), act) + F.cross_entropy(probe.direction(x), dirn)
            + F.binary_cross_entropy_with_logits(probe.body(x), body))


def lr_at(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "constant" or total <= 0:
        return config.lr
    warm = max(1, total // 20)
    if step < warm:
        return config.lr * (step + 1) / warm
    return config.lr * 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))


_SIDE = re.compile(r"(?<![A-Za-z])(left|right|Left|Right)(?![A-Za-z])")


def mirror_question(q: str) -> str:
    swap = {"left": "right", "right": "left", "Left": "Right", "Right": "Left"}
    return _SIDE.sub(lambda m: swap[m.group(1)], q)


def mirror_program(program: Program) -> Program:
    def walk(n):
        if isinstance(n, Filter):
            return Filter(mirror_concept(n.concept))
        if isinstance(n, Relate):
            return Relate(n.relation, tuple(walk(a) for a in n.args))
        return Query(n.question_type, walk(n.child))
    return Program.from_root(walk(program.root))


def jitter(frames: np.ndarray, rng: np.random.Generator, scale=0.1, noise=0.01) -> np.ndarray:
    """Scale limb offsets about the root and add joint noise."""
    root = frames[:, :1]
    out = root + (frames - root) * rng.uniform(1 - scale, 1 + scale) + rng.normal(0, noise, frames.shape)
    return out.astype(np.float32)


def batch_accuracy(model: IMoRe, examples, programs, cache, batch_size=64) -> float:
    if not examples:
        return float("nan")
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            ex, pr = examples[i:i + batch_size], programs[i:i + batch_size]
            logits, _ = model.forward_batch(model.make_batch(_items(model, cache, ex, pr, "I", None)))
            correct += sum(model.answer_of(lg) == e.answer for lg, e in zip(logits, ex))
    return correct / len(examples)


def train(manifest: DatasetManifest, motions: dict, config: TrainConfig | None = None) -> TrainResult:
    """Fit an IMoRe model on the train split; the best-validation epoch is kept."""
    config = config or TrainConfig()
    if config.ablation_variant is Variant.EXPLICIT_ORACLE:
        raise ConfigError("the explicit oracle has no parameters to train; use explicit_baseline()")
    train_ex = manifest.split(Split.TRAIN)
    if not train_ex:
        raise ConfigError("manifest has an empty train split")
    val_ex = manifest.split(Split.VAL)
    for e in train_ex + val_ex:
        _motion(motions, e)
    vocab = manifest.vocab
    mcfg = config.model_config()
    model = IMoRe(mcfg, vocab, build_tokenizer(manifest), seed=config.seed).to(config.dtype)
    trainable = model
    probe, label_cache = None, {}
    if config.perception_supervision:
        probe = PerceptionProbe(mcfg.d, vocab).to(config.dtype)
        trainable = torch.nn.ModuleDict({"model": model, "probe": probe})
    registry = diff.ParamRegistry.from_module(trainable)
    opt = diff.AdamW(registry, lr=config.lr, weight_decay=config.weight_decay)
    cache = WindowCache(motions, mcfg.window)
    rng = random.Random(config.seed)
    np_rng = np.random.default_rng(config.seed)
    val_programs = [e.program for e in val_ex]

    target_cache = {}

    def targets_for(e, prog):
        key = (e.id, str(prog))
        if key not in target_cache:
            target_cache[key] = step_targets(motions[e.motion_id], prog)
        return target_cache[key]

    mirror_cache = {}

    def mirrored(m):
        if m.id not in mirror_cache:
            mirror_cache[m.id] = mirror_motion(m)
        return mirror_cache[m.id]

    steps_per_epoch = -(-len(train_ex) // config.batch_size)
    total_steps, step = steps_per_epoch * config.epochs, 0
    curve = []
    best_val, best_epoch, best_state = -1.0, -1, None
    for epoch in range(config.epochs):
        model.train()
        order = list(train_ex)
        rng.shuffle(order)
        total, correct = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            ex = order[i:i + config.batch_size]
            progs = [e.program for e in ex]
            if config.corruption_rate > 0:
                progs = [corrupt_program(p, config.corruption_rate, rng, vocab) for p in progs]
            if config.augment:
                items, answers, mots, targets = [], [], [], []
                for e, prog in zip(ex, progs):
                    m, q, ans = motions[e.motion_id], e.question, e.answer
                    tg = targets_for(e, prog) if config.trace_supervision else None
                    if rng.random() < 0.5 and can_mirror(m):
                        # segment timing is unchanged, so the step targets carry over
                        m, q, prog, ans = mirrored(m), mirror_question(q), mirror_program(prog), mirror_concept(ans)
                    f = jitter(m.frames, np_rng)
                    if config.mode == "II":
                        (w, s), = sample_windows(f, mcfg.window, 1, np_rng)
                    else:
                        w, s = mode_one_windows(f, mcfg.window)
                    items.append((w, s, q, prog))
                    answers.append(ans)
                    mots.append(m)
                    targets.append(tg)
                batch = model.make_batch(items)
            else:
                batch = model.make_batch(_items(model, cache, ex, progs, config.mode, np_rng))
                answers = [e.answer for e in ex]
                mots = [motions[e.motion_id] for e in ex]
                targets = [targets_for(e, p) for e, p in zip(ex, progs)] if config.trace_supervision else None
            opt.lr = lr_at(config, step, total_steps)
            step += 1
            logits, _ = model.forward_batch(batch)
            loss = model.loss(logits, answers)
            if config.trace_supervision:
                loss = loss + config.trace_supervision * trace_loss(model, batch, mots, targets)
            if probe is not None:
                loss = loss + config.perception_supervision * perception_loss(model, probe, batch, mots, label_cache)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}",
                    dump={"epoch": epoch, "batch": i // config.batch_size, "loss": float(loss.detach()),
                          "examples": [e.id for e in ex], "lr": config.lr,
                          "param_norms": {n: float(p.detach().norm()) for n, p in registry}},
                )
            for p in trainable.parameters():
                p.grad = None
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(trainable.parameters(), config.grad_clip)
            opt.step()
            total += float(loss.detach()) * len(ex)
            correct += sum(model.answer_of(lg) == a for lg, a in zip(logits, answers))
        val_acc = batch_accuracy(model, val_ex, val_programs, cache) if val_ex else float("nan")
        row = {"epoch": epoch, "train_loss": total / len(order), "train_acc": correct / len(order),
               "val_acc": val_acc}
        curve.append(row)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, row["train_loss"], row["train_acc"], val_acc)
        score = val_acc if val_ex else row["train_acc"]
        if score > best_val:
            best_val, best_epoch = score, epoch
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, config, curve, best_epoch, best_val, train_hash(manifest, config))


# -- checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, model: IMoRe, config: TrainConfig | None = None, extra: dict | None = None) -> Path:
    meta = {
        "model_config": model.cfg.to_mapping(),
        "vocab": model.vocab.to_mapping(),
        "tokens": model.tokenizer.itos,
        "train_config": config.to_mapping() if config else None,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        **(extra or {}),
    }
    return diff.save_tensors(path, dict(model.state_dict()), meta)


def load_checkpoint(path):
    """Returns (model in eval mode, checkpoint metadata)."""
    tensors, meta = diff.load_tensors(path)
    model = IMoRe(
        ModelConfig.from_mapping(meta["model_config"]),
        ConceptVocabulary.from_mapping(meta["vocab"]),
        Tokenizer(list(meta["tokens"])),
    )
    model = model.to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    n: int
    grid: dict  # question type -> column -> accuracy or None (N/A)
    counts: dict  # question type -> column -> example count
    confusion: dict  # question type -> {"labels": [...], "matrix": [[...]]}
    majority_baseline: float
    config_hash: str
    seed: int
    split: str
    mode: str
    program_source: str
    predictions: dict = field(default_factory=dict)  # example id -> predicted label or None

    def accuracy_from_confusion(self) -> float:
        right = total = 0
        for c in self.confusion.values():
            m = np.asarray(c["matrix"], dtype=np.int64)
            right += int(np.trace(m)) if m.size else 0
            total += int(m.sum()) + c.get("unanswered", 0)
        return right / total if total else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        """Flat table: one row, question types x {All, Before, After, Between}, then Overall."""
        head, vals = [], []
        for qt in QuestionType:
            for col in RELATION_COLUMNS:
                head.append(f"{qt.value}:{col}")
                v = self.grid.get(qt.value, {}).get(col)
                vals.append("N/A" if v is None else f"{v:.3f}")
        head.append("Overall")
        vals.append(f"{self.accuracy:.3f}")
        return "\t".join(head) + "\n" + "\t".join(vals) + "\n"


def _majority_baseline(manifest: DatasetManifest, examples) -> float:
    """Accuracy of always answering the most frequent train answer of the question type."""
    if not examples:
        return float("nan")
    by_type = defaultdict(Counter)
    for e in manifest.split(Split.TRAIN):
        by_type[e.question_type][e.answer] += 1
    right = 0
    for e in examples:
        c = by_type.get(e.question_type)
        if c:
            top = sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            right += top == e.answer
    return right / len(examples)


def build_report(manifest, examples, predicted: list, *, hash_, seed, split, mode, source) -> EvalReport:
    """``predicted``: one Concept (or None when no answer) per example."""
    vocab = manifest.vocab
    right = defaultdict(lambda: defaultdict(int))
    count = defaultdict(lambda: defaultdict(int))
    conf = {}
    for qt in QuestionType:
        labels = list(vocab.labels(qt.answer_kind))
        conf[qt.value] = {"labels": labels, "matrix": [[0] * len(labels) for _ in labels], "unanswered": 0}
    for e, p in zip(examples, predicted):
        q = e.question_type.value
        cols = ["All"] + ([e.relation.value.capitalize()] if e.relation else [])
        ok = p == e.answer
        for col in cols:
            count[q][col] += 1
            right[q][col] += ok
        c = conf[q]
        if p is None or p.kind is not e.question_type.answer_kind:
            c["unanswered"] += 1
        else:
            c["matrix"][c["labels"].index(e.answer.label)][c["labels"].index(p.label)] += 1
    grid, counts = {}, {}
    for qt in QuestionType:
        q = qt.value
        grid[q] = {col: (right[q][col] / count[q][col] if count[q][col] else None) for col in RELATION_COLUMNS}
        counts[q] = {col: count[q][col] for col in RELATION_COLUMNS}
    n = len(examples)
    acc = sum(p == e.answer for e, p in zip(examples, predicted)) / n
    return EvalReport(
        accuracy=acc, n=n, grid=grid, counts=counts, confusion=conf,
        majority_baseline=_majority_baseline(manifest, examples),
        config_hash=hash_, seed=seed, split=split, mode=mode, program_source=source,
        predictions={e.id: (p.label if p is not None else None) for e, p in zip(examples, predicted)},
    )


def evaluate(model: IMoRe, manifest: DatasetManifest, motions: dict, split="test", mode: str = "I",
             program_source: str = "gold", seed: int = 0, runs: int = 5, workers: int = 1,
             batch_size: int = 64, hash_: str = "") -> EvalReport:
    """Accuracy on one split, broken down by question type and relation."""
    split = Split(split).value
    examples = manifest.split(split)
    if not examples:
        raise ConfigError(f"split {split!r} is empty")
    if mode not in ("I", "II"):
        raise ConfigError(f"mode must be I or II, got {mode!r}")
    for e in examples:
        _motion(motions, e)
    programs = resolve_programs(examples, program_source, seed, manifest.vocab)
    model.eval()
    cache = WindowCache(motions, model.cfg.window)

    def chunk(lo, hi):
        out = []
        with torch.no_grad():
            if mode == "I":
                for i in range(lo, hi, batch_size):
                    j = min(i + batch_size, hi)
                    b = model.make_batch(_items(model, cache, examples[i:j], programs[i:j], "I", None))
                    out.extend(model.answer_of(lg) for lg in model.forward_batch(b)[0])
            else:
                for e, prog in zip(examples[lo:hi], programs[lo:hi]):
                    lg = infer_mode_II(model, motions[e.motion_id].frames, e.question, prog, runs=runs,
                                       seed=_example_seed(seed, e.id))
                    out.append(model.answer_of(lg))
        return out

    bounds = np.linspace(0, len(examples), max(1, workers) + 1).astype(int)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda ab: chunk(*ab), zip(bounds[:-1], bounds[1:])))
    else:
        parts = [chunk(0, len(examples))]
    predicted = [p for part in parts for p in part]
    return build_report(manifest, examples, predicted, hash_=hash_, seed=seed, split=split, mode=mode,
                        source=program_source)


def _example_seed(seed: int, ex_id: str) -> int:
    from .dataset import stable_hash
    return stable_hash(f"{seed}:{ex_id}") % (2 ** 32)


def explicit_baseline(manifest: DatasetManifest, motions: dict, split="test", program_source: str = "gold",
                      seed: int = 0) -> EvalReport:
    """Symbolic execution over the gold annotations; failed executions count as wrong."""
    split = Split(split).value
    examples = manifest.split(split)
    if not examples:
        raise ConfigError(f"split {split!r} is empty")
    programs = resolve_programs(examples, program_source, seed, manifest.vocab)
    predicted = [run_program(_motion(motions, e), p).answer for e, p in zip(examples, programs)]
    return build_report(manifest, examples, predicted, hash_=config_hash({"explicit": manifest.config_hash}),
                        seed=seed, split=split, mode="explicit", source=program_source)


# -- experiments -----------------------------------------------------------------------------


@dataclass
class AblationTable:
    seeds: list
    accuracy: dict  # variant -> per-seed accuracies
    params: dict  # variant -> parameter count
    reference: dict = field(default_factory=lambda: dict(PAPER_ABLATION_REFERENCE))

    def median(self, variant) -> float:
        return statistics.median(self.accuracy[Variant(variant).value])

    def to_text(self) -> str:
        lines = ["variant\tmedian\tper_seed\tparams"]
        for v, accs in self.accuracy.items():
            lines.append(f"{v}\t{statistics.median(accs):.4f}\t{','.join(f'{a:.4f}' for a in accs)}\t{self.params[v]}")
        return "\n".join(lines) + "\n"


def run_ablation(manifest: DatasetManifest, motions: dict, seeds: Sequence[int],
                 base: TrainConfig | None = None,
                 variants=(Variant.FULL, Variant.NO_FEATURE_SELECTION, Variant.MAC_CONTROL),
                 split="test") -> AblationTable:
    if len(seeds) < 3:
        raise ConfigError("ablations need at least three seeds")
    base = base or TrainConfig()
    acc, params = {}, {}
    for v in variants:
        v = Variant(v)
        acc[v.value] = []
        for s in seeds:
            cfg = TrainConfig(**{**base.to_mapping(), "seed": s, "ablation_variant": v})
            if v is Variant.EXPLICIT_ORACLE:
                rep = explicit_baseline(manifest, motions, split, seed=s)
                params[v.value] = 0
            else:
                res = train(manifest, motions, cfg)
                rep = evaluate(res.model, manifest, motions, split, mode=cfg.mode, seed=s, runs=cfg.mode_II_runs)
                params[v.value] = sum(p.numel() for p in res.model.parameters())
            acc[v.value].append(rep.accuracy)
            log.info("ablation %s seed %d: %.4f", v.value, s, rep.accuracy)
    return AblationTable(list(seeds), acc, params)


@dataclass
class RobustnessResult:
    rate: float
    neural_gold: list
    neural_corrupted: list
    symbolic_gold: float
    symbolic_corrupted: list

    @property
    def neural_drop(self) -> float:
        return statistics.median(g - c for g, c in zip(self.neural_gold, self.neural_corrupted))

    @property
    def symbolic_drop(self) -> float:
        return self.symbolic_gold - statistics.median(self.symbolic_corrupted)


def robustness(models: Sequence[IMoRe], manifest: DatasetManifest, motions: dict, seeds: Sequence[int],
               rate: float = 0.1, split="test") -> RobustnessResult:
    """Accuracy drop under program corruption, neural (one model per seed) vs symbolic."""
    src = f"corrupted:{rate}"
    ng, nc, sc = [], [], []
    for model, s in zip(models, seeds):
        ng.append(evaluate(model, manifest, motions, split, program_source="gold", seed=s).accuracy)
        nc.append(evaluate(model, manifest, motions, split, program_source=src, seed=s).accuracy)
        sc.append(explicit_baseline(manifest, motions, split, program_source=src, seed=s).accuracy)
    sg = explicit_baseline(manifest, motions, split).accuracy
    return RobustnessResult(rate, ng, nc, sg, sc)


# -- traces and gradient check -----------------------------------------------------------


def trace_example(model: IMoRe, ex: QAExample, motion: MotionSequence, program: Program | None = None) -> dict:
    """Mode-I forward with every attention map, as plain JSON-able data."""
    prog = program or ex.program
    wins, starts = mode_one_windows(motion.frames, model.cfg.window)
    model.eval()
    with torch.no_grad():
        logits, traces = model.forward_batch(model.make_batch([(wins, starts, ex.question, prog)]), keep_trace=True)
    tr = traces[0]
    P = model.cfg.patch
    Np = model.cfg.window // P
    positions = []
    for w, s in enumerate(starts):
        for g in range(len(model.motion_encoder.groups)):
            for j in range(Np):
                positions.append({"window": w, "group": g, "frames": [s + j * P, s + (j + 1) * P]})
    ans = model.answer_of(logits[0])
    return {
        "example_id": ex.id,
        "question": ex.question,
        "program": [st.op + (f"({st.concept.label})" if st.concept else "") for st in prog.steps],
        "answer": ans.label,
        "gold": ex.answer.label,
        "logits": logits[0].logits.tolist(),
        "level_ids": tr.level_ids,
        "positions": positions,
        "segments": [s.to_dict() for s in motion.segments],
        "steps": [asdict(s) for s in tr.steps],
    }


def end_to_end_grad_check(d: int = 16, levels: int = 3, steps: int = 4, seed: int = 0, tol: float = 1e-4,
                          max_coords: int = 8) -> diff.GradCheckReport:
    """Finite-difference check of the full loss in 64-bit on a tiny model and batch."""
    from .dataset import generate_dataset, DatasetConfig
    from .motion import MotionConfig, generate_sequence
    if levels < 1 or levels > 3:
        raise ConfigError("levels must be 1..3 for the gradient check")
    vocab = ConceptVocabulary()
    motions = [generate_sequence(seed * 101 + i, MotionConfig(frames_per_segment_range=(6, 10)), f"g{i}")
               for i in range(6)]
    man = generate_dataset(motions, seed, DatasetConfig(per_type_quota=3, max_per_motion=3), vocab)
    examples = [e for e in man.examples if len(e.program) <= steps][:4]
    if not examples:
        raise ConfigError(f"no generated program has at most {steps} steps")
    level_ids = (0, 1, FINAL)[3 - levels:]
    cfg = ModelConfig(d=d, heads=2, window=16, patch=8, layers=2, level_ids=level_ids, dropout=0.0)
    tok = Tokenizer.build([e.question for e in examples] + list(QTYPE_PHRASES.values()))
    model = IMoRe(cfg, vocab, tok, seed=seed).to(torch.float64)
    model.train()  # dropout is 0, so train mode is deterministic
    by_id = {m.id: m for m in motions}
    items = []
    for e in examples:
        w, s = mode_one_windows(by_id[e.motion_id].frames[:40], cfg.window)
        items.append((w, s, e.question, e.program))
    batch = model.make_batch(items)
    answers = [e.answer for e in examples]

    def loss_fn():
        logits, _ = model.forward_batch(batch)
        return model.loss(logits, answers)

    # only the branches present in the batch receive gradient; others are exactly zero
    # eps 1e-5 keeps cancellation noise (~ulp(loss)/eps) well below tol for exactly-zero gradients
    return diff.grad_check(loss_fn, diff.ParamRegistry.from_module(model), eps=1e-5, tol=tol,
                           max_coords=max_coords, seed=seed)
