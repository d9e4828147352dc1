"""Procedural skeleton motion with exact segment annotations.

Coordinates are meters in a person-centred frame: +x is the person's left,
+y is up, +z is forward. A sequence is a concatenation of segments, each
produced by one :class:`MotionPrimitive` on top of a neutral standing pose,
plus i.i.d. Gaussian noise.

Primitives only displace the joints of their driven body parts (relative to
the root); everything else stays put apart from root translation. This is
what makes the annotations checkable from the frames alone.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .vocab import Concept, ConceptKind, ConceptVocabulary

# -- skeleton -----------------------------------------------------------------

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
NUM_JOINTS = len(JOINT_NAMES)
ROOT = 0

REST_POSE = np.array([
    [0.00, 1.00, 0.0],
    [-0.10, 1.00, 0.0], [-0.10, 0.55, 0.0], [-0.10, 0.10, 0.0],
    [0.10, 1.00, 0.0], [0.10, 0.55, 0.0], [0.10, 0.10, 0.0],
    [0.00, 1.25, 0.0], [0.00, 1.45, 0.0], [0.00, 1.60, 0.0], [0.00, 1.75, 0.0],
    [0.18, 1.45, 0.0], [0.20, 1.18, 0.0], [0.22, 0.92, 0.0],
    [-0.18, 1.45, 0.0], [-0.20, 1.18, 0.0], [-0.22, 0.92, 0.0],
])

# joints that move when a body part is annotated as used
BODY_PART_JOINTS = {
    "left_arm": (12, 13), "right_arm": (15, 16),
    "left_hand": (13,), "right_hand": (16,),
    "left_leg": (5, 6), "right_leg": (2, 3),
    "left_foot": (6,), "right_foot": (3,),
    "torso": (7, 8), "head": (9, 10),
}

# patch groups for the motion encoder: torso+head, arms, legs
BODY_GROUPS = (
    (0, 7, 8, 9, 10),
    (11, 12, 13),
    (14, 15, 16),
    (4, 5, 6),
    (1, 2, 3),
)

DIRECTION_VECTORS = {
    "left": (1.0, 0.0, 0.0), "right": (-1.0, 0.0, 0.0),
    "forward": (0.0, 0.0, 1.0), "backward": (0.0, 0.0, -1.0),
    "up": (0.0, 1.0, 0.0), "down": (0.0, -1.0, 0.0),
}

_X, _Y, _Z = np.eye(3)


# -- annotations ----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentAnnotation:
    start_frame: int
    end_frame: int  # exclusive
    action: Concept
    direction: Optional[Concept]
    body_parts: tuple[Concept, ...]
    primary_body_part: Concept

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(f"bad segment span [{self.start_frame}, {self.end_frame})")
        if not self.body_parts:
            raise ValueError("segment needs at least one body part")
        if self.primary_body_part not in self.body_parts:
            raise ValueError("primary body part must be one of the listed body parts")

    def __len__(self):
        return self.end_frame - self.start_frame

    def to_dict(self) -> dict:
        return {
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "action": self.action.label,
            "direction": self.direction.label if self.direction else None,
            "body_parts": [b.label for b in self.body_parts],
            "primary_body_part": self.primary_body_part.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentAnnotation":
        bp = lambda lab: Concept(ConceptKind.BODY_PART, lab)
        return cls(
            int(d["start_frame"]), int(d["end_frame"]),
            Concept(ConceptKind.ACTION, d["action"]),
            Concept(ConceptKind.DIRECTION, d["direction"]) if d.get("direction") else None,
            tuple(bp(b) for b in d["body_parts"]),
            bp(d["primary_body_part"]),
        )


@dataclass
class MotionSequence:
    id: str
    frames: np.ndarray  # (T, J, 3) float32
    segments: list[SegmentAnnotation] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.frames.shape[1])

    def validate(self, min_segment_len: int = 1) -> None:
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be T x J x 3, got {self.frames.shape}")
        pos = 0
        for seg in self.segments:
            if seg.start_frame != pos:
                raise ValueError(f"segments not contiguous at frame {pos}")
            if len(seg) < min_segment_len:
                raise ValueError("segment shorter than the minimum length")
            pos = seg.end_frame
        if pos != self.num_frames:
            raise ValueError(f"segments cover [0, {pos}) but T = {self.num_frames}")


# -- primitives -----------------------------------------------------------------

Trajectory = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class MotionPrimitive:
    name: Concept
    direction: Optional[Concept]
    driven_parts: tuple[Concept, ...]
    primary: Concept
    trajectory_generator: Trajectory = field(repr=False, compare=False)

    def __post_init__(self):
        if not self.driven_parts:
            raise ValueError("primitive must drive at least one body part")
        if self.primary not in self.driven_parts:
            raise ValueError("primary body part must be driven")

    @property
    def driven_joints(self) -> tuple[int, ...]:
        js = set()
        for part in self.driven_parts:
            js.update(BODY_PART_JOINTS[part.label])
        return tuple(sorted(js))

    def trajectory(self, n_frames: int, rng: np.random.Generator):
        """Root translation (n, 3) and root-relative joint offsets (n, J, 3)."""
        return self.trajectory_generator(n_frames, rng)


def _osc(t, cycles, phase=0.0):
    return np.sin(2 * np.pi * cycles * t + phase)


def _pulse(t, cycles):
    # one-sided oscillation: 0 -> 1 -> 0, `cycles` times
    return np.abs(np.sin(np.pi * cycles * t))


class _Builder:
    """Accumulates per-joint offsets for one segment."""

    def __init__(self, n, rng):
        self.n = n
        self.t = np.linspace(0.0, 1.0, n)
        self.rng = rng
        self.scale = rng.uniform(0.85, 1.15)
        self.cycles = rng.uniform(2.0, 3.0)
        self.phase = rng.uniform(0, 2 * np.pi)
        self.root = np.zeros((n, 3))
        self.off = np.zeros((n, NUM_JOINTS, 3))

    def osc(self, joints, axis, amp, phase=0.0):
        w = _osc(self.t, self.cycles, self.phase + phase)
        for j in joints:
            self.off[:, j] += np.outer(w * amp * self.scale, axis)

    def pulse(self, joints, axis, amp):
        w = _pulse(self.t, self.cycles)
        for j in joints:
            self.off[:, j] += np.outer(w * amp * self.scale, axis)

    def translate(self, axis, dist):
        self.root += np.outer(self.t * dist * self.scale, axis)

    def bob(self, axis, amp):
        self.root += np.outer(_pulse(self.t, self.cycles) * amp * self.scale, axis)

    def done(self):
        return self.root, self.off


_SIDE = {"left": {"arm": (12, 13), "wrist": 13, "elbow": 12, "knee": 5, "ankle": 6},
         "right": {"arm": (15, 16), "wrist": 16, "elbow": 15, "knee": 2, "ankle": 3}}
_OTHER = {"left": "right", "right": "left"}


def _walk(direction, lead):
    axis = np.array(DIRECTION_VECTORS[direction])

    def gen(n, rng):
        b = _Builder(n, rng)
        b.translate(axis, 1.2)
        other = _OTHER[lead]
        b.osc([_SIDE[lead]["ankle"]], axis, 0.40)
        b.osc([_SIDE[lead]["knee"]], axis, 0.30)
        b.osc([_SIDE[other]["ankle"]], axis, 0.22, phase=np.pi)
        b.osc([_SIDE[other]["knee"]], axis, 0.18, phase=np.pi)
        return b.done()
    return gen


def _crawl(direction):
    axis = np.array(DIRECTION_VECTORS[direction])

    def gen(n, rng):
        b = _Builder(n, rng)
        b.translate(axis, 0.6)
        b.pulse([7, 8], _Z, 0.35)
        b.osc([12, 13, 5, 6], _Z, 0.22)
        b.osc([15, 16, 2, 3], _Z, 0.22, phase=np.pi)
        return b.done()
    return gen


def _squat(n, rng):
    b = _Builder(n, rng)
    b.bob(-_Y, 0.35)
    b.pulse([7, 8], _Z, 0.30)
    b.pulse([2, 5], _Z, 0.25)
    b.osc([3, 6], _X, 0.15)
    return b.done()


def _jump(lead):
    def gen(n, rng):
        b = _Builder(n, rng)
        b.bob(_Y, 0.30)
        lk, la = _SIDE[lead]["knee"], _SIDE[lead]["ankle"]
        ok, oa = _SIDE[_OTHER[lead]]["knee"], _SIDE[_OTHER[lead]]["ankle"]
        b.pulse([la], _Y, 0.40)
        b.pulse([lk], _Z, 0.28)
        b.pulse([oa], _Y, 0.22)
        b.pulse([ok], _Z, 0.18)
        return b.done()
    return gen


def _kick(side):
    def gen(n, rng):
        b = _Builder(n, rng)
        b.pulse([_SIDE[side]["ankle"]], _Z, 0.50)
        b.pulse([_SIDE[side]["ankle"]], _Y, 0.20)
        b.pulse([_SIDE[side]["knee"]], _Z, 0.25)
        return b.done()
    return gen


def _wave(side):
    sx = 1.0 if side == "left" else -1.0

    def gen(n, rng):
        b = _Builder(n, rng)
        b.osc([_SIDE[side]["wrist"]], _X * sx, 0.25)
        b.pulse([_SIDE[side]["wrist"]], _Y, 0.45)
        b.osc([_SIDE[side]["elbow"]], _X * sx, 0.15)
        b.pulse([_SIDE[side]["elbow"]], _Y, 0.20)
        return b.done()
    return gen


def _raise_arm(side):
    def gen(n, rng):
        b = _Builder(n, rng)
        b.pulse([_SIDE[side]["wrist"]], _Y, 0.70)
        b.pulse([_SIDE[side]["elbow"]], _Y, 0.35)
        return b.done()
    return gen


def _turn(direction):
    axis = np.array(DIRECTION_VECTORS[direction])

    def gen(n, rng):
        b = _Builder(n, rng)
        b.pulse([9, 10], axis, 0.35)
        b.pulse([10], _Z, 0.10)
        b.pulse([7, 8], axis, 0.22)
        return b.done()
    return gen


def _pick_up(n, rng):
    b = _Builder(n, rng)
    b.bob(-_Y, 0.25)
    b.pulse([7, 8], _Z, 0.30)
    b.pulse([16], -_Y, 0.55)
    b.pulse([16], _Z, 0.25)
    b.pulse([15], _Z, 0.25)
    return b.done()


def _sit_stand(direction):
    sign = -1.0 if direction == "down" else 1.0

    def gen(n, rng):
        b = _Builder(n, rng)
        ramp = b.t if sign < 0 else 1.0 - b.t
        b.root += np.outer(-0.45 * ramp * b.scale, _Y)
        b.pulse([2, 5], _Z, 0.25)
        b.osc([3, 6], _X, 0.15)
        b.pulse([7, 8], _Z, 0.20)
        return b.done()
    return gen


def _step(direction):
    axis = np.array(DIRECTION_VECTORS[direction])

    def gen(n, rng):
        b = _Builder(n, rng)
        b.translate(axis, 0.45)
        b.pulse([_SIDE[direction]["ankle"]], axis, 0.25)
        b.pulse([_SIDE[direction]["ankle"]], _Y, 0.12)
        b.pulse([_SIDE[direction]["knee"]], axis, 0.22)
        return b.done()
    return gen


def primitive_library(vocab: ConceptVocabulary | None = None) -> list[MotionPrimitive]:
    """All primitive variants whose action is in ``vocab`` (default: all)."""
    vocab = vocab or ConceptVocabulary()
    A = lambda s: Concept(ConceptKind.ACTION, s)
    D = lambda s: Concept(ConceptKind.DIRECTION, s) if s else None
    B = lambda *s: tuple(Concept(ConceptKind.BODY_PART, x) for x in s)
    legs = ("left_leg", "right_leg", "left_foot", "right_foot")

    lib = []

    def add(action, direction, parts, primary, gen):
        lib.append(MotionPrimitive(A(action), D(direction), B(*parts), B(primary)[0], gen))

    for d in ("forward", "backward", "left", "right"):
        for lead in ("left", "right"):
            add("walk", d, legs, f"{lead}_leg", _walk(d, lead))
    add("squat", "down", ("left_leg", "right_leg", "torso"), "torso", _squat)
    for lead in ("left", "right"):
        add("jump", "up", legs, f"{lead}_foot", _jump(lead))
    for side in ("left", "right"):
        add("kick", "forward", (f"{side}_leg", f"{side}_foot"), f"{side}_foot", _kick(side))
        add("wave", None, (f"{side}_arm", f"{side}_hand"), f"{side}_hand", _wave(side))
        add("raise_arm", "up", (f"{side}_arm", f"{side}_hand"), f"{side}_arm", _raise_arm(side))
    for d in ("forward", "backward"):
        add("crawl", d, ("left_arm", "right_arm", "left_leg", "right_leg", "torso"), "torso", _crawl(d))
    for d in ("left", "right"):
        add("turn", d, ("torso", "head"), "head", _turn(d))
    add("pick_up", "down", ("torso", "right_arm", "right_hand"), "right_hand", _pick_up)
    add("sit", "down", ("left_leg", "right_leg", "torso"), "torso", _sit_stand("down"))
    add("stand", "up", ("left_leg", "right_leg", "torso"), "torso", _sit_stand("up"))
    for d in ("left", "right"):
        add("step", d, (f"{d}_leg", f"{d}_foot"), f"{d}_foot", _step(d))

    return [
        p for p in lib
        if p.name in vocab
        and (p.direction is None or p.direction in vocab)
        and all(b in vocab for b in p.driven_parts)
    ]


# -- generation -----------------------------------------------------------------

@dataclass(frozen=True)
class MotionConfig:
    joints: int = NUM_JOINTS
    segments_per_seq: tuple[int, int] = (3, 5)
    frames_per_segment_range: tuple[int, int] = (16, 32)
    noise_std: float = 0.01
    vocab: ConceptVocabulary = field(default_factory=ConceptVocabulary)

    @classmethod
    def from_mapping(cls, m: dict) -> "MotionConfig":
        m = dict(m)
        vocab = ConceptVocabulary.from_mapping(m.pop("vocab", {}))
        seg = m.pop("segments_per_seq", cls.segments_per_seq)
        if isinstance(seg, int):
            seg = (seg, seg)
        frames = tuple(m.pop("frames_per_segment_range", cls.frames_per_segment_range))
        unknown = set(m) - {"joints", "noise_std"}
        if unknown:
            raise ConfigError(f"unknown motion config keys: {sorted(unknown)}")
        return cls(
            joints=int(m.get("joints", NUM_JOINTS)),
            segments_per_seq=tuple(seg),
            frames_per_segment_range=frames,
            noise_std=float(m.get("noise_std", 0.01)),
            vocab=vocab,
        )

    def to_mapping(self) -> dict:
        return {
            "joints": self.joints,
            "segments_per_seq": list(self.segments_per_seq),
            "frames_per_segment_range": list(self.frames_per_segment_range),
            "noise_std": self.noise_std,
            "vocab": self.vocab.to_mapping(),
        }

    def check(self) -> None:
        lo, hi = self.segments_per_seq
        if lo < 2 or hi < lo:
            raise ConfigError(f"segments_per_seq must satisfy 2 <= min <= max, got {self.segments_per_seq}")
        flo, fhi = self.frames_per_segment_range
        if flo < 2 or fhi < flo:
            raise ConfigError(f"invalid frames_per_segment_range {self.frames_per_segment_range}")
        if self.joints != NUM_JOINTS:
            raise ConfigError(f"only the {NUM_JOINTS}-joint skeleton is available (got joints={self.joints})")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def generate_sequence(rng_seed: int, config: MotionConfig | None = None, seq_id: str | None = None) -> MotionSequence:
    config = config or MotionConfig()
    config.check()
    prims = primitive_library(config.vocab)
    actions = sorted({p.name.label for p in prims})
    if len(actions) < 2:
        raise ConfigError("need at least two actions with primitives in the vocabulary")
    by_action = {a: [p for p in prims if p.name.label == a] for a in actions}

    rng = np.random.default_rng(rng_seed)
    n_seg = int(rng.integers(config.segments_per_seq[0], config.segments_per_seq[1] + 1))
    flo, fhi = config.frames_per_segment_range

    chunks, segments = [], []
    origin = np.zeros(3)
    start, prev = 0, None
    for _ in range(n_seg):
        action = actions[int(rng.integers(len(actions)))]
        while action == prev:
            action = actions[int(rng.integers(len(actions)))]
        prev = action
        variants = by_action[action]
        prim = variants[int(rng.integers(len(variants)))]
        n = int(rng.integers(flo, fhi + 1))
        root, off = prim.trajectory(n, rng)
        pose = REST_POSE[None] + off
        pose = pose + (origin + root)[:, None, :]
        chunks.append(pose)
        # carry horizontal displacement into the next segment
        origin = origin + np.array([root[-1, 0], 0.0, root[-1, 2]])
        segments.append(SegmentAnnotation(
            start, start + n, prim.name, prim.direction, prim.driven_parts, prim.primary,
        ))
        start += n

    frames = np.concatenate(chunks, axis=0)
    if config.noise_std > 0:
        frames = frames + rng.normal(0.0, config.noise_std, size=frames.shape)
    seq = MotionSequence(seq_id or f"m{rng_seed:06d}", frames.astype(np.float32), segments)
    seq.validate()
    return seq


# left/right joint swap for the sagittal mirror (x -> -x)
MIRROR_JOINTS = (0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13)
# primitives with no mirrored counterpart in the library
ASYMMETRIC_ACTIONS = frozenset({"pick_up"})


def mirror_label(label: str) -> str:
    for a, b in (("left", "right"), ("right", "left")):
        if label == a or label.startswith(a + "_"):
            return b + label[len(a):]
    return label


def mirror_concept(c: Optional[Concept]) -> Optional[Concept]:
    return None if c is None else Concept(c.kind, mirror_label(c.label))


def can_mirror(seq: "MotionSequence") -> bool:
    return seq.num_joints == NUM_JOINTS and not any(s.action.label in ASYMMETRIC_ACTIONS for s in seq.segments)


def mirror_motion(seq: "MotionSequence") -> "MotionSequence":
    """Left/right mirror image: frames reflected in x, annotations relabelled to match."""
    if not can_mirror(seq):
        raise ValueError(f"motion {seq.id} contains a primitive without a mirror image")
    frames = seq.frames[:, list(MIRROR_JOINTS)].copy()
    frames[..., 0] *= -1
    segs = [
        SegmentAnnotation(s.start_frame, s.end_frame, s.action, mirror_concept(s.direction),
                          tuple(mirror_concept(b) for b in s.body_parts), mirror_concept(s.primary_body_part))
        for s in seq.segments
    ]
    return MotionSequence(seq.id, frames, segs)


def root_relative_speed(frames: np.ndarray) -> np.ndarray:
    """Mean per-frame displacement of every joint relative to the root, shape (J,)."""
    rel = frames - frames[:, ROOT:ROOT + 1, :]
    return np.linalg.norm(np.diff(rel, axis=0), axis=-1).mean(axis=0)


# -- file format ----------------------------------------------------------------

MAGIC = b"IMOM"
VERSION = 1
_HEADER = struct.Struct("<4siii")


def write_motion(path, seq: MotionSequence) -> Path:
    """Binary frames at ``path`` plus a JSON annotation sidecar at ``path + '.json'``."""
    path = Path(path)
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    T, J, _ = frames.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, T, J))
        f.write(frames.tobytes())
    sidecar = {"id": seq.id, "version": VERSION, "segments": [s.to_dict() for s in seq.segments]}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))
    return path


def read_motion(path) -> MotionSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    magic, version, T, J = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if T < 0 or J < 0:
        raise FormatError(f"{path}: negative dimensions")
    expected = _HEADER.size + T * J * 3 * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, J, 3).astype(np.float32)
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
        segments = [SegmentAnnotation.from_dict(s) for s in meta["segments"]]
        seq_id = meta["id"]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad annotation sidecar ({exc})") from exc
    seq = MotionSequence(seq_id, frames, segments)
    try:
        seq.validate()
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return seq
