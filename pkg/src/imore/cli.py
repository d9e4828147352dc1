"""Command-line entry point: ``imore <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .dataset import (
    DatasetConfig, DatasetManifest, config_hash, generate_dataset, read_manifest, write_manifest,
)
from .errors import (
    ConfigError, DivergenceError, FormatError, IMoReError, MissingMotion, SchemaError,
)
from .motion import MotionConfig, generate_sequence, read_motion, write_motion
from .oracle import run as run_program
from .program import to_text

log = logging.getLogger("imore")

EXIT_OK = 0
EXIT_FAILED = 1  # the command ran but its check failed (oracle mismatch, grad check)
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5

QUESTIONS_FILE = "questions.jsonl"
MOTION_DIR = "motions"


@dataclass
class RunConfig:
    """Everything a command needs beyond its flags; loaded from JSON."""

    seed: int | None = None
    motions: int = 200
    motion: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    mode: str = "I"
    preset: str | None = None

    @classmethod
    def from_mapping(cls, m: dict) -> "RunConfig":
        if not isinstance(m, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**m)
        if cfg.motions < 1:
            raise ConfigError("motions must be >= 1")
        # validate nested sections before any work starts
        MotionConfig.from_mapping(cfg.motion).check()
        DatasetConfig.from_mapping(cfg.dataset)
        cfg.train_config(0)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            return cls.from_mapping(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg})") from exc

    def train_config(self, seed: int):
        from .train import TrainConfig
        m = {**self.train, "seed": seed}
        m.setdefault("mode", self.mode)
        if self.preset:
            m.setdefault("preset", self.preset)
        return TrainConfig.from_mapping(m)


def resolve_seed(flag, cfg: RunConfig) -> int:
    """--seed, then the config file, then $IMORE_SEED, then 0."""
    if flag is not None:
        return int(flag)
    if cfg.seed is not None:
        return int(cfg.seed)
    env = os.environ.get("IMORE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"IMORE_SEED must be an integer, got {env!r}") from None
    return 0


def load_data(data_dir):
    """(manifest, motions by id) from a directory written by ``imore gen``."""
    d = Path(data_dir)
    qpath = d / QUESTIONS_FILE
    if not qpath.is_file():
        raise FileNotFoundError(f"{qpath} not found; is {d} a generated dataset directory?")
    manifest = read_manifest(qpath)
    motions = {}
    mdir = d / MOTION_DIR
    for p in sorted(mdir.glob("*.imom")) if mdir.is_dir() else []:
        m = read_motion(p)
        motions[m.id] = m
    missing = sorted({e.motion_id for e in manifest.examples} - set(motions))
    if missing:
        raise MissingMotion(f"{len(missing)} referenced motion(s) missing, e.g. {missing[0]}")
    return manifest, motions


def _check_file(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} {path} does not exist")


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = RunConfig.load(args.config)
    seed = resolve_seed(args.seed, cfg)
    mcfg = MotionConfig.from_mapping(cfg.motion)
    dcfg = DatasetConfig.from_mapping(cfg.dataset)
    out = Path(args.out)
    (out / MOTION_DIR).mkdir(parents=True, exist_ok=True)
    ids = [f"m{seed:04d}_{i:05d}" for i in range(cfg.motions)]

    def make(i):
        return generate_sequence(seed * 1_000_003 + i, mcfg, ids[i])

    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        motions = list(pool.map(make, range(cfg.motions)))
    for m in motions:
        write_motion(out / MOTION_DIR / f"{m.id}.imom", m)
    manifest = generate_dataset(motions, seed, dcfg, mcfg.vocab)
    write_manifest(manifest, out / QUESTIONS_FILE)
    (out / "run_config.json").write_text(json.dumps({
        "seed": seed, "motions": cfg.motions, "motion": mcfg.to_mapping(), "dataset": dcfg.to_mapping(),
        "config_hash": manifest.config_hash,
    }, indent=1))
    print(json.dumps({"examples": len(manifest.examples), "splits": manifest.split_counts,
                      "config_hash": manifest.config_hash, "shortfall": manifest.import_report}))
    return EXIT_OK


def cmd_oracle(args) -> int:
    manifest, motions = load_data(args.data)
    bad = 0
    for e in manifest.examples:
        res = run_program(motions[e.motion_id], e.program)
        if not res.ok or res.answer != e.answer:
            bad += 1
            got = res.answer.label if res.answer else f"{type(res.error).__name__}"
            print(f"MISMATCH {e.id}: {to_text(e.program)} -> {got}, stored {e.answer.label}")
    print(f"{len(manifest.examples) - bad}/{len(manifest.examples)} examples agree with the oracle")
    return EXIT_OK if bad == 0 else EXIT_FAILED


def cmd_train(args) -> int:
    from .train import save_checkpoint, train
    cfg = RunConfig.load(args.config)
    seed = resolve_seed(args.seed, cfg)
    tcfg = cfg.train_config(seed)
    manifest, motions = load_data(args.data)
    Path(args.out_ckpt).parent.mkdir(parents=True, exist_ok=True)
    res = train(manifest, motions, tcfg)
    save_checkpoint(args.out_ckpt, res.model, tcfg, {"config_hash": res.config_hash, "best_epoch": res.best_epoch})
    curve = args.curve or str(args.out_ckpt) + ".curve.csv"
    res.write_curve(curve)
    print(json.dumps({"checkpoint": str(args.out_ckpt), "curve": curve, "best_epoch": res.best_epoch,
                      "best_val": res.best_val, "config_hash": res.config_hash}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint, parse_program_source
    _check_file(args.ckpt, "checkpoint")
    parse_program_source(args.programs)
    model, meta = load_checkpoint(args.ckpt)
    manifest, motions = load_data(args.data)
    seed = resolve_seed(args.seed, RunConfig())
    h = config_hash({"ckpt": meta.get("config_hash", ""), "split": args.split, "mode": args.mode,
                     "programs": args.programs, "seed": seed})
    runs = (meta.get("train_config") or {}).get("mode_II_runs", 5)
    rep = evaluate(model, manifest, motions, args.split, args.mode, args.programs, seed=seed, runs=runs,
                   workers=args.workers, hash_=h)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(rep.to_json())
    Path(str(report) + ".tsv").write_text(rep.table())
    print(rep.table(), end="")
    print(f"majority baseline: {rep.majority_baseline:.3f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    from .train import load_checkpoint, trace_example
    _check_file(args.ckpt, "checkpoint")
    model, _ = load_checkpoint(args.ckpt)
    manifest, motions = load_data(args.data)
    ex = [e for e in manifest.examples if e.id == args.example_id]
    if not ex:
        raise ConfigError(f"no example with id {args.example_id!r}")
    trace = trace_example(model, ex[0], motions[ex[0].motion_id])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(trace, indent=1))
    for st in trace["steps"]:
        levels = " ".join(f"{k}={v:.3f}" for k, v in zip(trace["level_ids"], st["level_weights"]))
        print(f"step {st['index']} {st['op']}({st['concept'] or ''}) levels: {levels}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import end_to_end_grad_check
    dims = dict(kv.split("=", 1) for kv in args.dims) if args.dims else {}
    unknown = set(dims) - {"d", "levels", "steps"}
    if unknown:
        raise ConfigError(f"unknown --dims keys: {sorted(unknown)}")
    rep = end_to_end_grad_check(d=int(dims.get("d", 16)), levels=int(dims.get("levels", 3)),
                                steps=int(dims.get("steps", 4)), seed=resolve_seed(args.seed, RunConfig()),
                                tol=args.tol)
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_ablate(args) -> int:
    from .train import run_ablation
    cfg = RunConfig.load(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    manifest, motions = load_data(args.data)
    table = run_ablation(manifest, motions, seeds, cfg.train_config(seeds[0] if seeds else 0))
    text = table.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imore", description="Program-guided motion question answering.")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--workers", type=int, default=1, help="internal parallelism for generation/evaluation")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate motions and questions")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("oracle", help="re-check every stored answer with the symbolic executor")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--curve", help="loss curve CSV (default: <ckpt>.curve.csv)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--mode", default="I", choices=["I", "II"])
    p.add_argument("--programs", default="gold", help="gold | predicted | corrupted:RATE")
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="export attention traces for one example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--example-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference check of end-to-end gradients")
    p.add_argument("--dims", nargs="*", default=["d=16"], help="key=value, e.g. d=16 levels=3 steps=4")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the ablation variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # sub-commands read the global flag under one name
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError, FormatError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SchemaError, MissingMotion) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump)[:2000], file=sys.stderr)
        return EXIT_DIVERGED
    except IMoReError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
