import dataclasses
import math

import numpy as np
import pytest
import torch

from imore.dataset import DatasetConfig, DatasetManifest, Split, generate_dataset
from imore.errors import ConfigError, DivergenceError, MissingMotion
from imore.model import FINAL
from imore.oracle import exec_filter
from imore.motion import MotionConfig, MotionSequence, generate_sequence
from imore.program import parse_program, to_text
from imore.train import (
    EvalReport, TrainConfig, Variant, end_to_end_grad_check, evaluate, explicit_baseline, load_checkpoint,
    lr_at, mirror_program, mirror_question, run_ablation, save_checkpoint, step_targets, trace_example, train,
)
from imore.vocab import ConceptVocabulary

SMALL = dict(d=32, heads=2, window=32, patch=8, layers=2, level_ids=[0, FINAL])


def cfg(**over):
    base = dict(lr=3e-3, batch_size=16, epochs=2, dropout=0.0, model=dict(SMALL))
    return TrainConfig(**{**base, **over})


@pytest.fixture(scope="module")
def data():
    motions = [generate_sequence(500 + i, MotionConfig(), f"t{i:03d}") for i in range(80)]
    man = generate_dataset(motions, 1, DatasetConfig(per_type_quota=30))
    return man, {m.id: m for m in motions}


@pytest.fixture(scope="module")
def trained(data):
    man, motions = data
    return train(man, motions, cfg(trace_supervision=1.0))


# -- configuration -------------------------------------------------------------------------


def test_paper_preset():
    c = TrainConfig.preset("paper")
    assert (c.lr, c.dropout, c.batch_size, c.weight_decay) == (1e-6, 0.1, 4, 1e-4)
    d = TrainConfig.preset("desk")
    assert (d.lr, d.batch_size, d.epochs) == (3e-4, 16, 60)
    assert TrainConfig().weight_decay == 1e-4


@pytest.mark.parametrize("bad", [dict(lr=0), dict(corruption_rate=1.5), dict(precision="float16"), dict(mode="III"),
                                 dict(lr_schedule="step"), dict(trace_supervision=-1)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_mapping_round_trip():
    c = cfg(ablation_variant="MacControl")
    assert TrainConfig.from_mapping(c.to_mapping()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"lr": 1e-3, "momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"model": {"depth": 3}})


def test_variants_change_model_config():
    assert cfg(ablation_variant="NoFeatureSelection").model_config().level_ids == (FINAL,)
    assert cfg(ablation_variant="MacControl").model_config().control == "mac"


def test_cosine_schedule():
    c = cfg(lr=1.0, lr_schedule="cosine")
    assert lr_at(c, 0, 100) == pytest.approx(0.2)
    assert lr_at(c, 4, 100) == pytest.approx(1.0)
    assert lr_at(c, 99, 100) < 0.01
    assert lr_at(cfg(lr=0.5), 50, 100) == 0.5


# -- helpers --------------------------------------------------------------------------------


def test_mirror_helpers():
    vocab = ConceptVocabulary()
    assert mirror_question("Which body part after they move left? Left hand.") == \
        "Which body part after they move right? Right hand."
    p = parse_program("query_body_part(relate(between, filter(left), filter(right_hand)))", vocab)
    assert to_text(mirror_program(p)) == "query_body_part(relate(between, filter_direction(right), filter_body_part(left_hand)))"


def test_step_targets(data):
    man, motions = data
    e = next(e for e in man.examples if e.relation is not None and e.relation.value == "before")
    m = motions[e.motion_id]
    t = step_targets(m, e.program)
    assert len(t) == len(e.program)
    filt, rel, query = t
    c = e.program.steps[0].concept
    assert filt == tuple(exec_filter(m, c.kind, c))
    assert rel == query and len(rel) == 1


# -- training -------------------------------------------------------------------------------


def test_loss_is_mean_cross_entropy(trained, data):
    man, motions = data
    model = trained.model
    from imore.model import mode_one_windows
    ex = man.split(Split.TRAIN)[:5]
    items = [(*mode_one_windows(motions[e.motion_id].frames, 32), e.question, e.program) for e in ex]
    with torch.no_grad():
        logits, _ = model.forward_batch(model.make_batch(items))
        loss = model.loss(logits, [e.answer for e in ex]).item()
    by_hand = []
    for lg, e in zip(logits, ex):
        z = lg.logits.double().tolist()
        t = model.answer_labels[lg.branch].index(e.answer.label)
        by_hand.append(-(z[t] - math.log(sum(math.exp(v) for v in z))))
    assert loss == pytest.approx(sum(by_hand) / len(by_hand), rel=1e-5)


def test_training_is_deterministic(data):
    man, motions = data
    a = train(man, motions, cfg(epochs=2))
    b = train(man, motions, cfg(epochs=2))
    assert a.curve == b.curve
    assert all(torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))


def test_overfit_32_examples(data):
    man, motions = data
    sub = DatasetManifest([dataclasses.replace(e, split=Split.TRAIN) for e in man.split(Split.TRAIN)[:32]], man.vocab)
    res = train(sub, motions, cfg(epochs=200, lr=1e-3))
    assert res.curve[-1]["train_acc"] == 1.0
    rep = evaluate(res.model, sub, motions, "train")
    assert rep.accuracy == 1.0


def test_mode_two_and_augmented_training_run(data):
    man, motions = data
    res = train(man, motions, cfg(epochs=1, mode="II", augment=True, trace_supervision=0.5, lr_schedule="cosine"))
    assert len(res.curve) == 1 and math.isfinite(res.curve[0]["train_loss"])


def test_divergence_reports_dump(data):
    man, motions = data
    bad = {k: MotionSequence(m.id, np.full_like(m.frames, np.nan), m.segments) for k, m in motions.items()}
    with pytest.raises(DivergenceError) as info:
        train(man, bad, cfg(epochs=1))
    assert info.value.dump["epoch"] == 0 and info.value.dump["examples"]


def test_empty_train_split_rejected(data):
    man, motions = data
    with pytest.raises(ConfigError):
        train(DatasetManifest(man.split(Split.TEST), man.vocab), motions, cfg())
    with pytest.raises(ConfigError):
        train(man, motions, cfg(ablation_variant="ExplicitOracle"))


def test_checkpoint_round_trip(trained, data, tmp_path):
    man, motions = data
    path = save_checkpoint(tmp_path / "m.ckpt", trained.model, trained.config, {"note": "x"})
    model, meta = load_checkpoint(path)
    assert meta["note"] == "x" and meta["train_config"]["lr"] == trained.config.lr
    a = evaluate(trained.model, man, motions, "test")
    b = evaluate(model, man, motions, "test")
    assert a == b


# -- evaluation -----------------------------------------------------------------------------


def test_report_consistency(trained, data):
    man, motions = data
    rep = evaluate(trained.model, man, motions, "test")
    weighted = sum(rep.grid[q]["All"] * rep.counts[q]["All"] for q in rep.grid if rep.counts[q]["All"]) / rep.n
    assert rep.accuracy == pytest.approx(weighted)
    assert rep.accuracy == pytest.approx(rep.accuracy_from_confusion())
    assert 0 <= rep.majority_baseline <= 1
    assert EvalReport.from_json(rep.to_json()) == rep
    assert len(rep.table().splitlines()) == 2


def test_evaluate_deterministic_and_rate_zero_identity(trained, data):
    man, motions = data
    gold = evaluate(trained.model, man, motions, "test")
    assert evaluate(trained.model, man, motions, "test") == gold
    zero = evaluate(trained.model, man, motions, "test", program_source="corrupted:0")
    assert zero.predictions == gold.predictions and zero.accuracy == gold.accuracy


def test_parallel_evaluation_matches_serial(trained, data):
    man, motions = data
    a = evaluate(trained.model, man, motions, "val", workers=1)
    b = evaluate(trained.model, man, motions, "val", workers=3)
    assert a == b


def test_mode_two_evaluation_runs(trained, data):
    man, motions = data
    rep = evaluate(trained.model, man, motions, "val", mode="II", runs=2)
    assert rep.mode == "II" and rep.n == len(man.split(Split.VAL))


def test_missing_direction_between_is_na(trained, data):
    man, motions = data
    sub = DatasetManifest([e for e in man.examples if e.question_type.value != "query_direction"
                           or e.relation.value != "between"], man.vocab)
    rep = evaluate(trained.model, sub, motions, "test")
    assert rep.grid["query_direction"]["Between"] is None
    assert "N/A" in rep.table()


def test_missing_motion(trained, data):
    man, motions = data
    some = dict(motions)
    del some[man.split(Split.TEST)[0].motion_id]
    with pytest.raises(MissingMotion):
        evaluate(trained.model, man, some, "test")


def test_bad_program_source(trained, data):
    man, motions = data
    with pytest.raises(ConfigError):
        evaluate(trained.model, man, motions, "test", program_source="shuffled")


def test_explicit_baseline(data):
    man, motions = data
    assert explicit_baseline(man, motions).accuracy == 1.0
    assert explicit_baseline(man, motions, program_source="corrupted:0.1").accuracy < 1.0


def test_predicted_programs_equal_gold_on_generated_questions(trained, data):
    man, motions = data
    a = evaluate(trained.model, man, motions, "test", program_source="gold")
    b = evaluate(trained.model, man, motions, "test", program_source="predicted")
    assert a.predictions == b.predictions


# -- ablation and traces ----------------------------------------------------------------------


def test_variant_parameter_counts(data):
    man, motions = data
    from imore.model import IMoRe
    from imore.train import build_tokenizer
    tok = build_tokenizer(man)
    full = IMoRe(cfg().model_config(), man.vocab, tok)
    nfs = IMoRe(cfg(ablation_variant="NoFeatureSelection").model_config(), man.vocab, tok)
    assert len(full.level_proj) == 2 and full.level_tag.weight.shape[0] == 2
    assert len(nfs.level_proj) == 1 and nfs.level_tag.weight.shape[0] == 1
    d = SMALL["d"]
    per_level = d * d + d + d  # projection weight, bias and level tag
    n = lambda m: sum(p.numel() for p in m.parameters())
    assert n(full) - n(nfs) == per_level


def test_ablation_needs_three_seeds(data):
    man, motions = data
    with pytest.raises(ConfigError):
        run_ablation(man, motions, [0, 1])


def test_ablation_table(data):
    man, motions = data
    table = run_ablation(man, motions, [0, 1, 2], cfg(epochs=1), variants=("Full", "ExplicitOracle"))
    assert table.median("ExplicitOracle") == 1.0
    assert len(table.accuracy["Full"]) == 3
    assert table.reference == {"NoFeatureSelection": 0.607, "Full": 0.640}
    assert "Full" in table.to_text()


def test_trace_example(trained, data):
    man, motions = data
    e = man.split(Split.TEST)[0]
    tr = trace_example(trained.model, e, motions[e.motion_id])
    assert len(tr["steps"]) == len(e.program)
    for st in tr["steps"]:
        assert sum(st["level_weights"]) == pytest.approx(1, abs=1e-6)
        assert sum(map(sum, st["position_weights"])) == pytest.approx(1, abs=1e-6)
        assert len(st["position_weights"][0]) == len(tr["positions"])


def test_small_grad_check_passes():
    rep = end_to_end_grad_check(d=8, levels=1, steps=3, max_coords=3)
    assert rep.passed, rep.summary()
