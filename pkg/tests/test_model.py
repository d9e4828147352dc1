import numpy as np
import pytest
import torch

from imore.dataset import Tokenizer, render_question
from imore.errors import ConfigError, ShapeError
from imore.model import (
    FINAL, IMoRe, ModelConfig, infer_mode_I, infer_mode_II, loop_pad, mode_one_windows, sample_windows,
)
from imore.motion import MotionConfig, generate_sequence
from imore.program import parse_program
from imore.vocab import ConceptVocabulary

VOCAB = ConceptVocabulary()
PROGS = [
    "query_action(relate(before, filter(left)))",
    "query_direction(relate(after, filter(jump)))",
    "query_body_part(relate(between, filter(walk), filter(squat)))",
    "query_action(relate(after, relate(before, filter(kick))))",
]
QUESTIONS = [
    "What action does the person do before they move left?",
    "Which direction does the person move after they jump?",
    "What body part does the person use between walking and squatting?",
    "What action does the person do after the action before kicking?",
]


def small_model(seed=0, dtype=torch.float32, **over):
    cfg = ModelConfig(**{**dict(d=16, heads=2, window=32, patch=8, layers=2, level_ids=(0, FINAL), dropout=0.0), **over})
    tok = Tokenizer.build(QUESTIONS + ["query action", "query direction", "query body part"])
    return IMoRe(cfg, VOCAB, tok, seed=seed).to(dtype).eval()


@pytest.fixture(scope="module")
def motion():
    return generate_sequence(0, MotionConfig(), "m0")


def items(model, motion, n=4):
    w, s = mode_one_windows(motion.frames, model.cfg.window)
    return [(w, s, QUESTIONS[i], parse_program(PROGS[i], VOCAB)) for i in range(n)]


# -- config ------------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(window=0)
    with pytest.raises(ConfigError):
        ModelConfig(window=30, patch=8)
    with pytest.raises(ConfigError):
        ModelConfig(level_ids=(7,))
    with pytest.raises(ConfigError):
        ModelConfig.from_mapping({"bogus": 1})
    assert ModelConfig.from_mapping(ModelConfig().to_mapping()) == ModelConfig()


def test_default_pool_is_intermediate_layers_plus_final():
    cfg = ModelConfig()
    assert cfg.window == 64 and cfg.d == 64 and cfg.layers == 4 and cfg.dropout == 0.1
    assert cfg.level_ids == (0, 1, 2, 3, FINAL)


# -- encoders ----------------------------------------------------------------------------


def test_encoder_levels_share_shape():
    model = small_model(layers=4, level_ids=(0, 1, 2, 3, FINAL))
    x = torch.randn(3, 32, 17, 3)
    levels = model.motion_encoder(x, torch.zeros(3))
    assert len(levels) == 5
    assert {tuple(h.shape) for h in levels} == {(3, model.motion_encoder.tokens_per_window, 16)}


def test_encoder_rejects_wrong_window():
    model = small_model()
    with pytest.raises(ShapeError):
        model.motion_encoder(torch.randn(1, 40, 17, 3), torch.zeros(1))


def test_patch_permutation_is_local():
    model = small_model()
    enc = model.motion_encoder
    x = torch.randn(1, 32, 17, 3)
    y = x.clone()
    y[0, 8:16] = x[0, torch.tensor([9, 8, 15, 10, 11, 14, 12, 13])]
    a = enc.embed(x, torch.zeros(1)).view(len(enc.groups), 4, 16)
    b = enc.embed(y, torch.zeros(1)).view(len(enc.groups), 4, 16)
    changed = (a - b).abs().amax(-1) > 1e-6
    assert changed[:, 1].all()
    assert not changed[:, [0, 2, 3]].any()


def test_text_encoder_identity_and_unknown_words():
    model = small_model()
    ids, mask = model.text_tensors([QUESTIONS[0], QUESTIONS[0], "What does a xylophone do?"])
    f_t = model.encode_text(ids, mask)
    assert f_t.shape == (3, ids.shape[1], 16)
    assert torch.equal(f_t[0], f_t[1])
    assert model.tokenizer.stoi["<unk>"] in ids[2].tolist()


def test_fusion_single_token_and_gradients():
    model = small_model()
    fus = model.fusion
    f_m = torch.randn(2, 5, 16, requires_grad=True)
    f_t = torch.randn(2, 1, 16, requires_grad=True)
    one = torch.ones(2, 1, dtype=torch.bool)
    a, _ = fus.text_attn(f_m, f_t, one.unsqueeze(1))
    expected = fus.text_attn.o(fus.text_attn.v(f_t))
    assert torch.allclose(a, expected.expand(2, 5, 16), atol=1e-6)
    h, _ = fus(f_m, f_t, one, torch.randn(2, 3, 16), torch.ones(2, 3, dtype=torch.bool))
    assert h.shape == f_m.shape
    (h * torch.randn_like(h)).sum().backward()
    assert f_m.grad.abs().sum() > 0 and f_t.grad.abs().sum() > 0


def test_program_embedding_locality():
    model = small_model()
    a = parse_program("query_action(relate(before, filter(jump)))", VOCAB)
    b = parse_program("query_action(relate(before, filter(kick)))", VOCAB)
    ops, cons, _, _ = model.program_tensors([a, b])
    P = model.embed_program(ops, cons)
    assert P.shape == (2, 3, 16)
    differs = (P[0] - P[1]).abs().amax(-1) > 1e-6
    assert differs.tolist() == [True, False, False]


def test_program_embedding_is_trainable(motion):
    model = small_model()
    logits, _ = model.forward_batch(model.make_batch(items(model, motion)))
    model.loss(logits, [model.answer_of(lg) for lg in logits]).backward()
    assert model.op_embed.weight.grad.abs().sum() > 0
    assert model.concept_embed.weight.grad.abs().sum() > 0


# -- reasoning ---------------------------------------------------------------------------


def test_trace_arity_and_row_sums(motion):
    model = small_model()
    logits, traces = model.forward_batch(model.make_batch(items(model, motion)), keep_trace=True)
    for prog, lg, tr in zip(PROGS, logits, traces):
        p = len(parse_program(prog, VOCAB))
        assert len(tr.refined) == len(tr.memories) == len(tr.steps) == p
        assert lg.logits.shape == (len(model.answer_labels[lg.branch]),)
        for st in tr.steps:
            assert sum(st.dep_weights) == pytest.approx(1, abs=1e-6)
            assert sum(st.level_weights) == pytest.approx(1, abs=1e-6)
            assert min(min(r) for r in st.position_weights) >= 0


def test_dependency_locality(motion):
    model = small_model()
    _, traces = model.forward_batch(model.make_batch(items(model, motion)), keep_trace=True)
    for tr in traces:
        for st in tr.steps:
            allowed = {d + 1 for d in st.deps} or {0}
            for slot, w in enumerate(st.dep_weights):
                assert (w > 0) == (slot in allowed), (st, slot)


def test_leaf_dependency_read_returns_s0_projection(motion):
    model = small_model()
    att = model.dep_attn
    q = torch.randn(1, 1, 16)
    out, w = att(q, model.S0.view(1, 1, 16))
    assert torch.allclose(out, att.o(att.v(model.S0.view(1, 1, 16))), atol=1e-6)
    assert w.item() == 1.0


def test_branch_exclusivity(motion):
    model = small_model()
    batch = model.make_batch(items(model, motion))
    before, _ = model.forward_batch(batch)
    with torch.no_grad():
        for p in model.heads["query_body_part"].parameters():
            p.add_(torch.randn_like(p))
    after, _ = model.forward_batch(batch)
    for a, b in zip(before, after):
        same = torch.equal(a.logits, b.logits)
        assert same == (a.branch.value != "query_body_part")


def test_batched_equals_single(motion):
    model = small_model(dtype=torch.float64)
    its = items(model, motion)
    batched, _ = model.forward_batch(model.make_batch(its))
    for it, lg in zip(its, batched):
        single, _ = model.forward_batch(model.make_batch([it]))
        assert torch.allclose(single[0].logits, lg.logits, atol=1e-10)


def test_mac_control_variant_runs(motion):
    model = small_model(control="mac")
    logits, traces = model.forward_batch(model.make_batch(items(model, motion)), keep_trace=True)
    assert len(logits) == 4 and all(lg.logits.isfinite().all() for lg in logits)


def test_too_long_program_rejected(motion):
    model = small_model(max_steps=2)
    with pytest.raises(ShapeError):
        model.make_batch(items(model, motion, 1))


# -- inference modes ---------------------------------------------------------------------


def test_windowing():
    f = np.arange(70)[:, None, None].repeat(17, 1).repeat(3, 2).astype(np.float32)
    w, s = mode_one_windows(f, 32)
    assert s == [0, 32, 38] and w.shape == (3, 32, 17, 3)
    assert w[-1, -1, 0, 0] == 69
    assert loop_pad(f[:10], 25)[20, 0, 0] == 0 and loop_pad(f[:10], 25).shape[0] == 25
    with pytest.raises(ConfigError):
        mode_one_windows(f, 0)
    starts = [x[1][0] for x in sample_windows(f, 32, 5, np.random.default_rng(0))]
    assert all(0 <= x <= 38 for x in starts)


def test_mode_one_and_two_agree_on_exact_window(motion):
    model = small_model()
    frames = motion.frames[:32]
    prog = parse_program(PROGS[0], VOCAB)
    a = infer_mode_I(model, frames, QUESTIONS[0], prog)
    b = infer_mode_II(model, frames, QUESTIONS[0], prog, runs=1, starts=[0])
    assert torch.equal(a.logits, b.logits)


def test_mode_two_deterministic_and_best_run(motion):
    model = small_model()
    prog = parse_program(PROGS[1], VOCAB)
    a = infer_mode_II(model, motion.frames, QUESTIONS[1], prog, runs=5, seed=3)
    b = infer_mode_II(model, motion.frames, QUESTIONS[1], prog, runs=5, seed=3)
    assert torch.equal(a.logits, b.logits)
    rng = np.random.default_rng(3)
    for wins, st in sample_windows(motion.frames, 32, 5, rng):
        single = infer_mode_II(model, motion.frames, QUESTIONS[1], prog, starts=st)
        assert a.logits.max() >= single.logits.max()
