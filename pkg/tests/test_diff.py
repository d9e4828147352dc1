import math

import pytest
import torch
from torch import nn

from imore import diff
from imore.errors import FormatError, ShapeError


@pytest.fixture(autouse=True, scope="module")
def _float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def fd_grad(f, x, eps=1e-5):
    """Central differences of scalar f at every coordinate of x."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        g.view(-1)[i] = (up - down) / (2 * eps)
    return g


def max_rel(a, b, floor=1e-6):
    return float(((a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(floor))).max())


# -- ops -----------------------------------------------------------------------------


def test_softmax_rows_sum_to_one():
    gen = torch.Generator().manual_seed(0)
    for scale in (1e-3, 1.0, 50.0, 1e4):
        x = torch.randn(7, 13, generator=gen) * scale
        assert torch.allclose(diff.softmax_rows(x).sum(-1), torch.ones(7), atol=1e-6)


def test_softmax_rows_mask():
    x = torch.randn(3, 5)
    mask = torch.tensor([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 1]]).bool()
    w = diff.softmax_rows(x, mask)
    assert torch.all(w[~mask] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(3), atol=1e-12)
    assert w[2, 4] == 1.0


def test_cross_entropy_confident_is_zero():
    logits = torch.tensor([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    assert diff.cross_entropy(logits, [0, 2]).item() < 1e-20
    assert diff.cross_entropy(torch.tensor([0.0, 60.0]), 1).item() < 1e-20


def test_cross_entropy_matches_definition():
    logits = torch.randn(4, 6)
    tgt = [1, 0, 5, 2]
    ref = -sum(math.log(math.exp(logits[i, t]) / sum(math.exp(v) for v in logits[i])) for i, t in enumerate(tgt)) / 4
    assert diff.cross_entropy(logits, tgt).item() == pytest.approx(ref, rel=1e-12)


def test_cross_entropy_gradient_finite_differences():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(5, 7, generator=gen, requires_grad=True)
    tgt = [0, 3, 6, 2, 2]
    diff.cross_entropy(x, tgt).backward()
    num = fd_grad(lambda z: diff.cross_entropy(z, tgt), x.detach().clone())
    assert max_rel(x.grad, num) < 1e-6


def test_cross_entropy_shape_errors():
    with pytest.raises(ShapeError):
        diff.cross_entropy(torch.randn(2, 3), [0, 1, 2])
    with pytest.raises(ShapeError):
        diff.cross_entropy(torch.randn(2, 3), [0, 3])


def test_attention_degenerate_single_key():
    Q = torch.randn(4, 8)
    K = torch.randn(1, 8)
    V = torch.randn(1, 5)
    out, w = diff.attention(Q, K, V)
    assert torch.allclose(out, V.expand(4, 5))
    assert torch.all(w == 1)


def test_attention_orthogonal_query_is_uniform():
    Q = torch.tensor([[0.0, 0.0, 1.0]])
    K = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [-3.0, 1.0, 0.0], [0.5, 0.5, 0.0]])
    V = torch.randn(4, 2)
    out, w = diff.attention(Q, K, V)
    assert torch.allclose(w, torch.full((1, 4), 0.25), atol=1e-15)
    assert torch.allclose(out, V.mean(0, keepdim=True))


def test_attention_gradient_finite_differences():
    gen = torch.Generator().manual_seed(2)
    Q, K, V = (torch.randn(3, 4, generator=gen), torch.randn(5, 4, generator=gen), torch.randn(5, 2, generator=gen))
    C = torch.randn(3, 2, generator=gen)
    for which in range(3):
        args = [Q.clone(), K.clone(), V.clone()]
        args[which].requires_grad_(True)
        loss = (diff.attention(*args)[0] * C).sum()
        loss.backward()

        def f(z, which=which):
            a = [Q, K, V]
            a[which] = z
            return (diff.attention(*a)[0] * C).sum()

        num = fd_grad(f, args[which].detach().clone())
        assert max_rel(args[which].grad, num) < 1e-5


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        diff.attention(torch.randn(2, 3), torch.randn(4, 5), torch.randn(4, 2))
    with pytest.raises(ShapeError):
        diff.attention(torch.randn(2, 3), torch.randn(4, 3), torch.randn(5, 2))


def test_layer_norm_and_dropout():
    x = torch.randn(6, 10) * 4 + 3
    y = diff.layer_norm(x)
    assert torch.allclose(y.mean(-1), torch.zeros(6), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(6), atol=1e-4)
    assert diff.dropout(x, 0.5, train=False) is x
    g = torch.Generator().manual_seed(0)
    d = diff.dropout(torch.ones(10000), 0.25, True, g)
    assert set(torch.unique(d).tolist()) <= {0.0, 1 / 0.75}
    assert abs(float((d == 0).double().mean()) - 0.25) < 0.02


def test_embedding_range_check():
    with pytest.raises(ShapeError):
        diff.embedding_lookup(torch.randn(4, 2), torch.tensor([0, 4]))


# -- grad_check harness ----------------------------------------------------------------


def test_grad_check_linear_toy_passes():
    gen = torch.Generator().manual_seed(3)
    W = nn.Parameter(torch.randn(3, 4, generator=gen))
    b = nn.Parameter(torch.randn(3, generator=gen))
    x = torch.randn(6, 4, generator=gen)
    rep = diff.grad_check(lambda: (torch.tanh(diff.linear(x, W, b)) ** 2).sum(), {"W": W, "b": b}, tol=1e-6)
    assert rep.passed, rep.summary()
    assert rep.checked == {"W": 12, "b": 3}


class _BrokenSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # should be 2x


def test_grad_check_names_corrupted_tensor():
    good = nn.Parameter(torch.randn(3))
    bad = nn.Parameter(torch.randn(3))
    rep = diff.grad_check(lambda: (good ** 2).sum() + _BrokenSquare.apply(bad).sum(), {"good": good, "bad": bad})
    assert not rep.passed
    assert rep.failed == ["bad"]
    assert "bad" in rep.summary() and "FAIL" in rep.summary()


def test_grad_check_samples_large_tensors():
    W = nn.Parameter(torch.randn(50, 50))
    rep = diff.grad_check(lambda: (W ** 3).sum(), {"W": W}, max_coords=10, tol=1e-5)
    assert rep.passed and rep.checked["W"] == 10


def test_relative_error_floor():
    assert diff.relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert diff.relative_error(2.0, 1.0) == 0.5


# -- optimizer -------------------------------------------------------------------------


def _registry(**params):
    module = nn.Module()
    for k, v in params.items():
        module.register_parameter(k, nn.Parameter(v))
    return diff.ParamRegistry.from_module(module)


def test_adamw_zero_grad_no_decay_is_identity():
    reg = _registry(w=torch.randn(3, 3), b=torch.randn(3))
    before = {n: p.detach().clone() for n, p in reg}
    opt = diff.AdamW(reg, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        opt.step({n: torch.zeros_like(p) for n, p in reg})
    assert all(torch.equal(before[n], p) for n, p in reg)


def test_adamw_default_weight_decay():
    reg = _registry(w=torch.randn(2, 2))
    assert diff.AdamW(reg).weight_decay == 1e-4


def test_adamw_two_steps_hand_computed():
    # p0 = 1, grads 0.5 then -0.25, lr 0.1, wd 0.01 (decoupled), betas (0.9, 0.999), eps 1e-8
    # step 1: p = 1 * (1 - 1e-3) - 0.1 * 0.5 / (0.5 + 1e-8)            = 0.899000002
    # step 2: m = 0.02, v = 3.1225e-4; m^ = 0.02 / 0.19, v^ = 3.1225e-4 / 0.001999
    #         p = 0.899000002 * 0.999 - 0.1 * m^ / (sqrt(v^) + 1e-8)   = 0.8714672987058...
    reg = _registry(w=torch.ones(1, 1))
    state = None
    expected = [0.899000002, 0.8714672987058463]
    for g, want in zip([0.5, -0.25], expected):
        state = diff.adamw_step(reg, {"w": torch.full((1, 1), g)}, lr=0.1, weight_decay=0.01, state=state)
        assert reg.params["w"].item() == pytest.approx(want, abs=1e-12)


def test_adamw_skips_decay_on_vectors():
    reg = _registry(w=torch.ones(2, 2), bias=torch.ones(2))
    assert reg.decay == {"w": True, "bias": False}
    opt = diff.AdamW(reg, lr=0.5, weight_decay=0.1)
    opt.step({n: torch.zeros_like(p) for n, p in reg})
    assert torch.allclose(reg.params["w"], torch.full((2, 2), 0.95))
    assert torch.equal(reg.params["bias"], torch.ones(2))


def test_adamw_shape_mismatch():
    reg = _registry(w=torch.ones(2, 2))
    with pytest.raises(ShapeError):
        diff.AdamW(reg).step({"w": torch.ones(3)})


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.randn(3, 4, dtype=torch.float32), "b": torch.randn(2, dtype=torch.float64),
               "c": torch.arange(5), "s": torch.tensor(2.5, dtype=torch.float32)}
    path = diff.save_tensors(tmp_path / "x.ckpt", tensors, {"k": [1, 2]})
    back, meta = diff.load_tensors(path)
    assert meta == {"k": [1, 2]}
    for k, t in tensors.items():
        assert back[k].dtype == t.dtype and torch.equal(back[k], t)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    t = {"z": torch.ones(2), "a": torch.zeros(3)}
    a = diff.save_tensors(tmp_path / "a", t, {"m": 1}).read_bytes()
    b = diff.save_tensors(tmp_path / "b", dict(reversed(list(t.items()))), {"m": 1}).read_bytes()
    assert a == b


@pytest.mark.parametrize("mutate", [
    lambda raw: raw[:-3],
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw + b"\0",
    lambda raw: raw[:8] + b"\xff\xff\xff\x7f" + raw[12:],
])
def test_corrupt_checkpoint_raises_format_error(tmp_path, mutate):
    path = diff.save_tensors(tmp_path / "c.ckpt", {"w": torch.randn(4, 4)}, {"a": 1})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        diff.load_tensors(path)
