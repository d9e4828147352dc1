"""Differentiable building blocks, gradient checking, AdamW and checkpoints.

Forward/backward come from torch autograd; everything the model needs goes
through the functions here so shapes are validated in one place. The
finite-difference harness in :func:`grad_check` never touches autograd's
internals and serves as the independent check on it.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .errors import FormatError, NonFiniteValue, ShapeError

# -- ops ----------------------------------------------------------------------------


def _need(cond, msg):
    if not cond:
        raise ShapeError(msg)


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W.T + b`` with W shaped (out, in)."""
    _need(W.dim() == 2 and x.shape[-1] == W.shape[1],
          f"linear: input dim {tuple(x.shape)} vs weight {tuple(W.shape)}")
    _need(b is None or b.shape == (W.shape[0],), "linear: bias shape mismatch")
    y = x @ W.transpose(0, 1)
    return y + b if b is not None else y


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    _need(table.dim() == 2, "embedding table must be 2-D")
    if ids.numel():
        _need(int(ids.min()) >= 0 and int(ids.max()) < table.shape[0], "embedding id out of range")
    return table[ids]


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        _need(gain.shape == x.shape[-1:], "layer_norm: gain shape mismatch")
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def dropout(x: Tensor, p: float, train: bool, generator: Optional[torch.Generator] = None) -> Tensor:
    if not train or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def softmax_rows(x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, True = keep) zeroes entries."""
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    m = x.max(-1, keepdim=True).values
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m.detach())
    return e / e.sum(-1, keepdim=True)


def log_softmax(x: Tensor) -> Tensor:
    m = x.max(-1, keepdim=True).values.detach()
    z = x - m
    return z - torch.log(torch.exp(z).sum(-1, keepdim=True))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]``; 1-D logits take a scalar target."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        target = torch.as_tensor([int(target)])
    target = torch.as_tensor(target, dtype=torch.long)
    _need(logits.dim() == 2 and target.shape == (logits.shape[0],),
          f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(target.shape)}")
    _need(bool(((target >= 0) & (target < logits.shape[1])).all()), "cross_entropy: target out of range")
    lp = log_softmax(logits)
    return -lp.gather(1, target.unsqueeze(1)).mean()


def attention(Q: Tensor, K: Tensor, V: Tensor, mask: Optional[Tensor] = None):
    """Scaled dot-product attention over the last two axes.

    Q: (..., n, d), K: (..., m, d), V: (..., m, dv); mask broadcastable to
    (..., n, m) with True marking visible keys. Returns (output, weights).
    """
    _need(Q.shape[-1] == K.shape[-1], f"attention: query dim {Q.shape[-1]} != key dim {K.shape[-1]}")
    _need(K.shape[-2] == V.shape[-2], f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    w = softmax_rows(scores, mask)
    return w @ V, w


# -- parameters ---------------------------------------------------------------------

def decay_eligible(name: str, p: Tensor) -> bool:
    """Matrices decay; biases, norm gains and other vectors do not."""
    return p.dim() >= 2 and not name.endswith(("bias", "gain"))


@dataclass
class ParamRegistry:
    params: dict  # name -> nn.Parameter
    decay: dict  # name -> bool

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamRegistry":
        params = dict(module.named_parameters())
        return cls(params, {n: decay_eligible(n, p) for n, p in params.items()})

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def count(self) -> int:
        return sum(p.numel() for p in self.params.values())


class AdamW:
    """Adam with decoupled weight decay on decay-eligible tensors only."""

    def __init__(self, registry: ParamRegistry, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.registry = registry
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in registry}
        self.v = {n: torch.zeros_like(p) for n, p in registry}

    @torch.no_grad()
    def step(self, grads: Optional[dict] = None) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.registry:
            g = grads[name] if grads is not None else p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            if self.weight_decay and self.registry.decay[name]:
                p.mul_(1 - self.lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adamw_step(registry: ParamRegistry, grads: dict, lr, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=1e-4, state: Optional[AdamW] = None) -> AdamW:
    """Functional form: applies one update and returns the optimizer state."""
    opt = state or AdamW(registry, lr, betas, eps, weight_decay)
    opt.lr, opt.weight_decay = lr, weight_decay
    opt.step(grads)
    return opt


# -- gradient check -----------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict  # tensor name -> max relative error over checked coordinates
    checked: dict  # tensor name -> number of coordinates checked
    tol: float
    failed: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e} tol={self.tol:.1e}"]
        for name, e in self.errors.items():
            flag = "  <-- FAIL" if name in self.failed else ""
            lines.append(f"  {name:48s} {e:.3e} ({self.checked[name]} coords){flag}")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    fn: Callable[[], Tensor],
    params: ParamRegistry | dict,
    eps: float = 1e-6,
    tol: float = 1e-6,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``fn`` must be a deterministic closure returning a scalar. Tensors with
    more than ``max_coords`` entries are checked on a random coordinate
    sample of that size.
    """
    items = list(params.params.items() if isinstance(params, ParamRegistry) else params.items())
    for _, p in items:
        p.grad = None
    loss = fn()
    if not torch.isfinite(loss):
        raise NonFiniteValue(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in items], allow_unused=True)
    rng = np.random.default_rng(seed)
    errors, checked, failed = {}, {}, []
    with torch.no_grad():
        for (name, p), g in zip(items, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteValue(f"non-finite loss while perturbing {name}[{i}]")
                num = (up - down) / (2 * eps)
                worst = max(worst, relative_error(gflat[i].item(), num, floor))
            errors[name] = worst
            checked[name] = len(idx)
            if worst >= tol:
                failed.append(name)
    return GradCheckReport(errors, checked, tol, failed)


# -- checkpoint container -----------------------------------------------------------

CKPT_MAGIC = b"IMOC"
CKPT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def save_tensors(path, tensors: dict, meta: Optional[dict] = None) -> Path:
    """Write named tensors: header, JSON metadata, then (name, dtype, shape, raw LE values)."""
    buf = io.BytesIO()
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(meta_blob)))
    buf.write(meta_blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        code, np_dt = _DTYPES[t.dtype]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(np_dt, copy=False).tobytes())
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_tensors(path):
    raw = Path(path).read_bytes()
    try:
        magic, version, mlen = struct.unpack_from("<4sII", raw, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt, np_dt = _CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dt).itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(raw, dtype=np_dt, count=nbytes // np.dtype(np_dt).itemsize, offset=off)
            out[name] = torch.from_numpy(arr.reshape(shape).copy())
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out, meta
