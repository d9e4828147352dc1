"""The IMoRe network.

Pipeline for one example::

    motion window(s) --encoder--> levels h_i --fuse(text, qtype)--> W_i h_i + tag_i = pool
    program steps  --embed-->  P_1..P_p
    for each step: S'_i = Attn(P_{i+1}, memories at deps)      (dependency read)
                   S_{i+1} = Attn(S'_i, pool over all levels)  (program-guided read)
    S_p --branch head for the question type--> logits

Everything is batched: programs are padded to the longest one in the batch
and masked, windows from all examples are encoded together and regrouped
into per-example pools.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import diff
from .dataset import Tokenizer
from .errors import ConfigError, ShapeError
from .motion import BODY_GROUPS, NUM_JOINTS, REST_POSE, ROOT
from .program import Program, QuestionType
from .vocab import ConceptKind, ConceptVocabulary

STEP_OPS = (
    "filter_action", "filter_direction", "filter_body_part",
    "relate_before", "relate_after", "relate_between",
    "query_action", "query_direction", "query_body_part",
)
QTYPE_PHRASES = {
    QuestionType.QUERY_ACTION: "query action",
    QuestionType.QUERY_DIRECTION: "query direction",
    QuestionType.QUERY_BODY_PART: "query body part",
}
FINAL = "final"
FEATURE_SCALE = 5.0  # displacements are ~0.2 m; bring them to unit scale


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 1
    window: int = 64
    patch: int = 8
    layers: int = 4
    level_ids: tuple = (0, 1, 2, 3, FINAL)
    text_layers: int = 1
    dropout: float = 0.1
    mlp_ratio: int = 2
    dep_mask: str = "deps"  # "deps" | "all_prior"
    control: str = "program"  # "program" | "mac"
    max_steps: int = 8
    op_query: bool = False  # per-op linear map on the pool-read query
    cosine_read: bool = False  # cosine attention for the pool read

    def __post_init__(self):
        self.level_ids = tuple(self.level_ids)
        if self.window <= 0:
            raise ConfigError("window length must be positive")
        if self.window % self.patch:
            raise ConfigError("window must be a multiple of the patch length")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by the head count")
        if not self.level_ids:
            raise ConfigError("at least one pool level is required")
        for lid in self.level_ids:
            if lid != FINAL and not (0 <= int(lid) < self.layers):
                raise ConfigError(f"level id {lid} outside 0..{self.layers - 1}")

    def to_mapping(self) -> dict:
        m = asdict(self)
        m["level_ids"] = list(self.level_ids)
        return m

    @classmethod
    def from_mapping(cls, m: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(m) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        m = dict(m)
        if "level_ids" in m:
            m["level_ids"] = tuple(x if x == FINAL else int(x) for x in m["level_ids"])
        return cls(**m)


# -- layers -----------------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, d_in, d_out, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(d_in))

    def forward(self, x):
        return diff.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return diff.layer_norm(x, self.gain, self.bias)


class Embedding(nn.Module):
    def __init__(self, n, d, std=0.5):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n, d) * std)

    def forward(self, ids):
        return diff.embedding_lookup(self.weight, ids)


class Attention(nn.Module):
    """Projected scaled dot-product attention; weights are averaged over heads."""

    def __init__(self, d, heads=1, cosine=False, temperature=10.0):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.o = Linear(d, d)
        # cosine attention: unit-norm queries/keys and a learned log-temperature
        self.cosine = cosine
        if cosine:
            self.log_temp = nn.Parameter(torch.tensor(math.log(temperature)))

    def _split(self, x):
        B, n, d = x.shape
        return x.view(B, n, self.heads, d // self.heads).transpose(1, 2)

    def project_kv(self, kv_in):
        """Key/value projections, reusable across several queries of the same memory."""
        K = self._split(self.k(kv_in))
        if self.cosine:
            K = K / K.norm(dim=-1, keepdim=True).clamp_min(1e-6)
        return K, self._split(self.v(kv_in))

    def attend(self, q_in, kv, mask=None):
        # q_in (B, n, d); kv from project_kv; mask broadcastable to (B, n, m)
        B, n, d = q_in.shape
        K, V = kv
        if mask is not None:
            mask = mask.unsqueeze(1)
        Q = self._split(self.q(q_in))
        if self.cosine:
            # diff.attention divides by sqrt(dk); fold that back into the temperature
            Q = Q / Q.norm(dim=-1, keepdim=True).clamp_min(1e-6) * (self.log_temp.exp() * math.sqrt(Q.shape[-1]))
        out, w = diff.attention(Q, K, V, mask)
        out = out.transpose(1, 2).reshape(B, n, d)
        return self.o(out), w.mean(1)

    def forward(self, q_in, kv_in, mask=None):
        return self.attend(q_in, self.project_kv(kv_in), mask)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d, heads, mlp_ratio, p):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, d * mlp_ratio)
        self.fc2 = Linear(d * mlp_ratio, d)
        self.p = p

    def forward(self, x, mask=None, gen=None):
        train = self.training
        a, _ = self.attn(self.ln1(x), self.ln1(x), mask)
        x = x + diff.dropout(a, self.p, train, gen)
        h = self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))
        return x + diff.dropout(h, self.p, train, gen)


def sinusoid(positions: Tensor, d: int) -> Tensor:
    """Sinusoidal encoding of (possibly fractional) positions, shape (..., d)."""
    half = d // 2
    freq = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=positions.dtype) / max(half, 1))
    ang = positions.unsqueeze(-1) * freq
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    if enc.shape[-1] < d:
        enc = torch.cat([enc, torch.zeros(*enc.shape[:-1], d - enc.shape[-1], dtype=enc.dtype)], -1)
    return enc


# -- encoders ---------------------------------------------------------------------


class MotionEncoder(nn.Module):
    """Body-part x temporal-patch tokens through a small transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.groups = BODY_GROUPS
        self.patch_embed = nn.ModuleList(
            Linear(len(g) * cfg.patch * 3, cfg.d) for g in self.groups
        )
        self.group_embed = Embedding(len(self.groups), cfg.d, std=0.1)
        self.blocks = nn.ModuleList(
            Block(cfg.d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.layers)
        )
        self.ln_f = LayerNorm(cfg.d)

    @property
    def tokens_per_window(self) -> int:
        return len(self.groups) * (self.cfg.window // self.cfg.patch)

    def features(self, windows: Tensor) -> Tensor:
        """Per-frame inputs: joint displacement from the rest pose, root-relative.

        The root itself is centred per patch horizontally; its height is kept.
        """
        B, W, J, _ = windows.shape
        P = self.cfg.patch
        root = windows[:, :, ROOT]
        rel = windows - root.unsqueeze(2)
        r = root.view(B, W // P, P, 3)
        centred = r - r.mean(2, keepdim=True)
        centred = torch.stack([centred[..., 0], r[..., 1], centred[..., 2]], dim=-1)
        rest = torch.as_tensor(REST_POSE - REST_POSE[ROOT], dtype=windows.dtype)
        rel = rel - rest
        rel[:, :, ROOT] = centred.view(B, W, 3) - torch.as_tensor(REST_POSE[ROOT], dtype=windows.dtype)
        return rel * FEATURE_SCALE

    def embed(self, windows: Tensor, starts: Tensor) -> Tensor:
        """Token embeddings before any transformer block: (B, G*Np, d)."""
        B, W, J, _ = windows.shape
        if W != self.cfg.window or J != NUM_JOINTS:
            raise ShapeError(f"window must be {self.cfg.window} x {NUM_JOINTS} x 3, got {tuple(windows.shape)}")
        P = self.cfg.patch
        Np = W // P
        x = self.features(windows)
        toks = []
        for gi, joints in enumerate(self.groups):
            g = x[:, :, list(joints)]  # (B, W, jg, 3)
            g = g.view(B, Np, P * len(joints) * 3)
            toks.append(self.patch_embed[gi](g) + self.group_embed.weight[gi])
        tok = torch.stack(toks, dim=1)  # (B, G, Np, d)
        pos = starts.to(windows.dtype).unsqueeze(1) / P + torch.arange(Np, dtype=windows.dtype)
        tok = tok + sinusoid(pos, self.cfg.d).unsqueeze(1)
        return tok.reshape(B, len(self.groups) * Np, self.cfg.d)

    def forward(self, windows: Tensor, starts: Tensor, gen=None) -> list[Tensor]:
        x = self.embed(windows, starts)
        outs = {}
        for i, blk in enumerate(self.blocks):
            x = blk(x, gen=gen)
            outs[i] = x
        outs[FINAL] = self.ln_f(x)
        return [outs[lid] for lid in self.cfg.level_ids]


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = Embedding(vocab_size, cfg.d, std=0.5)
        self.blocks = nn.ModuleList(
            Block(cfg.d, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.text_layers)
        )
        self.ln = LayerNorm(cfg.d)

    def forward(self, ids: Tensor, mask: Tensor, gen=None) -> Tensor:
        x = self.embed(ids)
        x = x + sinusoid(torch.arange(ids.shape[1], dtype=x.dtype), self.cfg.d)
        for blk in self.blocks:
            x = blk(x, mask.unsqueeze(1), gen=gen)
        if not self.blocks:
            # mean-pool mode: one summary token per question
            m = mask.unsqueeze(-1).to(x.dtype)
            x = (x * m).sum(1, keepdim=True) / m.sum(1, keepdim=True)
            return self.ln(x)
        return self.ln(x)


class Fusion(nn.Module):
    """Text-aware motion features, then question-type fusion; residual + norm after each."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.text_attn = Attention(cfg.d, cfg.heads)
        self.ln_text = LayerNorm(cfg.d)
        self.qtype_attn = Attention(cfg.d, cfg.heads)
        self.ln_qtype = LayerNorm(cfg.d)
        self.p = cfg.dropout

    def forward(self, f_m, f_t, text_mask, q_feats, q_mask, gen=None):
        train = self.training
        a, w_text = self.text_attn(f_m, f_t, text_mask.unsqueeze(1))
        h = self.ln_text(f_m + diff.dropout(a, self.p, train, gen))
        b, w_q = self.qtype_attn(h, q_feats, q_mask.unsqueeze(1))
        h = self.ln_qtype(h + diff.dropout(b, self.p, train, gen))
        return h, (w_text, w_q)


# -- full model -------------------------------------------------------------------


@dataclass
class StepTrace:
    index: int
    op: str
    concept: Optional[str]
    deps: tuple
    dep_weights: list  # over memory slots [S_0, S_1, ...]
    level_weights: list  # marginal per pool level
    position_weights: list  # per level, per position


@dataclass
class MemoryTrace:
    S0: list
    refined: list  # S'_i per step
    memories: list  # S_i per step
    steps: list[StepTrace]
    level_ids: list


@dataclass
class AnswerLogits:
    branch: QuestionType
    logits: Tensor

    def argmax(self) -> int:
        return int(self.logits.argmax())


@dataclass
class Batch:
    windows: Tensor  # (Nw, W, J, 3)
    starts: Tensor  # (Nw,)
    window_owner: list  # example index per window
    text_ids: Tensor
    text_mask: Tensor
    step_ops: Tensor  # (B, pmax)
    step_concepts: Tensor  # (B, pmax)
    dep_mask: Tensor  # (B, pmax, pmax + 1)
    lengths: Tensor  # (B,)
    qtypes: list
    programs: list


class IMoRe(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: ConceptVocabulary, tokenizer: Tokenizer, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.tokenizer = tokenizer
        torch.manual_seed(seed)
        d = cfg.d
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.motion_encoder = MotionEncoder(cfg)
        self.text_encoder = TextEncoder(len(tokenizer), cfg)
        self.fusion = Fusion(cfg)
        M = len(cfg.level_ids)
        self.level_proj = nn.ModuleList(Linear(d, d) for _ in range(M))
        self.level_tag = Embedding(M, d, std=0.1)
        # program embedding
        self.concepts = [c for c in vocab.all_concepts()]
        self.concept_index = {c: i + 1 for i, c in enumerate(self.concepts)}  # 0 = no concept
        self.op_embed = Embedding(len(STEP_OPS), d)
        self.concept_embed = Embedding(len(self.concepts) + 1, d)
        self.concept_proj = Linear(d, d)
        self.ln_prog = LayerNorm(d)
        if cfg.control == "mac":
            self.step_query = Embedding(cfg.max_steps, d)
            self.ctrl_proj = Linear(2 * d, d)
            self.ctrl_attn = Attention(d, cfg.heads)
            self.ln_ctrl = LayerNorm(d)
        elif cfg.control != "program":
            raise ConfigError(f"unknown control mode {cfg.control!r}")
        # reasoning
        self.S0 = nn.Parameter(torch.randn(d) * 0.5)
        self.dep_attn = Attention(d, cfg.heads)
        self.ln_dep = LayerNorm(d)
        self.read_attn = Attention(d, cfg.heads, cosine=cfg.cosine_read)
        self.ln_read = LayerNorm(d)
        if cfg.op_query:
            self.op_query = nn.Parameter(torch.zeros(len(STEP_OPS), d, d))
        # classifier branches
        self.answer_labels = {qt: vocab.labels(qt.answer_kind) for qt in QuestionType}
        self.heads = nn.ModuleDict({
            qt.value: nn.Sequential(Linear(d, d), nn.GELU(), Linear(d, len(self.answer_labels[qt])))
            for qt in QuestionType
        })
        qtype_ids = [tokenizer.encode(QTYPE_PHRASES[qt]) for qt in QuestionType]
        L = max(len(x) for x in qtype_ids)
        self.register_buffer("qtype_ids", torch.tensor([x + [0] * (L - len(x)) for x in qtype_ids]), persistent=False)
        self.register_buffer("qtype_mask", torch.tensor([[1] * len(x) + [0] * (L - len(x)) for x in qtype_ids]).bool(), persistent=False)

    # -- batching ------------------------------------------------------------

    def program_tensors(self, programs: Sequence[Program]):
        B = len(programs)
        pmax = max(len(p) for p in programs)
        if pmax > self.cfg.max_steps:
            raise ShapeError(f"program with {pmax} steps exceeds max_steps={self.cfg.max_steps}")
        ops = torch.zeros(B, pmax, dtype=torch.long)
        concepts = torch.zeros(B, pmax, dtype=torch.long)
        deps = torch.zeros(B, pmax, pmax + 1, dtype=torch.bool)
        for b, prog in enumerate(programs):
            for step in prog.steps:
                ops[b, step.index] = STEP_OPS.index(step.op)
                if step.concept is not None:
                    concepts[b, step.index] = self.concept_index[step.concept]
                if self.cfg.control == "mac":
                    deps[b, step.index, step.index] = True  # previous memory (S_0 for step 0)
                elif self.cfg.dep_mask == "all_prior":
                    deps[b, step.index, : step.index + 1] = True
                elif step.deps:
                    for dpi in step.deps:
                        deps[b, step.index, dpi + 1] = True
                else:
                    deps[b, step.index, 0] = True
            for i in range(len(prog), pmax):  # padding steps read S_0 only
                deps[b, i, 0] = True
        lengths = torch.tensor([len(p) for p in programs])
        return ops, concepts, deps, lengths

    def text_tensors(self, questions: Sequence[str]):
        ids = [self.tokenizer.encode(q) for q in questions]
        L = max(len(x) for x in ids)
        t = torch.tensor([x + [0] * (L - len(x)) for x in ids])
        mask = torch.tensor([[1] * len(x) + [0] * (L - len(x)) for x in ids]).bool()
        return t, mask

    def make_batch(self, items) -> Batch:
        """``items``: sequence of (windows (n, W, J, 3) array, starts, question, program)."""
        wins, starts, owner = [], [], []
        for b, (w, s, _, _) in enumerate(items):
            w = torch.as_tensor(np.asarray(w))
            wins.append(w)
            starts.extend(int(x) for x in s)
            owner.extend([b] * w.shape[0])
        dtype = next(self.parameters()).dtype
        windows = torch.cat(wins, 0).to(dtype)
        text_ids, text_mask = self.text_tensors([it[2] for it in items])
        programs = [it[3] for it in items]
        ops, concepts, deps, lengths = self.program_tensors(programs)
        return Batch(windows, torch.tensor(starts), owner, text_ids, text_mask, ops, concepts, deps,
                     lengths, [p.question_type for p in programs], programs)

    # -- pieces ----------------------------------------------------------------

    def embed_program(self, ops: Tensor, concepts: Tensor) -> Tensor:
        c = self.concept_proj(self.concept_embed(concepts))
        return self.ln_prog(self.op_embed(ops) + c)

    def encode_text(self, ids, mask):
        return self.text_encoder(ids, mask, self.gen)

    def encode_qtype(self):
        return self.text_encoder(self.qtype_ids, self.qtype_mask, self.gen)

    def encode_windows(self, batch: Batch) -> list[Tensor]:
        return self.motion_encoder(batch.windows, batch.starts, self.gen)

    def build_pool(self, batch: Batch, f_t, text_mask):
        """Encode windows, regroup per example, fuse with text/qtype, project per level."""
        levels = self.encode_windows(batch)
        self.last_encoded = levels[-1]  # kept for training-time auxiliary losses
        B = len(batch.qtypes)
        N = self.motion_encoder.tokens_per_window
        counts = np.bincount(batch.window_owner, minlength=B)
        nmax = int(counts.max()) * N
        M = len(levels)
        d = self.cfg.d
        dtype = levels[0].dtype
        pos_mask = torch.zeros(B, nmax, dtype=torch.bool)
        Np = self.cfg.window // self.cfg.patch
        tok_pos = batch.starts.to(dtype).unsqueeze(1) / self.cfg.patch + torch.arange(Np, dtype=dtype)
        tok_pos = tok_pos.unsqueeze(1).expand(-1, len(self.motion_encoder.groups), Np).reshape(-1, N)
        positions = torch.zeros(B, nmax, dtype=dtype)
        rows = []
        for b in range(B):
            idx = [i for i, o in enumerate(batch.window_owner) if o == b]
            per_level = []
            for lev in levels:
                x = lev[idx].reshape(len(idx) * N, d)
                if x.shape[0] < nmax:
                    x = torch.cat([x, torch.zeros(nmax - x.shape[0], d, dtype=dtype)], 0)
                per_level.append(x)
            rows.append(torch.stack(per_level, 0))
            pos_mask[b, : len(idx) * N] = True
            positions[b, : len(idx) * N] = tok_pos[idx].reshape(-1)
        f_m = torch.stack(rows, 0)  # (B, M, nmax, d)
        q_all = self.encode_qtype()  # (3, Lq, d)
        qidx = torch.tensor([list(QuestionType).index(q) for q in batch.qtypes])
        q_feats = q_all[qidx]
        q_mask = self.qtype_mask[qidx]
        rep = lambda t: t.unsqueeze(1).expand(B, M, *t.shape[1:]).reshape(B * M, *t.shape[1:])
        h, fusion_w = self.fusion(
            f_m.reshape(B * M, nmax, d), rep(f_t), rep(text_mask), rep(q_feats), rep(q_mask), self.gen,
        )
        h = h.view(B, M, nmax, d)
        # temporal position is re-added after fusion so memory reads can carry "when"
        pos_enc = sinusoid(positions, d)
        proj = [self.level_proj[i](h[:, i]) + self.level_tag.weight[i] + pos_enc for i in range(M)]
        pool = torch.cat(proj, dim=1)  # (B, M * nmax, d)
        pool_mask = pos_mask.repeat(1, M)
        return pool, pool_mask, (M, nmax), fusion_w

    def mac_control(self, f_t, text_mask, pmax):
        B = f_t.shape[0]
        c = torch.zeros(B, self.cfg.d, dtype=f_t.dtype)
        out = []
        for i in range(pmax):
            q = self.ctrl_proj(torch.cat([self.step_query.weight[i].expand(B, -1), c], -1))
            a, _ = self.ctrl_attn(q.unsqueeze(1), f_t, text_mask.unsqueeze(1))
            c = self.ln_ctrl(q + a.squeeze(1))
            out.append(c)
        return torch.stack(out, 1)

    # -- forward ---------------------------------------------------------------

    def forward_batch(self, batch: Batch, keep_trace: bool = False):
        train = self.training
        p = self.cfg.dropout
        f_t = self.encode_text(batch.text_ids, batch.text_mask)
        pool, pool_mask, (M, npos), _ = self.build_pool(batch, f_t, batch.text_mask)
        if self.cfg.control == "mac":
            P = self.mac_control(f_t, batch.text_mask, batch.step_ops.shape[1])
        else:
            P = self.embed_program(batch.step_ops, batch.step_concepts)
        B, pmax, d = P.shape
        pool_kv = self.read_attn.project_kv(pool)
        mems = [self.S0.expand(B, d)]
        refined, dep_ws, read_ws = [], [], []
        for i in range(pmax):
            mem = torch.stack(mems + [torch.zeros(B, d, dtype=P.dtype)] * (pmax + 1 - len(mems)), 1)
            q = P[:, i : i + 1]
            a, w_dep = self.dep_attn(q, mem, batch.dep_mask[:, i : i + 1])
            s_ref = self.ln_dep(q + diff.dropout(a, p, train, self.gen))
            q_read = s_ref
            if self.cfg.op_query:
                q_read = s_ref + torch.einsum("bnd,bde->bne", s_ref, self.op_query[batch.step_ops[:, i]])
            r, w_read = self.read_attn.attend(q_read, pool_kv, pool_mask.unsqueeze(1))
            s_new = self.ln_read(s_ref + diff.dropout(r, p, train, self.gen))
            mems.append(s_new.squeeze(1))
            refined.append(s_ref.squeeze(1))
            dep_ws.append(w_dep.squeeze(1))
            read_ws.append(w_read.squeeze(1))
        self.last_reads = (read_ws, pool_mask, batch.lengths)  # kept for training-time regularizers
        memory = torch.stack(mems, 1)  # (B, pmax + 1, d)
        final = memory[torch.arange(B), batch.lengths]
        logits: list = [None] * B
        for qt in QuestionType:
            idx = [b for b, q in enumerate(batch.qtypes) if q is qt]
            if not idx:
                continue
            out = self.heads[qt.value](final[idx])
            for j, b in enumerate(idx):
                logits[b] = AnswerLogits(qt, out[j])
        traces = None
        if keep_trace:
            traces = [self._trace(b, batch, memory, refined, dep_ws, read_ws, M, npos, pool_mask)
                      for b in range(B)]
        return logits, traces

    def _trace(self, b, batch, memory, refined, dep_ws, read_ws, M, npos, pool_mask) -> MemoryTrace:
        prog = batch.programs[b]
        n = int(pool_mask[b, :npos].sum())
        steps = []
        for st in prog.steps:
            i = st.index
            w = read_ws[i][b].detach().view(M, npos)[:, :n]
            steps.append(StepTrace(
                index=i, op=st.op, concept=st.concept.label if st.concept else None, deps=tuple(st.deps),
                dep_weights=dep_ws[i][b, : i + 1].detach().tolist(),
                level_weights=w.sum(1).tolist(),
                position_weights=w.tolist(),
            ))
        p = len(prog)
        return MemoryTrace(
            S0=self.S0.detach().tolist(),
            refined=[refined[i][b].detach().tolist() for i in range(p)],
            memories=[memory[b, i + 1].detach().tolist() for i in range(p)],
            steps=steps,
            level_ids=[str(x) for x in self.cfg.level_ids],
        )

    def loss(self, logits: list, answers: Sequence) -> Tensor:
        """Mean cross-entropy over the active branch of each example."""
        total = 0.0
        for lg, ans in zip(logits, answers):
            target = self.answer_labels[lg.branch].index(ans.label)
            total = total + diff.cross_entropy(lg.logits, target)
        return total / len(logits)

    def answer_of(self, lg: AnswerLogits):
        from .vocab import Concept
        return Concept(lg.branch.answer_kind, self.answer_labels[lg.branch][lg.argmax()])


# -- windowing --------------------------------------------------------------------


def loop_pad(frames: np.ndarray, length: int) -> np.ndarray:
    if frames.shape[0] >= length:
        return frames
    reps = -(-length // frames.shape[0])
    return np.concatenate([frames] * reps, 0)[:length]


def mode_one_windows(frames: np.ndarray, W: int):
    """Consecutive W-frame windows covering the sequence; the last one right-aligned."""
    if W <= 0:
        raise ConfigError("window length must be positive")
    frames = loop_pad(frames, W)
    T = frames.shape[0]
    starts = list(range(0, T - W + 1, W))
    if starts[-1] + W < T:
        starts.append(T - W)
    return np.stack([frames[s : s + W] for s in starts]), starts


def sample_windows(frames: np.ndarray, W: int, runs: int, rng: np.random.Generator):
    if W <= 0:
        raise ConfigError("window length must be positive")
    frames = loop_pad(frames, W)
    T = frames.shape[0]
    starts = [int(rng.integers(0, T - W + 1)) for _ in range(runs)]
    return [(frames[s : s + W][None], [s]) for s in starts]


@torch.no_grad()
def infer_mode_I(model: IMoRe, frames: np.ndarray, question: str, program: Program) -> AnswerLogits:
    wins, starts = mode_one_windows(frames, model.cfg.window)
    batch = model.make_batch([(wins, starts, question, program)])
    logits, _ = model.forward_batch(batch)
    return logits[0]


@torch.no_grad()
def infer_mode_II(model: IMoRe, frames: np.ndarray, question: str, program: Program, runs: int = 5,
                  seed: int = 0, starts: Sequence[int] | None = None, score: str = "logit") -> AnswerLogits:
    """Best of ``runs`` random windows, ranked by max raw logit (or max probability)."""
    W = model.cfg.window
    if starts is not None:
        padded = loop_pad(frames, W)
        cands = [(padded[s : s + W][None], [s]) for s in starts]
    else:
        cands = sample_windows(frames, W, runs, np.random.default_rng(seed))
    best, best_score = None, -math.inf
    for wins, st in cands:
        batch = model.make_batch([(wins, st, question, program)])
        lg = model.forward_batch(batch)[0][0]
        s = lg.logits.max() if score == "logit" else torch.softmax(lg.logits, -1).max()
        if float(s) > best_score:
            best, best_score = lg, float(s)
    return best
