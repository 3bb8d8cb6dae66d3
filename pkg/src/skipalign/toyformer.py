"""A small decoder-only RoPE transformer trained on response tokens only."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .rope import RopeParams, apply_rope, check_increasing, rope_angles

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skipalign-toy/1"


@dataclass
class ToyModelConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    head_dim: int = 32
    vocab_size: int = 256
    max_position: int = 4096
    lr: float = 1e-5
    epochs: int = 2
    seed: int = 0
    warmup_frac: float = 0.03
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    mlp_mult: int = 4
    theta_base: float = 10000.0
    rope_scale: float = 1.0
    num_threads: int = 1  # >1 trades bitwise determinism for speed
    log_every: int = 0

    def __post_init__(self):
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(f"model_dim ({self.model_dim}) must equal heads * head_dim ({self.heads}*{self.head_dim})")
        RopeParams(self.head_dim, self.theta_base, self.rope_scale)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.theta_base, self.rope_scale)


@dataclass
class TrainBatch:
    input_ids: torch.Tensor  # [B, T] long
    position_ids: torch.Tensor  # [B, T] long
    loss_mask: torch.Tensor  # [B, T] bool
    padding: torch.Tensor  # [B, T] bool, True on pad slots

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.input_ids, self.position_ids, self.loss_mask, self.padding)}
        if len(shapes) != 1:
            raise ValueError(f"batch tensors disagree in shape: {shapes}")
        check_increasing(self.position_ids, ~self.padding)

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask[:, 1:].sum())


def collate(records: Sequence, pad_id: int = 0) -> TrainBatch:
    """Right-pad records (anything with input_ids/position_ids/loss_mask)."""
    t = max(len(r.input_ids) for r in records)
    b = len(records)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    pos = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    pad = np.ones((b, t), dtype=bool)
    for i, r in enumerate(records):
        n = len(r.input_ids)
        ids[i, :n] = r.input_ids
        p = np.asarray(r.position_ids, dtype=np.int64)
        pos[i, :n] = p
        last = p[-1] if n else -1
        pos[i, n:] = last + 1 + np.arange(t - n)
        mask[i, :n] = r.loss_mask
        pad[i, :n] = False
    return TrainBatch(torch.from_numpy(ids), torch.from_numpy(pos), torch.from_numpy(mask), torch.from_numpy(pad))


def make_batches(records: Iterable, batch_size: int, pad_id: int = 0, sort_by_length: bool = False) -> list[TrainBatch]:
    records = list(records)
    if sort_by_length:
        records.sort(key=lambda r: len(r.input_ids))
    return [collate(records[i : i + batch_size], pad_id) for i in range(0, len(records), batch_size)]


class Attention(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim, bias=False)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim, bias=False)

    def forward(self, x, cos, sin, attn_mask):
        b, t, _ = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        if attn_mask is None:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(y.transpose(1, 2).reshape(b, t, -1))


class Block(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_dim)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.model_dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.mlp_mult * cfg.model_dim),
            nn.GELU(),
            nn.Linear(cfg.mlp_mult * cfg.model_dim, cfg.model_dim),
        )

    def forward(self, x, cos, sin, attn_mask):
        x = x + self.attn(self.ln1(x), cos, sin, attn_mask)
        return x + self.mlp(self.ln2(x))


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ToyModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, input_ids, position_ids, padding=None):
        b, t = input_ids.shape
        dtype = self.embed.weight.dtype
        cos, sin = rope_angles(position_ids, self.cfg.rope, dtype=dtype)
        cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
        # causal by sequence order, never by position value; without padding
        # the fused causal kernel is used
        mask = None
        if padding is not None and bool(padding.any()):
            mask = torch.ones(t, t, dtype=torch.bool, device=input_ids.device).tril()
            mask = mask & ~padding[:, None, None, :]
        x = self.embed(input_ids)
        for blk in self.blocks:
            x = blk(x, cos, sin, mask)
        return self.head(self.ln_f(x))


def masked_loss(model: ToyTransformer, batch: TrainBatch) -> torch.Tensor | None:
    """Mean next-token cross-entropy over response targets; None if there are none."""
    targets = batch.loss_mask[:, 1:]
    n = int(targets.sum())
    if n == 0:
        return None
    logits = model(batch.input_ids, batch.position_ids, batch.padding)[:, :-1]
    return F.cross_entropy(logits[targets], batch.input_ids[:, 1:][targets])


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, trace: list):
        self.step = step
        self.trace = trace
        super().__init__(f"non-finite loss at step {step}")


@contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, n))
    try:
        yield
    finally:
        torch.set_num_threads(old)


def lr_factor(step: int, total: int, warmup_frac: float) -> float:
    warm = max(1, int(math.ceil(warmup_frac * total))) if warmup_frac > 0 else 0
    if step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


@dataclass
class TrainResult:
    model: ToyTransformer
    trace: list[tuple[int, float]] = field(default_factory=list)


def train(batches: Sequence[TrainBatch], config: ToyModelConfig, model: ToyTransformer | None = None) -> TrainResult:
    """Train on ``epochs`` passes over ``batches`` with a reshuffled order each epoch.

    Linear warmup then linear decay.  Batches with no response targets are
    skipped without an optimizer step.
    """
    batches = list(batches)
    with _threads(config.num_threads):
        torch.manual_seed(config.seed)
        model = model or ToyTransformer(config)
        model.train()
        opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        total = config.epochs * len(batches)
        rng = np.random.default_rng(config.seed)
        trace: list[tuple[int, float]] = []
        step = 0
        for epoch in range(config.epochs):
            for j in rng.permutation(len(batches)):
                batch = batches[j]
                loss = masked_loss(model, batch)
                if loss is None:
                    step += 1
                    continue
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(step, trace)
                for g in opt.param_groups:
                    g["lr"] = config.lr * lr_factor(step, total, config.warmup_frac)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                trace.append((step, value))
                if config.log_every and step % config.log_every == 0:
                    logger.info("epoch %d step %d/%d loss %.4f", epoch, step, total, value)
                step += 1
        model.eval()
    return TrainResult(model, trace)


def save_checkpoint(model: ToyTransformer, path: str | Path) -> None:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
    }, path)


def load_checkpoint(path: str | Path) -> ToyTransformer:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
    model = ToyTransformer(ToyModelConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def write_trace(trace: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in trace:
            w.writerow([step, repr(loss)])


# -- evaluation ---------------------------------------------------------------

DEFAULT_BUCKETS = (0, 512, 1408, 2304, 3200, 4096)


@torch.no_grad()
def answer_correct(model: ToyTransformer, case) -> bool:
    """Teacher-forced argmax over the answer span.

    Equal to exact match under greedy decoding: greedy reproduces the gold
    span iff each gold token is the argmax given the gold prefix.
    """
    ids = torch.as_tensor(np.asarray(case.input_ids), dtype=torch.long)[None]
    pos = torch.as_tensor(np.asarray(case.position_ids), dtype=torch.long)[None]
    a, n = case.answer_start, case.answer_len
    logits = model(ids[:, : a + n - 1], pos[:, : a + n - 1])[0]
    pred = logits[a - 1 : a + n - 1].argmax(-1)
    return bool(torch.equal(pred, ids[0, a : a + n]))


@torch.no_grad()
def greedy_generate(model: ToyTransformer, prompt_ids, max_new: int, position_ids=None) -> list[int]:
    ids = list(int(i) for i in prompt_ids)
    pos = list(range(len(ids))) if position_ids is None else [int(p) for p in position_ids]
    out = []
    for _ in range(max_new):
        logits = model(torch.tensor([ids]), torch.tensor([pos]))[0, -1]
        nxt = int(logits.argmax())
        out.append(nxt)
        ids.append(nxt)
        pos.append(pos[-1] + 1 if pos else 0)
    return out


def evaluate_retrieval(model: ToyTransformer, cases: Iterable, bucket_edges: Sequence[int] = DEFAULT_BUCKETS) -> list[dict]:
    """Exact-match accuracy per distance bucket ``(edges[i], edges[i+1]]``.

    Only buckets that received cases are reported.
    """
    edges = list(bucket_edges)
    hits = [0] * (len(edges) - 1)
    seen = [0] * (len(edges) - 1)
    model.eval()
    with _threads(model.cfg.num_threads):
        for case in cases:
            d = case.distance
            for i in range(len(edges) - 1):
                if edges[i] < d <= edges[i + 1]:
                    seen[i] += 1
                    hits[i] += answer_correct(model, case)
                    break
    return [
        {"lo": edges[i], "hi": edges[i + 1], "n": seen[i], "correct": hits[i], "accuracy": hits[i] / seen[i]}
        for i in range(len(seen)) if seen[i]
    ]
