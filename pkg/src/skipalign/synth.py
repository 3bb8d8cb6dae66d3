"""Synthetic retrieval data: needle-in-a-haystack grids and toy key-value tasks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import string
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import ByteTokenizer, Block, Role, Sample, TokenizerPort

logger = logging.getLogger(__name__)

FILLER_SENTENCES = (
    "the grass is green.",
    "the sky is blue.",
    "the sun is warm today.",
    "a river runs past the old mill.",
    "birds sing in the morning.",
    "the road goes on and on.",
    "clouds drift over the hills.",
    "a cat sleeps by the door.",
    "the wind moves the tall trees.",
    "rain falls on the quiet town.",
    "the market opens at dawn.",
    "leaves turn brown in the fall.",
)


def _rng(*parts) -> np.random.Generator:
    key = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(key, "little")))


def filler_tokens(n: int, rng: np.random.Generator, tokenizer: TokenizerPort) -> list[int]:
    """Exactly ``n`` tokens of inert text, sentence order drawn from ``rng``."""
    out: list[int] = []
    while len(out) < n:
        for i in rng.permutation(len(FILLER_SENTENCES)):
            out.extend(tokenizer.encode(FILLER_SENTENCES[i] + " "))
            if len(out) >= n:
                break
    return out[:n]


# -- needle in a haystack -----------------------------------------------------

@dataclass
class NeedleCase:
    case_id: str
    context_len: int
    depth_pct: float
    haystack: list[int]
    needle: list[int]
    question: list[int]
    gold: list[int]
    repeat: int = 0

    @property
    def offset(self) -> int:
        return needle_offset(self.depth_pct, self.context_len, len(self.needle))

    @property
    def context(self) -> list[int]:
        off = self.offset
        return self.haystack[:off] + self.needle + self.haystack[off:]

    @property
    def prompt(self) -> list[int]:
        return self.context + self.question

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id, "context_len": self.context_len, "depth_pct": self.depth_pct,
            "repeat": self.repeat, "haystack": self.haystack, "needle": self.needle,
            "question": self.question, "gold": self.gold,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NeedleCase":
        return cls(obj["case_id"], int(obj["context_len"]), float(obj["depth_pct"]), list(obj["haystack"]),
                   list(obj["needle"]), list(obj["question"]), list(obj["gold"]), int(obj.get("repeat", 0)))


def needle_offset(depth_pct: float, context_len: int, needle_len: int) -> int:
    # round half up, so depth 50 of an odd span lands on the later slot
    return int(math.floor(depth_pct / 100.0 * (context_len - needle_len) + 0.5))


def generate_needles(
    lengths: Sequence[int],
    depths: Sequence[float],
    seed: int = 0,
    repeats: int = 1,
    tokenizer: TokenizerPort | None = None,
) -> Iterator[NeedleCase]:
    tok = tokenizer or ByteTokenizer()
    for n in lengths:
        if n <= 0:
            raise ValueError(f"context length must be positive, got {n}")
    for d in depths:
        if not 0 <= d <= 100:
            raise ValueError(f"depth must lie in [0, 100], got {d}")
    for n in lengths:
        for d in depths:
            for rep in range(repeats):
                rng = _rng("needle", seed, n, d, rep)
                key = "".join(rng.choice(list(string.ascii_uppercase), 4))
                value = "".join(rng.choice(list(string.digits), 7))
                needle = tok.encode(f" The special magic number for {key} is {value}. ")
                if len(needle) > n:
                    raise ValueError(f"needle of {len(needle)} tokens does not fit a context of {n}")
                question = tok.encode(f"\nWhat is the special magic number for {key}? Answer: ")
                yield NeedleCase(
                    case_id=f"niah-{n}-{d:g}-{rep}",
                    context_len=int(n),
                    depth_pct=float(d),
                    haystack=filler_tokens(n - len(needle), rng, tok),
                    needle=needle,
                    question=question,
                    gold=tok.encode(value),
                    repeat=rep,
                )


# -- toy key-value retrieval --------------------------------------------------

SEP = "="

@dataclass
class KVTaskConfig:
    n_samples: int = 1000
    n_pairs: int = 4
    n_queries: int = 2
    key_len: int = 2
    value_len: int = 2
    max_len: int = 512
    seed: int = 0
    # "uniform" spreads sample lengths evenly up to max_len; "log" favours
    # short samples, which lets a small model pick up the lookup early
    length_dist: str = "uniform"


@dataclass
class RetrievalCase:
    case_id: str
    input_ids: list[int]
    position_ids: list[int]
    answer_start: int
    answer_len: int
    distance: int
    gold: list[int] = field(default_factory=list)


def _pairs(rng, n_pairs, key_len, value_len) -> list[tuple[str, str]]:
    keys: set[str] = set()
    while len(keys) < n_pairs:
        keys.add("".join(rng.choice(list(string.ascii_uppercase), key_len)))
    keys_l = sorted(keys)
    rng.shuffle(keys_l)
    return [(k, "".join(rng.choice(list(string.digits), value_len))) for k in keys_l]


def _kv_sample(sample_id, pairs, queries, fillers, rng, tok) -> Sample:
    statement = "store " + " ".join(f"{k}{SEP}{v}" for k, v in pairs)
    blocks = [Block(Role.INSTRUCTION, tok.encode(statement), statement),
              Block(Role.RESPONSE, tok.encode("ok"), "ok")]
    for qi, f in zip(queries, fillers):
        k, v = pairs[qi]
        pre = filler_tokens(f, rng, tok)
        ask = tok.encode(f" {k}{SEP}")
        blocks.append(Block(Role.INSTRUCTION, pre + ask))
        blocks.append(Block(Role.RESPONSE, tok.encode(v), v))
    return Sample(sample_id, blocks)


def _fixed_len(cfg: KVTaskConfig, n_queries: int) -> int:
    statement = len("store ") + cfg.n_pairs * (cfg.key_len + len(SEP) + cfg.value_len) + (cfg.n_pairs - 1)
    return statement + 2 + n_queries * (1 + cfg.key_len + len(SEP) + cfg.value_len)


def generate_kv_retrieval(config: KVTaskConfig, tokenizer: TokenizerPort | None = None) -> Iterator[Sample]:
    """Multi-turn samples: a statement of key=value pairs, then filler + query turns.

    Filler is spread at random over the query turns so sample lengths fill
    up to ``max_len``.
    """
    tok = tokenizer or ByteTokenizer()
    budget = config.max_len - _fixed_len(config, config.n_queries)
    if budget < 0:
        raise ValueError("max_len too small for the requested pairs and queries")
    for i in range(config.n_samples):
        rng = _rng("kv", config.seed, i)
        pairs = _pairs(rng, config.n_pairs, config.key_len, config.value_len)
        queries = rng.choice(config.n_pairs, size=config.n_queries, replace=config.n_queries > config.n_pairs)
        if config.length_dist == "log":
            total = int(math.floor(math.exp(rng.uniform(0.0, math.log(budget + 1))))) - 1
        elif config.length_dist == "uniform":
            total = int(rng.integers(0, budget + 1))
        else:
            raise ValueError(f"unknown length_dist {config.length_dist!r}")
        cuts = np.sort(rng.integers(0, total + 1, size=config.n_queries - 1))
        fillers = np.diff(np.concatenate([[0], cuts, [total]])).astype(int).tolist()
        yield _kv_sample(f"kv-{config.seed}-{i}", pairs, queries.tolist(), fillers, rng, tok)


def locate_gold(sample: Sample, query_turn: int = -1) -> tuple[int, int, int]:
    """(key token index, answer token index, answer length) for one query turn.

    The query instruction ends with " KEY="; the statement entry is the
    unique "KEY=" in the first block.
    """
    n_turns = (len(sample.blocks) - 2) // 2
    if n_turns < 1:
        raise ValueError("sample has no query turn")
    t = query_turn % n_turns
    instr, resp = sample.blocks[2 + 2 * t], sample.blocks[3 + 2 * t]
    q = instr.tokens.tolist()
    start = len(q) - 1
    while start > 0 and q[start - 1] != ord(" "):
        start -= 1
    pattern = q[start:]
    stmt = sample.blocks[0].tokens.tolist()
    hits = [i for i in range(len(stmt) - len(pattern) + 1) if stmt[i : i + len(pattern)] == pattern]
    if len(hits) != 1:
        raise ValueError(f"expected exactly one statement for the queried key, found {len(hits)}")
    offsets = np.concatenate([[0], np.cumsum(sample.block_lengths)])
    return hits[0], int(offsets[3 + 2 * t]), len(resp)


def kv_eval_cases(
    distances: Sequence[int],
    seed: int = 0,
    n_pairs: int = 4,
    key_len: int = 2,
    value_len: int = 2,
    tokenizer: TokenizerPort | None = None,
) -> Iterator[RetrievalCase]:
    """One single-query case per requested key-to-answer distance, dense positions.

    The gap is real filler text, the toy analog of a haystack.
    """
    tok = tokenizer or ByteTokenizer()
    for i, target in enumerate(distances):
        rng = _rng("kv-eval", seed, i, target)
        pairs = _pairs(rng, n_pairs, key_len, value_len)
        qi = int(rng.integers(n_pairs))
        probe = _kv_sample("probe", pairs, [qi], [0], rng, tok)
        key_pos, ans_pos, _ = locate_gold(probe)
        f = target - (ans_pos - key_pos)
        if f < 0:
            raise ValueError(f"distance {target} is shorter than the minimal layout ({ans_pos - key_pos})")
        sample = _kv_sample(f"kv-eval-{seed}-{i}", pairs, [qi], [f], rng, tok)
        key_pos, ans_pos, n = locate_gold(sample)
        ids = sample.tokens.tolist()
        yield RetrievalCase(sample.id, ids, list(range(len(ids))), ans_pos, n, ans_pos - key_pos,
                            ids[ans_pos : ans_pos + n])


# -- scoring ------------------------------------------------------------------

def contains(prediction: Sequence[int], gold: Sequence[int]) -> bool:
    g = list(gold)
    p = list(prediction)
    if not g:
        return True
    return any(p[i : i + len(g)] == g for i in range(len(p) - len(g) + 1))


@dataclass
class HeatmapReport:
    lengths: list[int]
    depths: list[float]
    cells: dict[tuple[int, float], float | None]
    average: float | None
    missing: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["context_len," + ",".join(f"{d:g}" for d in self.depths)]
        for n in self.lengths:
            vals = [self.cells.get((n, d)) for d in self.depths]
            lines.append(f"{n}," + ",".join("" if v is None else repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "average": self.average,
            "scoring": "binary containment of the gold span, averaged over repeats",
            "lengths": self.lengths,
            "depths": self.depths,
            "grid": [[self.cells.get((n, d)) for d in self.depths] for n in self.lengths],
            "missing": self.missing,
        }


def score(predictions: Mapping[str, Sequence[int]], cases: Iterable[NeedleCase]) -> HeatmapReport:
    sums: dict[tuple[int, float], list[int]] = {}
    missing = []
    lengths, depths = set(), set()
    for case in cases:
        cell = (case.context_len, case.depth_pct)
        lengths.add(case.context_len)
        depths.add(case.depth_pct)
        acc = sums.setdefault(cell, [0, 0])
        pred = predictions.get(case.case_id)
        if pred is None:
            missing.append(case.case_id)
            continue
        acc[0] += contains(pred, case.gold)
        acc[1] += 1
    if missing:
        logger.warning("%d cases have no prediction and are excluded", len(missing))
    cells = {c: (h / n if n else None) for c, (h, n) in sums.items()}
    present = [v for v in cells.values() if v is not None]
    return HeatmapReport(sorted(lengths), sorted(depths), cells,
                         float(np.mean(present)) if present else None, sorted(missing))


def corpus_digest(samples: Iterable[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(json.dumps({"id": s.id, "blocks": [[b.role.value, b.tokens.tolist()] for b in s.blocks]}).encode())
        h.update(b"\n")
    return h.hexdigest()
