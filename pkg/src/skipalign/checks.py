"""Property checks and independent oracles shared by ``verify`` and the test suite.

The checkers here deliberately avoid the code paths they check: eligibility
is re-derived from the strategy definitions, gaps are read off per-token
positions, distance sets come from FFT cross-correlation or boolean marking,
and the Monte-Carlo oracle re-implements the skip sampling with Python's own
``random`` module.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .corpus import Role, Sample
from .distance import DistanceHistogram, histogram, report, tail_cv
from .pack import PackConfig, pack
from .skip import SkipConfig, Strategy, apply_plan, augment, dense_positions, plan_skips


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        bits = ", ".join(f"{k}={_fmt(v)}" for k, v in self.detail.items())
        return f"[{status}] {self.name} ({self.seconds:.1f}s) {bits}"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return v


def timed(name: str, fn: Callable[[], tuple[bool, dict]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# -- brute-force position checker ---------------------------------------------

def _eligible_by_definition(i: int, role: Role, strategy: Strategy) -> bool:
    if i == 0:
        return False
    return {
        Strategy.SKIP_ALL: True,
        Strategy.SKIP_INNER: role == Role.RESPONSE,
        Strategy.SKIP_OUTER: role == Role.INSTRUCTION,
    }[strategy]


def check_positions(lengths: Sequence[int], roles: Sequence[Role], positions: np.ndarray,
                    strategy: Strategy, L: int) -> list[str]:
    """All violations for one sample's per-token positions (empty if valid)."""
    problems = []
    pos = np.asarray(positions)
    if pos.size != sum(lengths):
        return [f"{pos.size} positions for {sum(lengths)} tokens"]
    if pos.size == 0:
        return problems
    if pos[0] != 0:
        problems.append(f"first position {pos[0]} != 0")
    steps = np.diff(pos)
    if (steps <= 0).any():
        problems.append("not strictly increasing")
    if pos.max() > L - 1:
        problems.append(f"max position {pos.max()} > L-1")
    starts = np.cumsum([0] + list(lengths[:-1]))
    for i in range(1, len(lengths)):
        a = starts[i]
        gap = pos[a] - pos[a - 1] - 1
        if gap > 0 and not _eligible_by_definition(i, roles[i], strategy):
            problems.append(f"gap {gap} before ineligible block {i} ({roles[i].value})")
    # no gaps inside blocks
    inner = np.ones(pos.size - 1, dtype=bool)
    inner[starts[1:] - 1] = False
    if (steps[inner] != 1).any():
        problems.append("gap inside a block")
    return problems


def random_lengths(rng: np.random.Generator, max_turns: int = 8, max_block: int = 2048) -> list[int]:
    turns = int(rng.integers(1, max_turns + 1))
    return rng.integers(1, max_block + 1, size=2 * turns).tolist()


def validity_fuzz(n_samples: int = 10_000, seeds: Sequence[int] = range(10), L: int = 100_000,
                  p: float = 0.5, fuzz_seed: int = 1234) -> tuple[bool, dict]:
    rng = np.random.default_rng(fuzz_seed)
    strategies = list(Strategy)
    failures = []
    checked = 0
    for n in range(n_samples):
        sample = Sample.from_lengths(f"fuzz-{n}", random_lengths(rng))
        lengths, roles = sample.block_lengths, sample.roles
        for strategy in strategies:
            for seed in seeds:
                cfg = SkipConfig(L=L, p=p, strategy=strategy, seed=seed)
                pa = apply_plan(sample, plan_skips(sample, cfg))
                probs = check_positions(lengths, roles, pa.per_token_positions, strategy, L)
                checked += 1
                if probs and len(failures) < 10:
                    failures.append((sample.id, strategy.value, seed, probs))
    return not failures, {"plans_checked": checked, "failures": len(failures), "examples": failures[:3]}


# -- identity -----------------------------------------------------------------

def identity_check(samples: Sequence[Sample], seed: int = 0) -> tuple[bool, dict]:
    from .artifacts import dumps
    from .corpus import to_record

    cfg = SkipConfig(p=0.0, seed=seed, strategy=Strategy.SKIP_ALL)
    aug = b"".join(dumps(to_record(s, pa).to_json()).encode() + b"\n" for s, pa, _ in augment(samples, cfg))
    dense = b"".join(dumps(to_record(s, dense_positions(s)).to_json()).encode() + b"\n" for s in samples)
    return aug == dense, {"samples": len(samples), "bytes": len(dense)}


# -- uniformity of the first skip ---------------------------------------------

def uniformity_check(n_draws: int = 100_000, lengths=(40, 60, 50, 50), L: int = 100_000,
                     n_bins: int = 100, alpha: float = 0.01) -> tuple[bool, dict]:
    """Chi-square of the first skip against uniform on {1..L-|m|}.

    Bins are equal-count groups of consecutive support values so every
    expected count stays large.
    """
    sample = Sample.from_lengths("uniformity", lengths)
    support = L - sample.total_len
    draws = np.empty(n_draws, dtype=np.int64)
    for seed in range(n_draws):
        plan = plan_skips(sample, SkipConfig(L=L, p=1.0, strategy=Strategy.SKIP_ALL, seed=seed))
        draws[seed] = plan.skip_steps[1]
    if draws.min() < 1 or draws.max() > support:
        return False, {"error": "draw outside support", "min": int(draws.min()), "max": int(draws.max())}
    edges = np.linspace(1, support + 1, n_bins + 1).round().astype(np.int64)
    observed = np.histogram(draws, bins=edges)[0]
    expected = np.diff(edges) / support * n_draws
    chi2, pval = stats.chisquare(observed, expected)
    return pval > alpha, {"draws": n_draws, "support": support, "bins": n_bins, "chi2": float(chi2),
                          "p_value": float(pval), "alpha": alpha}


# -- distance sets by independent routes --------------------------------------

def distance_set_fft(positions: Sequence[int], response_mask: Sequence[bool]) -> set[int]:
    """{q - q' >= 0 : q a response position, q' any position}, via cross-correlation."""
    pos = np.asarray(positions, dtype=np.int64)
    mask = np.asarray(response_mask, dtype=bool)
    if not mask.any():
        return set()
    size = int(pos.max()) + 1
    a = np.zeros(size)
    a[pos] = 1.0
    r = np.zeros(size)
    r[pos[mask]] = 1.0
    n = 1 << int(math.ceil(math.log2(2 * size)))
    corr = np.fft.irfft(np.fft.rfft(r, n) * np.conj(np.fft.rfft(a, n)), n)[:size]
    return set(np.flatnonzero(corr > 0.5).tolist())


def distance_set_pairs(positions: Sequence[int], response_mask: Sequence[bool]) -> set[int]:
    """Token-pair enumeration; only for small samples."""
    pos = list(positions)
    out = set()
    for i, (q, is_resp) in enumerate(zip(pos, response_mask)):
        if is_resp:
            out.update(q - pos[j] for j in range(i + 1))
    return out


# -- Monte-Carlo oracle for the tail shape ------------------------------------

def oracle_plan(lengths: Sequence[int], L: int, p: float, rng: random.Random) -> list[int]:
    """Cumulative shifts for Skip-All, straight from the sampling rule."""
    total = sum(lengths)
    shifts = [0]
    u = 0
    for _ in range(1, len(lengths)):
        if rng.random() < p and L - total - u >= 1:
            u += rng.randint(1, L - total - u)
        shifts.append(u)
    return shifts


def oracle_bucket_counts(lengths: Sequence[int], shifts: Sequence[int], L: int, width: int) -> np.ndarray:
    """Per-bucket size of the distance set by marking a boolean line of length L."""
    seen = np.zeros(L, dtype=bool)
    starts, ends = [], []
    off = 0
    for n, u in zip(lengths, shifts):
        starts.append(off + u)
        ends.append(off + u + n - 1)
        off += n
    for r in range(1, len(lengths), 2):
        seen[: ends[r] - starts[r] + 1] = True
        for c in range(r):
            seen[starts[r] - ends[c] : ends[r] - starts[c] + 1] = True
    nb = -(-L // width)
    padded = np.zeros(nb * width, dtype=bool)
    padded[:L] = seen
    return padded.reshape(nb, width).sum(axis=1)


def tail_corpus(n: int = 10_000, turns: int = 4, target: int = 4096, seed: int = 7) -> list[list[int]]:
    """Block lengths of ``turns``-turn samples whose totals lie in [7/8 target, target]."""
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(n):
        total = int(rng.integers(target * 7 // 8, target + 1))
        cuts = np.sort(rng.choice(np.arange(1, total), size=2 * turns - 1, replace=False))
        corpus.append(np.diff(np.concatenate([[0], cuts, [total]])).tolist())
    return corpus


def oracle_tail_cvs(corpus: Sequence[Sequence[int]], L: int, p: float, width: int, tail: tuple[int, int],
                    replicates: int, seed: int = 99) -> list[float]:
    lo_b, hi_b = math.ceil(tail[0] / width), tail[1] // width
    out = []
    for r in range(replicates):
        rng = random.Random(seed * 1_000_003 + r)
        acc = np.zeros(-(-L // width), dtype=np.int64)
        for lengths in corpus:
            acc += oracle_bucket_counts(lengths, oracle_plan(lengths, L, p, rng), L, width)
        vals = acc[lo_b:hi_b].astype(float)
        out.append(float(vals.std() / vals.mean()))
    return out


def tail_shape_check(n: int = 10_000, L: int = 100_000, p: float = 0.5, width: int = 1024,
               tail: tuple[int, int] = (8192, 98304), replicates: int = 20, seed: int = 0,
               truncation: int = 4096) -> tuple[bool, dict]:
    lengths = tail_corpus(n)
    samples = [Sample.from_lengths(f"tail-{i}", ls) for i, ls in enumerate(lengths)]

    dense_cfg = SkipConfig(L=L, p=0.0, strategy=Strategy.SKIP_ALL, seed=seed)
    h0 = histogram(((s, pa) for s, pa, _ in augment(samples, dense_cfg)), width)
    rep0 = report(h0, truncation)["summary"]
    part_a = h0.max_distance <= truncation and rep0["fraction_above_truncation"] == 0.0

    cfg = SkipConfig(L=L, p=p, strategy=Strategy.SKIP_ALL, seed=seed)
    h = histogram(((s, pa) for s, pa, _ in augment(samples, cfg)), width)
    cv = tail_cv(h, *tail)

    cvs = oracle_tail_cvs(lengths, L, p, width, tail, replicates)
    threshold = float(np.mean(cvs) + 4 * np.std(cvs, ddof=1))
    part_b = cv is not None and cv < threshold
    return part_a and part_b, {
        "p0_max_distance": h0.max_distance, "p0_fraction_above": rep0["fraction_above_truncation"],
        "tail_cv": cv, "oracle_cv_mean": float(np.mean(cvs)), "oracle_cv_sd": float(np.std(cvs, ddof=1)),
        "threshold": threshold, "tail_buckets": tail[1] // width - math.ceil(tail[0] / width),
    }


# -- rotary checks ------------------------------------------------------------

def rope_shift_check(trials: int = 1000, seed: int = 0, tol: float = 1e-9) -> tuple[bool, dict]:
    import torch

    from .rope import RopeParams, attention_scores

    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d = int(gen.choice([2, 8, 32, 64]))
        t = int(gen.integers(2, 9))
        params = RopeParams(head_dim=d)
        q = torch.from_numpy(gen.standard_normal((t, d)))
        k = torch.from_numpy(gen.standard_normal((t, d)))
        pos = np.cumsum(gen.integers(1, 5000, size=t)) - 1
        delta = int(gen.integers(0, 100_000))
        a = attention_scores(q, k, torch.from_numpy(pos), params)
        b = attention_scores(q, k, torch.from_numpy(pos + delta), params)
        finite = torch.isfinite(a)
        worst = max(worst, float((a[finite] - b[finite]).abs().max()))
    return worst <= tol, {"trials": trials, "max_abs_diff": worst, "tol": tol}


def gradient_check(seed: int = 0, h: float = 1e-6, tol: float = 1e-4, floor: float = 1e-6) -> tuple[bool, dict]:
    """Autograd vs central differences on every parameter of a tiny 2-layer model (float64).

    Relative error is |g - fd| / max(|g|, |fd|, floor).
    """
    import torch

    from .corpus import TrainingRecord
    from .toyformer import ToyModelConfig, ToyTransformer, collate, masked_loss

    torch.manual_seed(seed)
    cfg = ToyModelConfig(layers=2, heads=2, model_dim=8, head_dim=4, vocab_size=11, seed=seed)
    model = ToyTransformer(cfg).double()
    with torch.no_grad():
        for prm in model.parameters():
            prm.add_(0.3 * torch.randn_like(prm))
    gen = np.random.default_rng(seed)
    recs = []
    for n in (7, 5):
        pos = np.cumsum(gen.integers(1, 40, size=n)) - 1
        mask = np.zeros(n, dtype=bool)
        mask[n // 2 :] = True
        recs.append(TrainingRecord("g", gen.integers(0, 11, size=n), pos, mask))
    batch = collate(recs)
    model.zero_grad()
    masked_loss(model, batch).backward()
    worst = 0.0
    count = 0
    with torch.no_grad():
        for prm in model.parameters():
            flat = prm.view(-1)
            grad = prm.grad.view(-1).clone()
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(masked_loss(model, batch))
                flat[i] = old - h
                down = float(masked_loss(model, batch))
                flat[i] = old
                fd = (up - down) / (2 * h)
                g = float(grad[i])
                worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
                count += 1
    return worst < tol, {"parameters": count, "max_rel_error": worst, "tol": tol}


# -- packing ------------------------------------------------------------------

def packing_check(n: int = 1000, k: int = 16384, seed: int = 5, max_len: int = 4096) -> tuple[bool, dict]:
    from .distance import record_segments, distance_intervals

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        turns = int(rng.integers(1, 5))
        lengths = rng.integers(1, max_len // (2 * turns) + 1, size=2 * turns).tolist()
        s = Sample.from_lengths(f"pk-{i}", lengths)
        for b in s.blocks:
            b.tokens = rng.integers(0, 256, size=len(b))
        samples.append(s)
    by_id = {s.id: s for s in samples}
    packs = list(pack(samples, PackConfig(k=k)))
    problems = []
    seen = []
    max_member = max(s.total_len for s in samples)
    within_max = -1
    for pk in packs:
        if len(pk) > k:
            problems.append("pack exceeds k")
        if not np.array_equal(pk.position_ids, np.arange(len(pk))):
            problems.append("positions not dense")
        for mid, start, n_tok in zip(pk.member_ids, pk.boundaries, pk.member_lengths):
            s = by_id[mid]
            seen.append(mid)
            if n_tok != s.total_len or not np.array_equal(pk.input_ids[start : start + n_tok], s.tokens):
                problems.append(f"member {mid} altered")
            want = np.concatenate([np.full(len(b), b.role is Role.RESPONSE) for b in s.blocks])
            if not np.array_equal(pk.loss_mask[start : start + n_tok], want):
                problems.append(f"loss mask of {mid} wrong")
            segs = record_segments(np.arange(n_tok), pk.loss_mask[start : start + n_tok])
            iv = distance_intervals(segs)
            if iv:
                within_max = max(within_max, iv[-1][1])
                if iv[-1][1] >= n_tok:
                    problems.append(f"within-member distance {iv[-1][1]} >= member length {n_tok}")
    once = sorted(seen) == sorted(by_id)
    ok = not problems and once and within_max < max_member
    return ok, {"samples": n, "packs": len(packs), "k": k, "every_sample_once": once,
                "max_within_member_distance": within_max, "max_member_length": max_member,
                "problems": problems[:3]}
