"""Skipped positional indices: planning, application and stream augmentation.

Each block of a sample is shifted right by a cumulative offset.  The offset
grows only at blocks the skipping strategy marks eligible, and only when a
Bernoulli(p) draw fires; the step is uniform on ``{1, ..., L - |m| - u_prev}``
so the largest position never exceeds ``L - 1``.

Randomness comes from numpy's Philox generator keyed by a stable 64-bit hash
of ``(seed, sample_id)``.  Every plan consumes the stream in the same order
regardless of strategy, ``p`` or outcome: one sample-level gate double, then
for each block a Bernoulli double followed by a uniform double.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import islice
from typing import Iterable, Iterator

import numpy as np

from .corpus import TOKEN_DTYPE, DataError, Role, Sample

logger = logging.getLogger(__name__)

RNG_NAME = "numpy.random.Philox"
RNG_VERSION = f"numpy-{np.__version__}"
PLAN_FORMAT = "skipalign-plan/1"


class Strategy(str, enum.Enum):
    SKIP_ALL = "skip-all"
    SKIP_INNER = "skip-inner"
    SKIP_OUTER = "skip-outer"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"all": "skip-all", "inner": "skip-inner", "outer": "skip-outer",
                   "skipall": "skip-all", "skipinner": "skip-inner", "skipouter": "skip-outer"}
        return cls(aliases.get(key, key))


class SubsampleMode(str, enum.Enum):
    PER_BLOCK = "per-block"
    PER_SAMPLE = "per-sample"

    @classmethod
    def parse(cls, value: "str | SubsampleMode") -> "SubsampleMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("_", "-"))


@dataclass(frozen=True)
class SkipConfig:
    L: int = 100_000
    p: float = 0.5
    strategy: Strategy = Strategy.SKIP_OUTER
    seed: int = 0
    subsample_mode: SubsampleMode = SubsampleMode.PER_BLOCK
    # Lets block 0 take a skip under its strategy.  Off by default: the first
    # block always sits at offset 0.
    skip_first_block: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        object.__setattr__(self, "subsample_mode", SubsampleMode.parse(self.subsample_mode))
        if self.L < 1:
            raise ValueError(f"L must be positive, got {self.L}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    def check_truncation(self, limit: int) -> None:
        if self.L < limit:
            raise ValueError(f"L={self.L} is smaller than the truncation limit {limit}")


@dataclass
class SkipPlan:
    sample_id: str
    skip_steps: list[int]
    cumulative_shifts: list[int]
    eligible_flags: list[bool]
    bernoulli_draws: list[bool]
    saturated: list[bool]

    def metadata(self, config: SkipConfig) -> dict:
        return {
            "sample_id": self.sample_id,
            "strategy": config.strategy.value,
            "L": config.L,
            "p": config.p,
            "seed": config.seed,
            "subsample_mode": config.subsample_mode.value,
            "skip_steps": list(self.skip_steps),
            "cumulative_shifts": list(self.cumulative_shifts),
        }


@dataclass(eq=False)
class PositionAssignment:
    sample_id: str
    block_starts: list[int]
    per_token_positions: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, PositionAssignment):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.block_starts == other.block_starts
                and np.array_equal(self.per_token_positions, other.per_token_positions))


def sample_seed(seed: int, sample_id: str) -> int:
    """Stable 64-bit key for one sample, independent of processing order."""
    h = hashlib.blake2b(f"{int(seed)}\x1f{sample_id}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=sample_seed(seed, sample_id)))


def dense_positions(sample: Sample) -> PositionAssignment:
    lengths = sample.block_lengths
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int).tolist() if lengths else []
    return PositionAssignment(sample.id, starts, np.arange(sample.total_len, dtype=TOKEN_DTYPE))


def is_eligible(block_index: int, role: Role, strategy: Strategy, skip_first_block: bool = False) -> bool:
    if block_index < 0:
        raise ValueError("block_index must be non-negative")
    if block_index == 0 and not skip_first_block:
        return False
    strategy = Strategy.parse(strategy)
    role = Role(role)
    if strategy is Strategy.SKIP_ALL:
        return True
    if strategy is Strategy.SKIP_INNER:
        return role is Role.RESPONSE
    return role is Role.INSTRUCTION


def plan_skips(sample: Sample, config: SkipConfig) -> SkipPlan:
    total = sample.total_len
    if total > config.L:
        raise DataError(f"sample length {total} exceeds L={config.L}", sample_id=sample.id)
    n = len(sample.blocks)
    draws = sample_rng(config.seed, sample.id).random(1 + 2 * n)
    # 1 - U(0,1] keeps eps <= p exact at both ends: p=0 never fires, p=1 always
    gate = (1.0 - draws[0]) <= config.p
    per_sample = config.subsample_mode is SubsampleMode.PER_SAMPLE

    steps, shifts, eligible, fired, saturated = [], [], [], [], []
    u = 0
    for i, block in enumerate(sample.blocks):
        eps, r = draws[1 + 2 * i], draws[2 + 2 * i]
        ok = is_eligible(i, block.role, config.strategy, config.skip_first_block)
        hit = gate if per_sample else (1.0 - eps) <= config.p
        s = 0
        sat = False
        if ok and hit:
            upper = config.L - total - u
            if upper >= 1:
                s = min(1 + int(r * upper), upper)
            else:
                sat = True
        u += s
        steps.append(s)
        shifts.append(u)
        eligible.append(ok)
        fired.append(bool(hit))
        saturated.append(sat)
    return SkipPlan(sample.id, steps, shifts, eligible, fired, saturated)


def apply_plan(sample: Sample, plan: SkipPlan) -> PositionAssignment:
    lengths = sample.block_lengths
    shifts = plan.cumulative_shifts
    if len(shifts) != len(lengths):
        raise DataError(f"plan has {len(shifts)} blocks, sample has {len(lengths)}", sample_id=sample.id)
    if any(b < a for a, b in zip(shifts, shifts[1:])) or (shifts and shifts[0] < 0):
        raise DataError("cumulative shifts must be non-negative and non-decreasing", sample_id=sample.id)
    starts = []
    offset = 0
    for n, u in zip(lengths, shifts):
        starts.append(offset + u)
        offset += n
    per_token = np.arange(sample.total_len, dtype=TOKEN_DTYPE)
    if lengths:
        per_token += np.repeat(np.asarray(shifts, dtype=TOKEN_DTYPE), lengths)
    return PositionAssignment(sample.id, starts, per_token)


def _augment_one(sample: Sample, config: SkipConfig):
    plan = plan_skips(sample, config)
    return sample, apply_plan(sample, plan), plan


def _augment_safe(args):
    sample, config = args
    try:
        return _augment_one(sample, config)
    except DataError as exc:
        return exc


def _windowed_map(pool, items, window: int, chunksize: int):
    # bounded look-ahead; Executor.map alone would drain the whole input
    it = iter(items)
    while True:
        chunk = list(islice(it, window))
        if not chunk:
            return
        yield from pool.map(_augment_safe, chunk, chunksize=chunksize)


def augment(
    samples: Iterable[Sample],
    config: SkipConfig,
    on_error: str = "skip",
    workers: int = 1,
    chunksize: int = 64,
    errors: list | None = None,
) -> Iterator[tuple[Sample, PositionAssignment, SkipPlan]]:
    """Plan and apply skips over a stream, preserving input order.

    Outputs are identical for any ``workers`` since each sample seeds its own
    generator.
    """
    if on_error not in ("skip", "abort"):
        raise ValueError(f"on_error must be 'skip' or 'abort', got {on_error!r}")
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    pending = ((s, config) for s in samples)
    if pool is None:
        results = map(_augment_safe, pending)
    else:
        results = _windowed_map(pool, pending, window=workers * chunksize * 4, chunksize=chunksize)
    try:
        for res in results:
            if isinstance(res, DataError):
                if on_error == "abort":
                    raise res
                logger.warning("rejected %s", res)
                if errors is not None:
                    errors.append(res)
                continue
            yield res
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
