"""Packed-SFT baseline: concatenate whole samples into sequences of at most k tokens."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .corpus import TOKEN_DTYPE, DataError, Role, Sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PackConfig:
    k: int = 16384
    drop_last: bool = False
    seed: int = 0
    shuffle_buffer: int = 0  # 0 keeps stream order

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.shuffle_buffer < 0:
            raise ValueError("shuffle_buffer must be >= 0")


@dataclass(eq=False)
class PackedSequence:
    member_ids: list[str]
    input_ids: np.ndarray
    position_ids: np.ndarray
    loss_mask: np.ndarray
    boundaries: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def member_lengths(self) -> list[int]:
        ends = self.boundaries[1:] + [len(self)]
        return [e - s for s, e in zip(self.boundaries, ends)]

    def to_json(self) -> dict:
        return {
            "input_ids": self.input_ids.tolist(),
            "position_ids": self.position_ids.tolist(),
            "loss_mask": self.loss_mask.astype(np.int64).tolist(),
            "sample_id": "+".join(self.member_ids),
        }

    def sidecar(self) -> dict:
        return {"member_ids": list(self.member_ids), "boundaries": list(self.boundaries)}


def _shuffled(samples: Iterable[Sample], buffer_size: int, seed: int) -> Iterator[Sample]:
    # reservoir-style streaming shuffle with a bounded buffer
    rng = random.Random(seed)
    buf: list[Sample] = []
    for s in samples:
        buf.append(s)
        if len(buf) >= buffer_size:
            j = rng.randrange(len(buf))
            buf[j], buf[-1] = buf[-1], buf[j]
            yield buf.pop()
    rng.shuffle(buf)
    yield from buf


def _emit(members: list[Sample]) -> PackedSequence:
    ids, mask, bounds = [], [], []
    offset = 0
    for s in members:
        bounds.append(offset)
        for b in s.blocks:
            ids.append(b.tokens)
            mask.append(np.full(len(b), b.role is Role.RESPONSE, dtype=bool))
        offset += s.total_len
    input_ids = np.concatenate(ids) if ids else np.zeros(0, dtype=TOKEN_DTYPE)
    return PackedSequence(
        member_ids=[s.id for s in members],
        input_ids=input_ids,
        position_ids=np.arange(offset, dtype=TOKEN_DTYPE),
        loss_mask=np.concatenate(mask) if mask else np.zeros(0, dtype=bool),
        boundaries=bounds,
    )


def pack(
    samples: Iterable[Sample],
    config: PackConfig,
    on_error: str = "skip",
    errors: list | None = None,
) -> Iterator[PackedSequence]:
    if config.shuffle_buffer > 0:
        samples = _shuffled(samples, config.shuffle_buffer, config.seed)
    current: list[Sample] = []
    used = 0
    for s in samples:
        n = s.total_len
        if n > config.k:
            err = DataError(f"sample length {n} exceeds pack length k={config.k}", sample_id=s.id)
            if on_error == "abort":
                raise err
            logger.warning("rejected %s", err)
            if errors is not None:
                errors.append(err)
            continue
        if n == 0:
            continue
        if used + n > config.k:
            yield _emit(current)
            current, used = [], 0
        current.append(s)
        used += n
    if current and not config.drop_last:
        yield _emit(current)
