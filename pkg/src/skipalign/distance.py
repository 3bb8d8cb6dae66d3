"""Relative-distance sets for response generation and dataset-level histograms.

A response token at position q conditions on every token at or before it in
sequence order, so it contributes the distances q - q' for all such q'.
Because positions inside a block are consecutive, the distances between two
blocks form one contiguous integer range, and the whole computation works
on block pairs instead of token pairs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import Role, Sample

DEFAULT_BUCKET_WIDTH = 1024
BUCKETING_LABEL = "fixed-width buckets [b*w, (b+1)*w - 1], set-per-sample counts, unnormalized"


@dataclass(frozen=True)
class Segment:
    start: int  # first position
    end: int  # last position, inclusive
    response: bool


def sample_segments(sample: Sample, positions) -> list[Segment]:
    starts = positions.block_starts
    return [Segment(int(s), int(s) + len(b) - 1, b.role is Role.RESPONSE)
            for s, b in zip(starts, sample.blocks) if len(b)]


def record_segments(position_ids: Sequence[int], loss_mask: Sequence[bool]) -> list[Segment]:
    """Split a flat record into runs of equal mask value and consecutive positions."""
    pos = np.asarray(position_ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if pos.size == 0:
        return []
    cuts = np.flatnonzero((np.diff(pos) != 1) | (mask[1:] != mask[:-1])) + 1
    bounds = np.concatenate([[0], cuts, [pos.size]])
    return [Segment(int(pos[a]), int(pos[b - 1]), bool(mask[a])) for a, b in zip(bounds[:-1], bounds[1:])]


def _raw_intervals(segments: Sequence[Segment]) -> list[tuple[int, int]]:
    out = []
    for r, seg in enumerate(segments):
        if not seg.response:
            continue
        out.append((0, seg.end - seg.start))
        for ctx in segments[:r]:
            out.append((seg.start - ctx.end, seg.end - ctx.start))
    return out


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [(a, b) for a, b in merged]


def distance_intervals(segments: Sequence[Segment]) -> list[tuple[int, int]]:
    """Disjoint sorted inclusive ranges whose union is the distance set."""
    return merge_intervals(_raw_intervals(segments))


def distance_set(sample: Sample, positions) -> set[int]:
    out: set[int] = set()
    for lo, hi in distance_intervals(sample_segments(sample, positions)):
        out.update(range(lo, hi + 1))
    return out


def pair_counts(segments: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Multiset form: (distance, number of (response, context) token pairs)."""
    ds, cs = [], []
    for r, seg in enumerate(segments):
        if not seg.response:
            continue
        n = seg.end - seg.start + 1
        d = np.arange(n, dtype=np.int64)
        ds.append(d)
        cs.append(n - d)
        for ctx in segments[:r]:
            d = np.arange(seg.start - ctx.end, seg.end - ctx.start + 1, dtype=np.int64)
            c = np.minimum(seg.end, ctx.end + d) - np.maximum(seg.start, ctx.start + d) + 1
            ds.append(d)
            cs.append(c)
    if not ds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ds), np.concatenate(cs)


@dataclass(eq=False)
class DistanceHistogram:
    bucket_width: int = DEFAULT_BUCKET_WIDTH
    total_samples: int = 0
    max_distance: int = -1
    multiset: bool = False
    _arr: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def __post_init__(self):
        if self.bucket_width < 1:
            raise ValueError("bucket_width must be >= 1")

    @property
    def counts(self) -> dict[int, int]:
        nz = np.flatnonzero(self._arr)
        return {int(i): int(self._arr[i]) for i in nz}

    @property
    def total(self) -> int:
        return int(self._arr.sum())

    def _grow(self, size: int) -> None:
        if size > self._arr.size:
            arr = np.zeros(max(size, 2 * self._arr.size), dtype=np.int64)
            arr[: self._arr.size] = self._arr
            self._arr = arr

    def add_intervals(self, intervals: Sequence[tuple[int, int]]) -> None:
        """Count one sample given its disjoint distance intervals."""
        w = self.bucket_width
        self.total_samples += 1
        if not intervals:
            return
        self._grow(intervals[-1][1] // w + 1)
        arr = self._arr
        for lo, hi in intervals:
            b0, b1 = lo // w, hi // w
            if b0 == b1:
                arr[b0] += hi - lo + 1
            else:
                arr[b0] += (b0 + 1) * w - lo
                arr[b1] += hi - b1 * w + 1
                if b1 > b0 + 1:
                    arr[b0 + 1 : b1] += w
            self.max_distance = max(self.max_distance, hi)

    def add_pairs(self, distances: np.ndarray, counts: np.ndarray) -> None:
        self.total_samples += 1
        if distances.size == 0:
            return
        binned = np.bincount(distances // self.bucket_width, weights=counts).astype(np.int64)
        self._grow(binned.size)
        self._arr[: binned.size] += binned
        self.max_distance = max(self.max_distance, int(distances.max()))

    def add_segments(self, segments: Sequence[Segment]) -> None:
        if self.multiset:
            self.add_pairs(*pair_counts(segments))
        else:
            self.add_intervals(distance_intervals(segments))

    def merge(self, other: "DistanceHistogram") -> "DistanceHistogram":
        if other.bucket_width != self.bucket_width or other.multiset != self.multiset:
            raise ValueError("cannot merge histograms with different bucketing")
        out = DistanceHistogram(self.bucket_width, self.total_samples + other.total_samples,
                                max(self.max_distance, other.max_distance), self.multiset)
        out._grow(max(self._arr.size, other._arr.size))
        out._arr[: self._arr.size] += self._arr
        out._arr[: other._arr.size] += other._arr
        return out

    __add__ = merge

    def __eq__(self, other):
        if not isinstance(other, DistanceHistogram):
            return NotImplemented
        return (self.bucket_width == other.bucket_width and self.multiset == other.multiset
                and self.total_samples == other.total_samples
                and self.max_distance == other.max_distance and self.counts == other.counts)

    def to_json(self) -> dict:
        return {"bucket_width": self.bucket_width, "total_samples": self.total_samples,
                "max_distance": self.max_distance, "multiset": self.multiset,
                "counts": {str(k): v for k, v in self.counts.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "DistanceHistogram":
        h = cls(int(obj["bucket_width"]), int(obj["total_samples"]), int(obj["max_distance"]),
                bool(obj.get("multiset", False)))
        counts = {int(k): int(v) for k, v in obj["counts"].items()}
        if counts:
            h._grow(max(counts) + 1)
            for k, v in counts.items():
                h._arr[k] = v
        return h


def histogram(
    items: Iterable[tuple[Sample, object]],
    bucket_width: int = DEFAULT_BUCKET_WIDTH,
    multiset: bool = False,
) -> DistanceHistogram:
    h = DistanceHistogram(bucket_width, multiset=multiset)
    for sample, positions in items:
        h.add_segments(sample_segments(sample, positions))
    return h


def _cv(values: np.ndarray) -> float | None:
    if values.size == 0:
        return None
    mean = float(values.mean())
    if mean == 0.0:
        return None
    return float(values.std() / mean)


def tail_cv(h: DistanceHistogram, lo: int, hi: int) -> float | None:
    """Coefficient of variation over buckets lying entirely in [lo, hi)."""
    w = h.bucket_width
    first = math.ceil(lo / w)
    last = hi // w  # exclusive
    if last <= first:
        return None
    vals = np.zeros(last - first, dtype=np.int64)
    arr = h._arr[first:last]
    vals[: arr.size] = arr
    return _cv(vals.astype(float))


def report(
    h: DistanceHistogram,
    truncation: int = 4096,
    tail_range: tuple[int, int] | None = None,
) -> dict:
    """Machine-readable summary; ``rows`` are (bucket_start, bucket_end, count)."""
    w = h.bucket_width
    rows = [(b * w, (b + 1) * w - 1, c) for b, c in sorted(h.counts.items())]
    total = h.total
    above = sum(c for start, _, c in rows if start >= truncation)
    if tail_range is None and h.max_distance >= 0:
        tail_range = (2 * truncation, max(2 * truncation, h.max_distance + 1 - 2 * truncation))
    summary = {
        "total_samples": h.total_samples,
        "total_count": total,
        "max_distance": h.max_distance,
        "bucket_width": w,
        "truncation": truncation,
        "fraction_above_truncation": (above / total) if total else 0.0,
        "tail_range": list(tail_range) if tail_range else None,
        "tail_cv": tail_cv(h, *tail_range) if tail_range else None,
        "bucketing": BUCKETING_LABEL if not h.multiset else BUCKETING_LABEL.replace("set-per-sample", "pair-multiset"),
    }
    return {"rows": rows, "summary": summary}


def report_csv(rep: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bucket_start", "bucket_end", "count"])
    writer.writerows(rep["rows"])
    return buf.getvalue()


def report_json(rep: dict) -> str:
    return json.dumps(rep["summary"], indent=2, sort_keys=True)
