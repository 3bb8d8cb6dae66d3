"""Conversation data model, ingestion, truncation and record export."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 4096
TOKEN_DTYPE = np.int64


class DataError(ValueError):
    """Raised for malformed input data.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, sample_id: str | None = None):
        self.reason = message
        self.line = line
        self.sample_id = sample_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if sample_id is not None:
            where.append(f"sample {sample_id!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)

    def __reduce__(self):
        return (DataError, (self.reason, self.line, self.sample_id))


class Role(str, enum.Enum):
    INSTRUCTION = "instruction"
    RESPONSE = "response"


_INSTRUCTION_ROLES = {"user", "human", "instruction", "prompt", "input", "question"}
_RESPONSE_ROLES = {"assistant", "gpt", "bot", "model", "response", "output", "answer", "chatgpt"}
_SYSTEM_ROLES = {"system"}


@dataclass(eq=False)
class Block:
    role: Role
    tokens: np.ndarray
    source_text: str | None = None

    def __post_init__(self):
        self.role = Role(self.role)
        self.tokens = np.asarray(self.tokens, dtype=TOKEN_DTYPE).reshape(-1)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Block):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.tokens, other.tokens)

    def __repr__(self):
        return f"Block({self.role.value}, len={len(self)})"


@dataclass(eq=False)
class Sample:
    id: str
    blocks: list[Block]
    truncated: bool = False

    @property
    def total_len(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def block_lengths(self) -> list[int]:
        return [len(b) for b in self.blocks]

    @property
    def roles(self) -> list[Role]:
        return [b.role for b in self.blocks]

    @property
    def has_response(self) -> bool:
        return any(b.role is Role.RESPONSE and len(b) for b in self.blocks)

    @property
    def tokens(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0, dtype=TOKEN_DTYPE)
        return np.concatenate([b.tokens for b in self.blocks])

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return self.id == other.id and self.blocks == other.blocks

    def __repr__(self):
        return f"Sample({self.id!r}, blocks={self.block_lengths})"

    @classmethod
    def from_lengths(cls, sample_id: str, lengths: Sequence[int], fill: int = 1) -> "Sample":
        """Alternating Instruction/Response sample with constant token content."""
        roles = (Role.INSTRUCTION, Role.RESPONSE)
        blocks = [Block(roles[i % 2], np.full(int(n), fill, dtype=TOKEN_DTYPE)) for i, n in enumerate(lengths)]
        return cls(sample_id, blocks)


@dataclass(eq=False)
class TrainingRecord:
    sample_id: str
    input_ids: np.ndarray
    position_ids: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def useful(self) -> bool:
        """False when no token contributes to the loss."""
        return bool(self.loss_mask.any())

    def to_json(self) -> dict:
        # field order is part of the export format
        return {
            "input_ids": self.input_ids.tolist(),
            "position_ids": self.position_ids.tolist(),
            "loss_mask": self.loss_mask.astype(np.int64).tolist(),
            "sample_id": self.sample_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingRecord":
        return cls(
            sample_id=str(obj["sample_id"]),
            input_ids=np.asarray(obj["input_ids"], dtype=TOKEN_DTYPE),
            position_ids=np.asarray(obj["position_ids"], dtype=TOKEN_DTYPE),
            loss_mask=np.asarray(obj["loss_mask"], dtype=bool),
        )


class TokenizerPort(Protocol):
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Iterable[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 byte-level tokenizer; ids are byte values."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Iterable[int]) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="strict")


@dataclass
class IngestConfig:
    on_error: str = "abort"  # "abort" | "skip"
    separator_id: int = 10  # byte-level "\n"
    leading_response: str = "sentinel"  # "sentinel" | "reject"
    sentinel_id: int = 0

    def __post_init__(self):
        if self.on_error not in ("abort", "skip"):
            raise ValueError(f"on_error must be 'abort' or 'skip', got {self.on_error!r}")
        if self.leading_response not in ("sentinel", "reject"):
            raise ValueError(f"leading_response must be 'sentinel' or 'reject', got {self.leading_response!r}")


def _map_role(raw: str) -> str:
    r = str(raw).strip().lower()
    if r in _SYSTEM_ROLES:
        return "system"
    if r in _INSTRUCTION_ROLES:
        return Role.INSTRUCTION.value
    if r in _RESPONSE_ROLES:
        return Role.RESPONSE.value
    raise DataError(f"unknown role {raw!r}")


def _messages_of(obj: dict) -> list[tuple[str, str]]:
    if "messages" in obj:
        msgs = obj["messages"]
        return [(m["role"], m["content"]) for m in msgs]
    if "conversations" in obj:
        msgs = obj["conversations"]
        return [(m.get("from", m.get("role")), m.get("value", m.get("content"))) for m in msgs]
    raise DataError("record has neither 'messages', 'conversations' nor 'blocks'")


def _normalize(
    sample_id: str,
    items: list[tuple[str, list[int], str | None]],
    config: IngestConfig,
) -> Sample:
    """Fold system turns, merge same-role runs and enforce alternation.

    ``items`` holds (role, tokens, text) with role in {system, instruction, response}.
    """
    items = [it for it in items if len(it[1]) > 0]
    # system content joins the first instruction
    system = [it for it in items if it[0] == "system"]
    rest = [it for it in items if it[0] != "system"]
    if system:
        sys_tokens: list[int] = []
        sys_texts = []
        for _, toks, text in system:
            if sys_tokens:
                sys_tokens.append(config.separator_id)
            sys_tokens.extend(toks)
            sys_texts.append(text)
        sys_text = "\n".join(t for t in sys_texts if t is not None) if all(t is not None for t in sys_texts) else None
        if rest and rest[0][0] == Role.INSTRUCTION.value:
            role, toks, text = rest[0]
            merged_text = None if sys_text is None or text is None else sys_text + "\n" + text
            rest[0] = (role, sys_tokens + [config.separator_id] + list(toks), merged_text)
        else:
            rest.insert(0, (Role.INSTRUCTION.value, sys_tokens, sys_text))

    if not rest:
        raise DataError("conversation has no non-empty messages", sample_id=sample_id)

    merged: list[list] = []
    for role, toks, text in rest:
        if merged and merged[-1][0] == role:
            merged[-1][1] = merged[-1][1] + [config.separator_id] + list(toks)
            prev = merged[-1][2]
            merged[-1][2] = None if prev is None or text is None else prev + "\n" + text
        else:
            merged.append([role, list(toks), text])

    if merged[0][0] == Role.RESPONSE.value:
        if config.leading_response == "reject":
            raise DataError("conversation starts with a response", sample_id=sample_id)
        merged.insert(0, [Role.INSTRUCTION.value, [config.sentinel_id], None])

    return Sample(sample_id, [Block(Role(r), np.asarray(t, dtype=TOKEN_DTYPE), s) for r, t, s in merged])


def parse_record(obj: dict, tokenizer: TokenizerPort, config: IngestConfig, default_id: str) -> Sample:
    sample_id = str(obj.get("id", default_id))
    if "blocks" in obj:
        items = []
        for b in obj["blocks"]:
            role = _map_role(b["role"])
            toks = [int(t) for t in b["tokens"]]
            if any(t < 0 for t in toks):
                raise DataError("negative token id", sample_id=sample_id)
            items.append((role, toks, None))
        return _normalize(sample_id, items, config)
    items = []
    for role, content in _messages_of(obj):
        if content is None:
            content = ""
        if not isinstance(content, str):
            raise DataError(f"message content must be a string, got {type(content).__name__}", sample_id=sample_id)
        items.append((_map_role(role), tokenizer.encode(content), content))
    return _normalize(sample_id, items, config)


def ingest_lines(
    lines: Iterable[str],
    tokenizer: TokenizerPort,
    config: IngestConfig | None = None,
    source: str = "input",
    errors: list | None = None,
) -> Iterator[Sample]:
    """Yield normalized samples from line-delimited JSON records.

    With ``on_error="skip"`` bad lines are logged and, if ``errors`` is given,
    appended to it as ``DataError`` instances.
    """
    config = config or IngestConfig()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError("record is not a JSON object")
            yield parse_record(obj, tokenizer, config, default_id=f"{source}:{lineno}")
        except (DataError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                err = DataError(exc.reason, line=lineno, sample_id=exc.sample_id)
            else:
                err = DataError(f"malformed record: {exc!r}", line=lineno)
            if config.on_error == "abort":
                raise err from exc
            logger.warning("skipping %s", err)
            if errors is not None:
                errors.append(err)


def ingest(
    path: str | Path,
    tokenizer: TokenizerPort | None = None,
    config: IngestConfig | None = None,
    errors: list | None = None,
) -> Iterator[Sample]:
    path = Path(path)
    tokenizer = tokenizer or ByteTokenizer()
    with path.open("r", encoding="utf-8") as fh:
        yield from ingest_lines(fh, tokenizer, config, source=path.stem, errors=errors)


def sample_to_json(sample: Sample) -> dict:
    """Pre-tokenized form; ingesting it yields an equal Sample."""
    return {
        "id": sample.id,
        "blocks": [{"role": b.role.value, "tokens": b.tokens.tolist()} for b in sample.blocks],
    }


def truncate(sample: Sample, limit: int = DEFAULT_TRUNCATION) -> Sample:
    """Cut tokens from the tail so that ``total_len <= limit``.

    Blocks emptied by the cut go away, and so does a trailing instruction that
    lost its response.  A lone over-long first instruction is kept (cut to
    ``limit``) and the result has no response tokens.
    """
    if limit < 1:
        raise ValueError(f"truncation limit must be >= 1, got {limit}")
    if sample.total_len <= limit:
        return sample
    kept: list[Block] = []
    budget = limit
    for b in sample.blocks:
        if budget <= 0:
            break
        n = min(len(b), budget)
        kept.append(b if n == len(b) else Block(b.role, b.tokens[:n].copy(), None))
        budget -= n
    if len(kept) > 1 and kept[-1].role is Role.INSTRUCTION:
        kept.pop()
    out = Sample(sample.id, kept, truncated=True)
    if not out.has_response:
        logger.info("sample %s has no response after truncation to %d", sample.id, limit)
    return out


def to_record(sample: Sample, positions) -> TrainingRecord:
    """Assemble input ids, position ids and the response-only loss mask.

    ``positions`` is a PositionAssignment or any integer sequence covering the
    sample's tokens.
    """
    pos = getattr(positions, "per_token_positions", positions)
    pos = np.asarray(pos, dtype=TOKEN_DTYPE)
    if pos.shape[0] != sample.total_len:
        raise DataError(
            f"position count {pos.shape[0]} does not match token count {sample.total_len}",
            sample_id=sample.id,
        )
    mask = np.concatenate(
        [np.full(len(b), b.role is Role.RESPONSE, dtype=bool) for b in sample.blocks]
    ) if sample.blocks else np.zeros(0, dtype=bool)
    rec = TrainingRecord(sample.id, sample.tokens, pos, mask)
    if not rec.useful:
        logger.info("record %s has no response tokens", sample.id)
    return rec
