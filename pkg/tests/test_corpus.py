import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipalign.corpus import (
    ByteTokenizer,
    DataError,
    IngestConfig,
    Role,
    Sample,
    ingest,
    ingest_lines,
    sample_to_json,
    to_record,
    truncate,
)
from skipalign.skip import dense_positions

tok = ByteTokenizer()


def _one(record, **cfg):
    return list(ingest_lines([json.dumps(record)], tok, IngestConfig(**cfg)))


def test_minimal_record():
    [s] = _one({"messages": [{"role": "user", "content": "hi"}, {"role": "assistant", "content": "hello"}]})
    assert s.roles == [Role.INSTRUCTION, Role.RESPONSE]
    assert s.blocks[0].tokens.tolist() == tok.encode("hi")
    assert s.total_len == 7


def test_system_folds_into_first_instruction():
    [s] = _one({"messages": [{"role": "system", "content": "S"}, {"role": "user", "content": "U"},
                             {"role": "assistant", "content": "A"}]})
    assert len(s.blocks) == 2
    assert s.blocks[0].tokens.tolist() == tok.encode("S\nU")


def test_same_role_messages_merge():
    [s] = _one({"messages": [{"role": "user", "content": "a"}, {"role": "user", "content": "b"},
                             {"role": "assistant", "content": "c"}]})
    assert len(s.blocks) == 2
    assert s.blocks[0].tokens.tolist() == tok.encode("a\nb")


def test_custom_separator():
    [s] = _one({"messages": [{"role": "user", "content": "a"}, {"role": "user", "content": "b"},
                             {"role": "assistant", "content": "c"}]}, separator_id=7)
    assert s.blocks[0].tokens.tolist() == [ord("a"), 7, ord("b")]


def test_sharegpt_format_and_ids():
    rec = {"id": "x1", "conversations": [{"from": "human", "value": "q"}, {"from": "gpt", "value": "r"}]}
    [s] = _one(rec)
    assert s.id == "x1" and s.roles == [Role.INSTRUCTION, Role.RESPONSE]


def test_leading_response_sentinel_or_reject():
    rec = {"messages": [{"role": "assistant", "content": "A"}, {"role": "user", "content": "U"}]}
    [s] = _one(rec, sentinel_id=3)
    assert s.blocks[0].tokens.tolist() == [3]
    assert s.roles == [Role.INSTRUCTION, Role.RESPONSE, Role.INSTRUCTION]
    with pytest.raises(DataError):
        _one(rec, leading_response="reject")


def test_empty_messages_dropped():
    [s] = _one({"messages": [{"role": "user", "content": "a"}, {"role": "assistant", "content": ""},
                             {"role": "user", "content": "b"}, {"role": "assistant", "content": "c"}]})
    # the empty response disappears, so the two user turns merge
    assert s.roles == [Role.INSTRUCTION, Role.RESPONSE]
    assert s.blocks[0].tokens.tolist() == tok.encode("a\nb")


def test_malformed_line_abort_reports_line_number():
    lines = [json.dumps({"messages": [{"role": "user", "content": "a"}]}), "{not json"]
    with pytest.raises(DataError) as ei:
        list(ingest_lines(lines, tok))
    assert ei.value.line == 2


def test_malformed_line_skip_collects_errors():
    lines = ["{bad", json.dumps({"messages": [{"role": "user", "content": "a"},
                                              {"role": "assistant", "content": "b"}]}),
             json.dumps({"messages": [{"role": "alien", "content": "a"}]})]
    errors = []
    out = list(ingest_lines(lines, tok, IngestConfig(on_error="skip"), errors=errors))
    assert len(out) == 1
    assert [e.line for e in errors] == [1, 3]


def test_pretokenized_roundtrip(tmp_path):
    path = tmp_path / "c.jsonl"
    recs = [
        {"id": "a", "messages": [{"role": "system", "content": "sys"}, {"role": "user", "content": "héllo"},
                                 {"role": "assistant", "content": "w"}, {"role": "user", "content": "x"},
                                 {"role": "assistant", "content": "yz"}]},
        {"id": "b", "blocks": [{"role": "instruction", "tokens": [1, 2]}, {"role": "response", "tokens": [3]}]},
    ]
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    first = list(ingest(path))
    again_path = tmp_path / "again.jsonl"
    again_path.write_text("\n".join(json.dumps(sample_to_json(s)) for s in first) + "\n")
    second = list(ingest(again_path))
    assert first == second


@given(st.text())
def test_byte_tokenizer_roundtrip(text):
    assert tok.decode(tok.encode(text)) == text
    assert all(0 <= t < tok.vocab_size for t in tok.encode(text))


# -- truncation ---------------------------------------------------------------

def test_truncate_under_limit_is_identity():
    s = Sample.from_lengths("s", [4, 6])
    assert truncate(s, 4096) is s


def test_truncate_tail_cut():
    s = truncate(Sample.from_lengths("s", [3000, 2000]), 4096)
    assert s.block_lengths == [3000, 1096]
    assert s.truncated


def test_truncate_drops_whole_later_turns():
    s = truncate(Sample.from_lengths("s", [3000, 1500, 600, 400]), 4096)
    assert s.block_lengths == [3000, 1096]


def test_truncate_drops_dangling_instruction():
    s = truncate(Sample.from_lengths("s", [3000, 1000, 500, 400]), 4096)
    assert s.block_lengths == [3000, 1000]


def test_truncate_overlong_first_instruction_is_flagged():
    s = truncate(Sample.from_lengths("s", [5000, 10]), 4096)
    assert s.block_lengths == [4096]
    assert not s.has_response
    assert not to_record(s, dense_positions(s)).useful


def test_truncate_rejects_bad_limit():
    with pytest.raises(ValueError):
        truncate(Sample.from_lengths("s", [1, 1]), 0)


@settings(max_examples=200)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=10), st.integers(1, 1500))
def test_truncate_properties(lengths, limit):
    s = Sample.from_lengths("s", lengths)
    t = truncate(s, limit)
    assert t.total_len <= limit
    assert all(len(b) > 0 for b in t.blocks)
    roles = t.roles
    assert all(r is (Role.INSTRUCTION if i % 2 == 0 else Role.RESPONSE) for i, r in enumerate(roles))
    if s.total_len > limit and len(t.blocks) > 1:
        assert roles[-1] is Role.RESPONSE
    # kept tokens are a prefix of the original
    assert np.array_equal(t.tokens, s.tokens[: t.total_len])


# -- records ------------------------------------------------------------------

def test_record_mask_single_turn():
    s = Sample.from_lengths("s", [3, 2])
    rec = to_record(s, dense_positions(s))
    assert rec.loss_mask.tolist() == [False, False, False, True, True]
    assert rec.useful


def test_record_mask_two_turns():
    s = Sample.from_lengths("s", [2, 2, 2, 2])
    rec = to_record(s, dense_positions(s))
    assert rec.loss_mask.astype(int).tolist() == [0, 0, 1, 1, 0, 0, 1, 1]


def test_record_instruction_only_is_useless():
    s = Sample.from_lengths("s", [5])
    rec = to_record(s, dense_positions(s))
    assert not rec.loss_mask.any() and not rec.useful


def test_record_length_mismatch():
    s = Sample.from_lengths("s", [3, 2])
    with pytest.raises(DataError):
        to_record(s, list(range(4)))


def test_record_json_field_order_and_ints():
    s = Sample.from_lengths("s", [1, 1])
    obj = to_record(s, dense_positions(s)).to_json()
    assert list(obj) == ["input_ids", "position_ids", "loss_mask", "sample_id"]
    assert obj["loss_mask"] == [0, 1]
    text = json.dumps(obj)
    assert "." not in text.replace('"s"', "")


@given(st.lists(st.integers(1, 50), min_size=1, max_size=8))
def test_record_invariants(lengths):
    s = Sample.from_lengths("s", lengths)
    rec = to_record(s, dense_positions(s))
    assert len(rec.input_ids) == len(rec.position_ids) == len(rec.loss_mask)
    assert (np.diff(rec.position_ids) > 0).all() and rec.position_ids[0] >= 0
    assert rec.loss_mask.sum() == sum(lengths[1::2])
