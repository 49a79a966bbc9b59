"""Corpus IO, tokenizer, synthetic task generation, and batching tests."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pytest

from groundedgen import data as gd
from groundedgen.data import (BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID,
                              GroundedSample, PreparedSample, SyntheticTaskSpec,
                              Vocab, collate_batch, extract_value_token,
                              generate_synthetic, leakage_fraction, load_jsonl,
                              pad_batch, prepare, write_jsonl)


@dataclass
class LengthConfig:
    max_source_len: int = 64
    max_context_len: int = 32
    max_target_len: int = 16


SAMPLES = [
    GroundedSample(["the post was published ."], ["hello there ."], "it was published ."),
    GroundedSample(["a b c", "d e f"], ["one", "two"], "three four"),
    GroundedSample([], ["only context"], "still a target"),
]


# ---------------------------------------------------------------------------
# jsonl


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_jsonl(path, SAMPLES)
    back = load_jsonl(path)
    assert back == SAMPLES


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_jsonl(path) == []


def test_missing_field_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"documents": [], "context": ["c"], "target": "t"})
    bad = json.dumps({"documents": [], "context": ["c"]})
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(ValueError, match=r":2: missing field 'target'"):
        load_jsonl(path)


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(ValueError, match=":1"):
        load_jsonl(path)


def test_order_preserved(tmp_path):
    path = tmp_path / "three.jsonl"
    write_jsonl(path, SAMPLES)
    assert [s.target for s in load_jsonl(path)] == [s.target for s in SAMPLES]


# ---------------------------------------------------------------------------
# vocabulary and tokenization


def test_reserved_ids_fixed():
    v = Vocab.build(SAMPLES)
    assert (BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID) == (0, 1, 2, 3, 4)
    for i, tok in enumerate(gd.RESERVED_TOKENS):
        assert v.token_of(i) == tok


def test_tokenize_normalizes():
    v = Vocab.build([GroundedSample([], ["hello , world"], "hello world")])
    ids = v.tokenize("Hello, world")
    assert [v.token_of(i) for i in ids] == ["hello", ",", "world"]


def test_oov_maps_to_unk():
    v = Vocab.build(SAMPLES)
    assert v.tokenize("zyzzyva") == [UNK_ID]


def test_detokenize_round_trip_for_covered_text():
    v = Vocab.build(SAMPLES)
    text = "the post was published ."
    assert v.detokenize(v.tokenize(text)) == text


def test_detokenize_drops_reserved():
    v = Vocab.build(SAMPLES)
    ids = [BOS_ID] + v.tokenize("hello there .") + [EOS_ID, PAD_ID]
    assert v.detokenize(ids) == "hello there ."


def test_vocab_build_deterministic_and_frequency_ordered():
    a = Vocab.build(SAMPLES)
    b = Vocab.build(SAMPLES)
    assert [a.token_of(i) for i in range(len(a))] == [b.token_of(i) for i in range(len(b))]
    # frequency then lexicographic: "." appears three times in SAMPLES
    assert a.token_of(len(gd.RESERVED_TOKENS)) == "."


def test_vocab_save_load_round_trip(tmp_path):
    v = Vocab.build(SAMPLES)
    v.save(tmp_path / "vocab.txt")
    w = Vocab.load(tmp_path / "vocab.txt")
    assert len(v) == len(w)
    assert all(v.token_of(i) == w.token_of(i) for i in range(len(v)))


# ---------------------------------------------------------------------------
# synthetic task


def small_spec(**kw) -> SyntheticTaskSpec:
    base = dict(num_entities=10, num_attributes=5, facts_per_document=3,
                distractor_count=1, num_values=12, grammar_seed=1,
                train_size=300, valid_size=40, test_size=200)
    base.update(kw)
    return SyntheticTaskSpec(**base)


def test_generation_deterministic():
    a = generate_synthetic(small_spec(), seed=9)
    b = generate_synthetic(small_spec(), seed=9)
    assert a == b


def test_value_always_in_own_document():
    train, valid, test = generate_synthetic(small_spec(), seed=3)
    for s in train + valid + test:
        value = extract_value_token(s.target)
        assert any(value in gd.word_tokens(d) for d in s.documents)


def test_document_count_and_context_shape():
    spec = small_spec(distractor_count=2)
    train, _, _ = generate_synthetic(spec, seed=0)
    for s in train[:50]:
        assert len(s.documents) == 3
        assert len(s.context) == 2
        assert s.context[-1].startswith("what is the")


def test_test_split_is_leakage_free():
    train, _, test = generate_synthetic(small_spec(train_size=1500, test_size=1000), seed=5)
    assert leakage_fraction(train, test) == 0.0


def test_train_split_does_repeat_known_pairs():
    # sanity check on the audit itself: train pools overlap with themselves
    train, _, _ = generate_synthetic(small_spec(train_size=2000), seed=5)
    assert leakage_fraction(train[:1000], train[1000:]) > 0.0


def test_too_small_value_pool_rejected():
    with pytest.raises(ValueError, match="num_values"):
        generate_synthetic(small_spec(num_values=1), seed=0)


def test_spec_kv_round_trip(tmp_path):
    spec = small_spec()
    path = tmp_path / "task.spec"
    path.write_text("num_entities=10\nnum_attributes=5\nfacts_per_document=3\n"
                    "distractor_count=1\nnum_values=12\ngrammar_seed=1\n"
                    "train_size=300\nvalid_size=40\ntest_size=200\n")
    assert SyntheticTaskSpec.from_kv_file(path) == spec


def test_spec_kv_unknown_key(tmp_path):
    path = tmp_path / "task.spec"
    path.write_text("nope=3\n")
    with pytest.raises(ValueError, match="unknown"):
        SyntheticTaskSpec.from_kv_file(path)


# ---------------------------------------------------------------------------
# preparation and batching


def test_prepare_joins_turns_with_sep():
    v = Vocab.build([GroundedSample([], ["hi", "hello"], "x")])
    p = prepare(GroundedSample([], ["hi", "hello"], "x"), v, LengthConfig())
    hi, hello = v.tokenize("hi")[0], v.tokenize("hello")[0]
    assert p.context_ids == [hi, SEP_ID, hello]


def test_prepare_joins_passages_with_sep():
    sample = GroundedSample(["a b", "c"], ["q"], "x")
    v = Vocab.build([sample])
    p = prepare(sample, v, LengthConfig())
    assert p.document_ids == v.tokenize("a b") + [SEP_ID] + v.tokenize("c")


def test_overlong_document_truncated_to_cap():
    sample = GroundedSample(["w " * 200], ["q"], "x")
    v = Vocab.build([sample])
    cfg = LengthConfig(max_source_len=20, max_context_len=8)
    p = prepare(sample, v, cfg)
    assert len(p.context_ids) + len(p.document_ids) == 20


def test_context_keeps_most_recent_tokens():
    sample = GroundedSample([], ["old words here", "newest turn"], "x")
    v = Vocab.build([sample])
    cfg = LengthConfig(max_context_len=2)
    p = prepare(sample, v, cfg)
    assert [v.token_of(i) for i in p.context_ids] == ["newest", "turn"]


def test_target_capped_with_room_for_eos():
    sample = GroundedSample([], ["q"], "t " * 50)
    v = Vocab.build([sample])
    p = prepare(sample, v, LengthConfig(max_target_len=10))
    assert len(p.target_ids) == 9


def test_prepare_paper_scale_source_cap():
    # Wikipedia-update profile: source capped at 1024
    sample = GroundedSample(["w " * 3000], ["c " * 600], "x")
    v = Vocab.build([sample])
    cfg = LengthConfig(max_source_len=1024, max_context_len=512, max_target_len=128)
    p = prepare(sample, v, cfg)
    assert len(p.source_ids) <= 1024


def test_pad_batch_shapes_and_mask():
    ids, mask = pad_batch([[5, 6], [7]], pad_id=PAD_ID)
    assert ids.tolist() == [[5, 6], [7, PAD_ID]]
    assert mask.tolist() == [[True, True], [True, False]]


def test_collate_teacher_forcing_layout():
    p = PreparedSample(context_ids=[5], document_ids=[6, 7], target_ids=[8, 9])
    batch = collate_batch([p])
    assert batch.source_ids.tolist() == [[5, 6, 7]]
    assert batch.decoder_input.tolist() == [[BOS_ID, 8, 9]]
    assert batch.decoder_target.tolist() == [[8, 9, EOS_ID]]
