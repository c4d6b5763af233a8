"""Dataset parsing, byte tokenizer, prompt assembly, synthetic generator."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiero_lora.data import (ASST_ID, EOT_ID, SYS_ID, USER_ID, VERBALIZER_IDS,
                             Instance, SynthConfig, cue_rule_predict,
                             detokenize, format_prompt, gen_synthetic,
                             parse_dataset, tokenize, write_dataset)
from hiero_lora.errors import DataError

# ---------------------------------------------------------------------------
# instances / parsing
# ---------------------------------------------------------------------------

def test_instance_invariants():
    Instance("a", "en", "x", "NOT_SEXIST")
    Instance("b", "es", "x", "SEXIST", "DIRECT", frozenset({"OBJECTIFICATION"}))
    with pytest.raises(DataError):
        Instance("c", "en", "x", "NOT_SEXIST", "DIRECT")
    with pytest.raises(DataError):
        Instance("d", "en", "x", "SEXIST", "DIRECT")  # missing level-3 labels
    with pytest.raises(DataError):
        Instance("e", "fr", "x", "NOT_SEXIST")


def test_parse_valid_not_sexist_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id":"1","lang":"en","text":"hi","label_task1":"NOT_SEXIST",'
                 '"label_task2":"-","labels_task3":"-"}\n')
    insts = parse_dataset(p)
    assert insts[0].gold_l2 is None and insts[0].gold_l3 == frozenset()


def test_parse_rejects_invariant_violation_with_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"1","lang":"en","text":"ok","label_task1":"NOT_SEXIST",'
                 '"label_task2":"-","labels_task3":"-"}\n'
                 '{"id":"2","lang":"en","text":"bad","label_task1":"NOT_SEXIST",'
                 '"label_task2":"-","labels_task3":["OBJECTIFICATION"]}\n')
    with pytest.raises(DataError, match=r":2:"):
        parse_dataset(p)


def test_parse_rejects_malformed_json_and_unknown_labels(tmp_path):
    p = tmp_path / "broken.jsonl"
    p.write_text("{not json}\n")
    with pytest.raises(DataError, match=r":1:"):
        parse_dataset(p)
    p.write_text('{"id":"1","lang":"en","text":"x","label_task1":"MAYBE",'
                 '"label_task2":"-","labels_task3":"-"}\n')
    with pytest.raises(DataError, match="MAYBE"):
        parse_dataset(p)


def test_parse_missing_file():
    with pytest.raises(DataError, match="nowhere.jsonl"):
        parse_dataset("nowhere.jsonl")


def test_roundtrip_is_byte_identical(tmp_path):
    insts = [
        Instance("1", "en", "plain text", "NOT_SEXIST"),
        Instance("2", "es", "hola #tag", "SEXIST", "REPORTED",
                 frozenset({"SEXUAL_VIOLENCE", "OBJECTIFICATION"})),
        Instance("3", "en", "emoji \U0001F600 mention @x", "SEXIST", "DIRECT",
                 frozenset({"STEREOTYPING_AND_DOMINANCE"})),
    ]
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(insts, p1)
    write_dataset(parse_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_byte_identity():
    assert tokenize("#A") == [35, 65]


@given(st.text(max_size=200))
@settings(max_examples=200, deadline=None)
def test_tokenize_roundtrip_on_fuzzed_text(s):
    assert detokenize(tokenize(s)) == s


def test_detokenize_rejects_special_ids():
    with pytest.raises(DataError):
        detokenize([65, SYS_ID])


# ---------------------------------------------------------------------------
# prompt assembly
# ---------------------------------------------------------------------------

def test_prompt_skeleton_for_empty_text():
    tokens, pos = format_prompt("", 1)
    assert tokens[0] == SYS_ID
    assert tokens.count(EOT_ID) == 2
    assert tokens[-1] == ASST_ID
    assert USER_ID in tokens
    assert pos == len(tokens)
    i = tokens.index(USER_ID)
    assert tokens[i + 1] == EOT_ID  # no text bytes in between


def test_training_prompt_ends_with_gold_verbalizer():
    tokens, pos = format_prompt("abc", 2, answer="REPORTED")
    assert tokens[-1] == VERBALIZER_IDS[(2, "REPORTED")]
    assert tokens[pos] == tokens[-1]


def test_answer_position_is_after_assistant_marker():
    for text in ("", "short", "x" * 50):
        tokens, pos = format_prompt(text, 3)
        assert pos == tokens.index(ASST_ID) + 1 == len(tokens)


def test_truncation_touches_text_bytes_only():
    long_text = "word " * 100
    tokens, _ = format_prompt(long_text, 1, max_seq=64)
    assert len(tokens) == 64
    assert tokens[0] == SYS_ID and tokens[-1] == ASST_ID
    assert tokens.count(EOT_ID) == 2
    # system prompt arrives intact
    short, _ = format_prompt("", 1, max_seq=64)
    sys_len = short.index(EOT_ID) - 1
    assert tokens[1: 1 + sys_len] == short[1: 1 + sys_len]


def test_truncation_never_splits_code_points():
    text = "\U0001F600" * 40  # 4 bytes each
    tokens, _ = format_prompt(text, 1, max_seq=64)
    i = tokens.index(USER_ID)
    j = tokens.index(EOT_ID, i)
    detokenize(tokens[i + 1: j])  # must stay valid UTF-8


def test_skeleton_overflow_is_a_data_error():
    with pytest.raises(DataError):
        format_prompt("anything", 1, max_seq=8)


def test_prompts_are_injective_on_distinct_texts():
    seen = set()
    for text in ("a", "b", "ab", "a b", "ba"):
        tokens, _ = format_prompt(text, 1)
        seen.add(tuple(tokens))
    assert len(seen) == 5


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def test_generator_is_deterministic():
    a, _ = gen_synthetic(SynthConfig(n_per_lang=30, seed=5))
    b, _ = gen_synthetic(SynthConfig(n_per_lang=30, seed=5))
    assert [i.__dict__ for i in a.train] == [i.__dict__ for i in b.train]
    c, _ = gen_synthetic(SynthConfig(n_per_lang=30, seed=6))
    assert [i.text for i in a.train] != [i.text for i in c.train]


def test_generator_sizes_and_disjoint_ids():
    splits, _ = gen_synthetic(SynthConfig(n_per_lang=25, seed=0))
    assert len(splits.train) == 50
    assert len(splits.dev) == len(splits.test) == 10
    ids = [i.id for s in splits for i in s]
    assert len(ids) == len(set(ids))
    assert all(i.lang in ("en", "es") for s in splits for i in s)


def test_generator_instances_satisfy_invariants():
    splits, _ = gen_synthetic(SynthConfig(n_per_lang=60, seed=1))
    for inst in splits.train + splits.dev + splits.test:
        if inst.gold_l1 == "NOT_SEXIST":
            assert inst.gold_l2 is None and not inst.gold_l3
        else:
            assert inst.gold_l2 is not None and inst.gold_l3


def test_perfect_information_corpus_admits_exact_rule():
    cfg = SynthConfig(n_per_lang=80, cue_strength=1.0, shared_cue_fraction=1.0, seed=2)
    splits, meta = gen_synthetic(cfg)
    for inst in splits.train + splits.dev + splits.test:
        l1, l2, l3 = cue_rule_predict(inst.text, inst.lang, meta)
        assert l1 == inst.gold_l1
        if inst.gold_l1 == "SEXIST":
            assert l2 == inst.gold_l2
            assert l3 == inst.gold_l3
        else:
            assert l2 is None and l3 == frozenset()


def test_shared_fraction_one_means_identical_cue_tables():
    _, meta = gen_synthetic(SynthConfig(n_per_lang=5, shared_cue_fraction=1.0, seed=3))
    assert meta.cue_tables["en"] == meta.cue_tables["es"]
    _, meta0 = gen_synthetic(SynthConfig(n_per_lang=5, shared_cue_fraction=0.0, seed=3))
    assert not set(meta0.cue_tables["en"]) & set(meta0.cue_tables["es"])


def test_zero_cue_strength_plants_no_cues():
    cfg = SynthConfig(n_per_lang=60, cue_strength=0.0, seed=4)
    splits, meta = gen_synthetic(cfg)
    words = {w.lstrip("#") for inst in splits.train for w in inst.text.split()}
    cue_words = set(meta.cue_tables["en"]) | set(meta.cue_tables["es"])
    assert not words & cue_words


def test_filler_vocabulary_is_language_disjoint():
    cfg = SynthConfig(n_per_lang=60, cue_strength=0.0, seed=9)
    splits, _ = gen_synthetic(cfg)
    vocab = {"en": set(), "es": set()}
    for inst in splits.train:
        for w in inst.text.split():
            vocab[inst.lang].add(w.lstrip("#"))
    emoji_free = {lang: {w for w in ws if w.isascii()} for lang, ws in vocab.items()}
    assert not emoji_free["en"] & emoji_free["es"]


def test_manifest_contains_config_and_cues(tmp_path):
    cfg = SynthConfig(n_per_lang=5, seed=8)
    _, meta = gen_synthetic(cfg)
    manifest = meta.as_manifest()
    assert manifest["config"]["n_per_lang"] == 5
    assert json.dumps(manifest)  # JSON-serializable
    assert set(manifest["cues"]) == {"en", "es"}
