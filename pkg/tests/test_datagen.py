import json

import pytest

from resmem.backbone import SequenceLengthError, decode_tokens
from resmem.datagen import (
    RELATIONS,
    BenchmarkSet,
    ConfigurationError,
    EditSample,
    SchemaError,
    all_edit_texts,
    generate_benchmark,
    load_records,
    save_records,
    unique_prompts,
)


def test_single_fact_schema():
    b = generate_benchmark(1, 1, 0, seed=0)
    (e,) = b.edits
    assert len(e.rephrases) == 1
    assert e.rephrases[0] != e.prompt
    assert e.target and e.irrelevant_target


def test_same_seed_same_benchmark():
    assert generate_benchmark(30, 3, 10, seed=4) == generate_benchmark(30, 3, 10, seed=4)
    assert generate_benchmark(30, 3, 10, seed=4) != generate_benchmark(30, 3, 10, seed=5)


def test_thousand_unique_facts():
    b = generate_benchmark(1000, 3, 100, seed=0)
    assert unique_prompts(b.edits) == 1000
    assert len({(e.prompt, e.target) for e in b.edits}) == 1000


def test_template_exhaustion():
    n_alt = min(len(t) for t, _ in RELATIONS.values()) - 1
    generate_benchmark(2, n_alt, 0)
    with pytest.raises(ConfigurationError):
        generate_benchmark(2, n_alt + 1, 0)
    with pytest.raises(ConfigurationError):
        generate_benchmark(0, 1, 0)


def test_centering_disjoint_from_edit_texts():
    b = generate_benchmark(300, 3, 100, seed=3)
    assert not set(b.centering_corpus) & all_edit_texts(b.edits)
    assert not set(b.centering_corpus) & {e.irrelevant_prompt for e in b.edits}


def test_edit_target_differs_from_pretrained_answer():
    b = generate_benchmark(200, 2, 0, seed=9)
    taught = dict(b.pretrain_corpus)
    for e in b.edits:
        assert taught[e.prompt] != e.target
        for r in e.rephrases:
            assert taught[r] == taught[e.prompt]


def test_irrelevant_prompts_share_nothing_with_facts():
    b = generate_benchmark(100, 1, 0, seed=2)
    for e in b.edits:
        assert not any(c.isalpha() for c in decode_tokens(e.irrelevant_prompt))


def test_save_load_round_trip(tmp_path):
    b = generate_benchmark(20, 3, 5, seed=1)
    path = tmp_path / "b.jsonl"
    save_records(b, path)
    back = load_records(path)
    assert back.edits == b.edits
    assert back.centering_corpus == b.centering_corpus
    assert back.pretrain_corpus == b.pretrain_corpus


def test_public_style_record_round_trips(tmp_path):
    rec = {
        "prompt": "What network aired Faszination Wissen?",
        "rephrase": "Which network broadcast Faszination Wissen?",
        "target": " Bayerischer Rundfunk",
        "irrelevant_prompt": "nq question: who played desmond doss father in hacksaw ridge",
        "irrelevant_target": " Hugo Weaving",
    }
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps(rec) + "\n", encoding="utf-8")
    b = load_records(path)
    out = tmp_path / "o.jsonl"
    save_records(b, out)
    (e,) = load_records(out).edits
    assert decode_tokens(e.prompt) == rec["prompt"]
    assert [decode_tokens(r) for r in e.rephrases] == [rec["rephrase"]]
    assert decode_tokens(e.target) == rec["target"]
    assert decode_tokens(e.irrelevant_target) == rec["irrelevant_target"]


def test_empty_file_is_empty_benchmark(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    assert load_records(path) == BenchmarkSet()


def test_missing_target_names_line(tmp_path):
    good = json.dumps({"prompt": "a", "rephrase": "b", "target": "c", "irrelevant_prompt": "d", "irrelevant_target": "e"})
    bad = json.dumps({"prompt": "a", "rephrase": "b", "irrelevant_prompt": "d", "irrelevant_target": "e"})
    path = tmp_path / "m.jsonl"
    path.write_text(good + "\n" + bad + "\n")
    with pytest.raises(SchemaError, match="line 2.*target"):
        load_records(path)


def test_bad_json_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(SchemaError, match="line 1"):
        load_records(path)


def test_overflow_is_length_error(tmp_path):
    rec = {"prompt": "x" * 200, "rephrase": "b", "target": "c", "irrelevant_prompt": "d", "irrelevant_target": "e"}
    path = tmp_path / "long.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(SequenceLengthError, match="line 1"):
        load_records(path, max_seq_len=96)


def test_edit_sample_record_fields():
    e = EditSample(0, (65,), (66,), ((67,),), (68,), (69,))
    assert e.to_record() == {
        "prompt": "A", "rephrases": ["C"], "target": "B", "irrelevant_prompt": "D", "irrelevant_target": "E",
    }
