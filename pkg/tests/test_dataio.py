import json
import logging

import numpy as np
import pytest

from qa2mn.dataio import (
    DataFormatError,
    Dataset,
    QaExample,
    export_canonical,
    generate_synthetic,
    load_canonical,
    parse_pathquestion,
    parse_worldcup,
    resolve_answer_ids,
)
from qa2mn.kgstore import k_hop_candidates


def write_release(tmp_path, kb_rows, question_lines, qfile="questions-2h.txt"):
    (tmp_path / "kb.txt").write_text(
        "".join("\t".join(r) + "\n" for r in kb_rows), encoding="utf-8")
    (tmp_path / qfile).write_text(
        "".join(l + "\n" for l in question_lines), encoding="utf-8")


KB = [
    ("archduke_johann_of_austria", "parents", "maria_louisa_of_spain"),
    ("maria_louisa_of_spain", "parents", "charles_iii_of_spain"),
    ("charles_iii_of_spain", "religion", "catholicism"),
    ("maria_louisa_of_spain", "religion", "catholicism"),
]


# ---------------------------------------------------------------------------
# release parsing
# ---------------------------------------------------------------------------

def test_parse_release_happy_path(tmp_path):
    write_release(tmp_path, KB, [
        "what is the archduke_johann_of_austria -s mother -s religion ?\tcatholicism\t"
        "archduke_johann_of_austria#parents#maria_louisa_of_spain#religion#catholicism",
        "who is the maria_louisa_of_spain -s father ?\tcharles_iii_of_spain",
    ])
    ds = parse_pathquestion(tmp_path)
    assert ds.name == "PQ"
    assert len(ds.examples) == 2
    assert ds.tags == {"2H"}
    assert ds.examples[0].answers == ["catholicism"]
    assert ds.examples[0].path[-1] == ["maria_louisa_of_spain", "religion", "catholicism"]
    assert ds.examples[1].path is None
    assert not ds.flagged_ids


def test_parse_multiple_answers(tmp_path):
    write_release(tmp_path, KB, [
        "who are the charles_iii_of_spain -s children ?\tmaria_louisa_of_spain/catholicism",
    ])
    ds = parse_pathquestion(tmp_path)
    assert ds.examples[0].answers == ["maria_louisa_of_spain", "catholicism"]


def test_parse_missing_kb(tmp_path):
    with pytest.raises(DataFormatError, match="kb.txt"):
        parse_pathquestion(tmp_path)


def test_parse_bad_line(tmp_path):
    write_release(tmp_path, KB, ["a question with no answer field"])
    with pytest.raises(DataFormatError, match="line 1"):
        parse_pathquestion(tmp_path)


def test_parse_flags_unresolvable_answers(tmp_path):
    # 1 bad answer out of 2 examples exceeds the 1% budget
    write_release(tmp_path, KB, [
        "q one ?\tcatholicism",
        "q two ?\tnot_an_entity",
    ])
    with pytest.raises(DataFormatError, match="unresolvable"):
        parse_pathquestion(tmp_path)


def test_parse_drops_inconsistent_path(tmp_path, caplog):
    write_release(tmp_path, KB, [
        "q ?\tcatholicism\tmaria_louisa_of_spain#parents#charles_iii_of_spain",
    ])
    with caplog.at_level(logging.WARNING):
        ds = parse_pathquestion(tmp_path)
    assert ds.examples[0].path is None


def test_parse_worldcup_name_and_tags(tmp_path):
    write_release(tmp_path, KB, ["q ?\tcatholicism"], qfile="questions-1h.txt")
    ds = parse_worldcup(tmp_path)
    assert ds.name == "WC"
    assert ds.tags == {"1H"}


def test_reference_stat_mismatch_warns_not_fails(tmp_path, caplog):
    write_release(tmp_path, KB, ["q ?\tcatholicism"])
    with caplog.at_level(logging.WARNING):
        ds = parse_pathquestion(tmp_path)
    assert len(ds.examples) == 1  # parsed despite count mismatch
    assert any("differs from published" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# canonical format
# ---------------------------------------------------------------------------

def make_dataset():
    return Dataset("toy", None, [
        QaExample("q1", "what is x ?", ["a"]),
        QaExample("q2", "what is y ?", ["a", "b"], core_entities=["y"]),
        QaExample("q3", "what is the z 's r ?", ["w"],
                  path=[["z", "r", "w"]]),
    ])


def test_canonical_round_trip(tmp_path):
    ds = make_dataset()
    path = tmp_path / "data.jsonl"
    export_canonical(ds, path)
    loaded = load_canonical(path)
    assert [e.id for e in loaded.examples] == ["q1", "q2", "q3"]
    assert loaded.examples[1].answers == ["a", "b"]
    assert loaded.examples[2].path == [["z", "r", "w"]]
    path2 = tmp_path / "again.jsonl"
    export_canonical(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_canonical_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert load_canonical(path).examples == []


def test_canonical_two_answer_record_survives(tmp_path):
    ds = Dataset("t", None, [QaExample("q", "u ?", ["x", "y"])])
    path = tmp_path / "d.jsonl"
    export_canonical(ds, path)
    record = json.loads(path.read_text(encoding="utf-8"))
    assert record["answers"] == ["x", "y"]
    assert load_canonical(path).examples[0].answers == ["x", "y"]


def test_canonical_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="line 1"):
        load_canonical(path)


def test_qa_example_invariants():
    with pytest.raises(ValueError, match="no answers"):
        QaExample("q", "u ?", [])
    with pytest.raises(ValueError, match="endpoint"):
        QaExample("q", "u ?", ["a"], path=[["x", "r", "b"]])


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def test_synthetic_one_hop_answerable_at_k1():
    ds = generate_synthetic(30, 4, 1, 10, seed=5)
    for ex in ds.examples:
        core = ds.graph.entity_id(ex.core_entities[0])
        _, a_c = k_hop_candidates(ds.graph, [core], k=1)
        gold = resolve_answer_ids(ds.graph, ex.answers)
        assert gold and set(gold) <= set(a_c)


def test_synthetic_deterministic():
    a = generate_synthetic(40, 5, 2, 25, seed=9)
    b = generate_synthetic(40, 5, 2, 25, seed=9)
    assert [e.question for e in a.examples] == [e.question for e in b.examples]
    assert [e.answers for e in a.examples] == [e.answers for e in b.examples]
    assert a.graph.triples == b.graph.triples


def test_synthetic_gold_in_candidates_at_k3():
    ds = generate_synthetic(200, 8, 2, 1000, seed=3)
    covered = 0
    for ex in ds.examples:
        core = ds.graph.entity_id(ex.core_entities[0])
        _, a_c = k_hop_candidates(ds.graph, [core], k=3)
        gold = set(resolve_answer_ids(ds.graph, ex.answers))
        covered += bool(gold & set(a_c))
    assert covered == len(ds.examples)


def test_synthetic_answers_are_all_endpoints():
    ds = generate_synthetic(50, 5, 2, 30, seed=13)
    g = ds.graph
    for ex in ds.examples:
        start = g.entity_id(ex.core_entities[0])
        rels = [g.relation_to_id[step[1]] for step in ex.path]
        frontier = {start}
        for rel in rels:
            frontier = {g.triples[t].tail for e in frontier for t in g.by_head[e]
                        if g.triples[t].relation == rel}
        assert sorted(g.entities[e] for e in frontier) == ex.answers


def test_synthetic_unique_answers_flag():
    ds = generate_synthetic(60, 6, 2, 20, seed=21, unique_answers=True)
    assert all(len(ex.answers) == 1 for ex in ds.examples)


def test_synthetic_min_out_degree():
    ds = generate_synthetic(40, 5, 2, 10, seed=2)
    degrees = [len(ds.graph.by_head[e]) for e in range(len(ds.graph.entities))]
    assert min(degrees) >= 2


def test_synthetic_questions_distinct():
    ds = generate_synthetic(80, 6, 2, 100, seed=4)
    questions = [e.question for e in ds.examples]
    assert len(set(questions)) == len(questions)


def test_synthetic_impossible_count_raises():
    with pytest.raises(ValueError, match="distinct questions"):
        generate_synthetic(5, 2, 1, 500, seed=0)
