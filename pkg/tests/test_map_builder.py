import json
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insightmap.backends import MockScript, SearchResult, mock_backends
from insightmap.map_builder import (
    BuildError,
    BuilderConfig,
    ClusterSuggestion,
    ConceptMention,
    SourceDoc,
    build_concept_layer,
    build_top_down,
    build_topic_tree,
    chunk_text,
    cluster_concepts,
    disambiguate,
    extract_concepts,
    extract_doc_metadata,
    insert_seed_guided,
    leaf_topics,
    load_corpus,
    score_insight_potential,
    select_candidates,
    topic_level,
    unify_description,
)
from insightmap.map_model import EdgeKind, ExplorationMap, NodeKind, validate


def fenced(value) -> str:
    return "```json\n" + json.dumps(value) + "\n```"


def mention(name, kind="organization", desc="NOT FOUND", doc=None):
    return ConceptMention(name, kind, desc, [name], doc)


def roles(backends, role):
    return [c for c in backends.model.calls if c.role_tag == role]


# -- corpus -----------------------------------------------------------------

def test_chunking_overlaps_and_covers():
    text = "abcdefghij" * 5
    chunks = chunk_text(text, 20, 5)
    assert chunks[0] == text[:20] and chunks[1].startswith(text[15:20])
    assert chunks[-1].endswith(text[-5:])
    assert chunk_text("   ", 10, 2) == []


def test_load_corpus_reads_sidecar(tmp_path):
    (tmp_path / "a.txt").write_text("hello", encoding="utf-8")
    (tmp_path / "a.txt.json").write_text(json.dumps({"page": 3, "url": "https://x.example"}))
    (tmp_path / "b.md").write_text("x" * 25, encoding="utf-8")
    docs = load_corpus(tmp_path, chunk_size=10, overlap=0)
    assert docs[0].metadata == {"filename": "a.txt", "page": "3", "url": "https://x.example"}
    assert [d.name for d in docs[1:]] == ["b.md#0", "b.md#1", "b.md#2"]


# -- extraction -------------------------------------------------------------

def test_extract_single_mention():
    s = MockScript().add(fenced([{"concept": "Kenya", "type": "location", "description": "A country",
                                  "appearing phrases": ["Kenya"]}]), role="concept.extract")
    b = mock_backends(s)
    out = extract_concepts(b, SourceDoc("d", "Kenya is in East Africa."))
    assert [m.concept for m in out] == ["Kenya"]


def test_extract_empty_and_known_list_in_prompt():
    b = mock_backends(MockScript().add("```json\n[]\n```", role="concept.extract"))
    assert extract_concepts(b, SourceDoc("d", "nothing here"), known=["COVID-19"]) == []
    assert "COVID-19" in roles(b, "concept.extract")[0].system


def test_extract_missing_phrases_defaults_to_name():
    b = mock_backends(MockScript().add(fenced([{"concept": "ILO", "type": "org"}]), role="concept.extract"))
    assert extract_concepts(b, SourceDoc("d", "ILO"))[0].appearing_phrases == ["ILO"]


# -- disambiguation ---------------------------------------------------------

def judge_script(same_pairs=()):
    same = {frozenset(p) for p in same_pairs}

    def respond(req):
        a, b = re.findall(r"Concept \d: (.*)", req.last_text)
        verdict = "same" if frozenset((a, b)) in same else "different"
        return fenced({"concept_pair": [a, b], "reasoning": "-", "answer": verdict})

    return MockScript().add(respond, role="concept.disambiguate")


def test_acronym_merged_by_judge():
    b = mock_backends(judge_script([("UAE", "United Arab Emirates")]))
    out = disambiguate(b, [mention("UAE", doc="1"), mention("United Arab Emirates", doc="2")])
    assert len(out) == 1
    assert out[0].name == "United Arab Emirates"
    assert out[0].docs == ["1", "2"]


def test_case_fold_merges_without_judge():
    b = mock_backends(judge_script())
    out = disambiguate(b, [mention("ilo"), mention("ILO"), mention("ILO")])
    assert len(out) == 1 and out[0].name == "ILO"
    assert roles(b, "concept.disambiguate") == []


def test_person_initial_rule():
    b = mock_backends(judge_script())
    out = disambiguate(b, [mention("J. Smith", "person"), mention("John Smith", "person"),
                           mention("Jane Doe", "person")], k=1)
    assert sorted(c.name for c in out) == ["J. Smith", "Jane Doe"] or \
        sorted(c.name for c in out) == ["Jane Doe", "John Smith"]
    assert any(set(c.surface_forms) == {"J. Smith", "John Smith"} for c in out)


def test_different_kept_apart():
    b = mock_backends(judge_script())
    out = disambiguate(b, [mention("Paris", "location"), mention("Paris Agreement", "event")])
    assert sorted(c.name for c in out) == ["Paris", "Paris Agreement"]


def test_unparseable_judge_is_different():
    b = mock_backends(MockScript().add("no idea", role="concept.disambiguate"))
    out = disambiguate(b, [mention("A"), mention("B")], k=1)
    assert len(out) == 2


NAMES = ["UAE", "United Arab Emirates", "ILO", "ilo", "International Labour Organization",
         "WHO", "World Health Organization", "Paris", "Paris Agreement", "Kenya", "Nairobi"]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(NAMES), min_size=1, max_size=12),
       st.lists(st.tuples(st.sampled_from(NAMES), st.sampled_from(NAMES)), max_size=6),
       st.integers(1, 4))
def test_disambiguate_idempotent(names, same, k):
    b = mock_backends(judge_script(same))
    first = disambiguate(b, [mention(n) for n in names], k=k)
    second = disambiguate(b, first, k=k)
    key = lambda groups: sorted(tuple(g.surface_forms) for g in groups)
    assert key(second) == key(first)
    assert sorted(g.name for g in second) == sorted(g.name for g in first)


# -- descriptions and metadata ---------------------------------------------

def test_single_description_passthrough():
    b = mock_backends(MockScript())
    assert unify_description(b, "X", ["only one", "NOT FOUND"]) == "only one"


def test_descriptions_merged_by_model():
    s = MockScript().add(fenced({"concept": "ILO", "description": "UN labour agency."}), role="concept.describe")
    b = mock_backends(s)
    assert unify_description(b, "ILO", ["UN agency", "labour body of the UN"]) == "UN labour agency."


def test_contradictory_descriptions_majority():
    s = MockScript().add(fenced({"concept": "HQ", "description": "Based in Geneva."}),
                         role="concept.describe", match="Geneva")
    b = mock_backends(s)
    out = unify_description(b, "HQ", ["Based in Geneva.", "Headquartered in Geneva.", "Based in Paris."])
    assert out == "Based in Geneva."
    assert "Based in Paris." in roles(b, "concept.describe")[0].last_text


def test_description_fallback_longest():
    b = mock_backends(MockScript().add("garbage", role="concept.describe"))
    assert unify_description(b, "X", ["short", "the longest one"]) == "the longest one"


def test_metadata_date_rule():
    s = MockScript()
    s.add(fenced({"date": "Sep 2024"}), role="concept.metadata", repeat=1)
    s.add(fenced({"organization": "ILO", "document_type": "update", "date": "01_09_2024"}),
          role="concept.metadata")
    b = mock_backends(s)
    meta = extract_doc_metadata(b, SourceDoc("d", "t", {"filename": "ILO_World_Employment_Update_Sep_2024.pdf"}))
    assert meta["date"] == "01_09_2024" and meta["organization"] == "ILO"
    assert len(roles(b, "concept.metadata")) == 2


def test_metadata_without_title():
    assert extract_doc_metadata(mock_backends(MockScript()), SourceDoc("d", "t")) == {}


# -- candidates and potential ----------------------------------------------

def _freq_map(freqs):
    m = ExplorationMap.with_root("g")
    docs = [m.add_node(NodeKind.DOCUMENT, f"d{i}") for i in range(max(freqs))]
    ids = []
    for f in freqs:
        c = m.add_node(NodeKind.CONCEPT, f"c{f}")
        for d in docs[:f]:
            m.add_edge(d, c, EdgeKind.DOC_CONCEPT)
        ids.append(c)
    return m, ids


def test_near_median_band():
    freqs = [1, 1, 2, 3, 3, 8, 40]
    m, ids = _freq_map(freqs)
    chosen = select_candidates(m, 0.5)
    assert sorted(len(m.documents_of(c)) for c in chosen) == [2, 3, 3]


def test_band_trivial_cases():
    m, ids = _freq_map([4, 4, 4])
    assert select_candidates(m) == ids
    m, ids = _freq_map([7])
    assert select_candidates(m) == ids
    assert select_candidates(ExplorationMap.with_root("g")) == []


ILO_VERDICT = {
    "reasoning": "One document flags automation pressure on jobs, another a care-worker shortfall.",
    "key_connecting_phrases": ["care workforce shortfall", "automation lowers labour share"],
    "connection_drawn": "[Document1] shows shortage while [Document2] shows displacement",
    "initial_hypothesis": "Public investment in the care workforce can offset automation-driven "
                          "declines in the labour-income share.",
    "insight_potential": "VERY HIGH",
}


def test_potential_parses_level():
    b = mock_backends(MockScript().add(fenced(ILO_VERDICT), role="concept.potential"))
    v = score_insight_potential(b, "ILO", "labour agency", [("d1", "text", {})])
    assert v.level == "VERY_HIGH" and "care workforce" in v.initial_hypothesis


def test_potential_none_forces_no_hypothesis():
    b = mock_backends(MockScript().add(fenced(dict(ILO_VERDICT, insight_potential="NONE")),
                                       role="concept.potential"))
    v = score_insight_potential(b, "ILO", "", [("d1", "text", {})])
    assert v.level == "NONE" and v.initial_hypothesis is None


def test_potential_unparseable_is_none():
    b = mock_backends(MockScript().add("{broken", role="concept.potential"))
    assert score_insight_potential(b, "x", "", [("d", "t", {})]).level == "NONE"


# -- concept layer ----------------------------------------------------------

def corpus_script():
    s = judge_script()
    extraction = {
        "alpha doc": [{"concept": "Acme", "type": "org", "description": "A firm"},
                      {"concept": "Boston", "type": "location", "description": "A city"}],
        "beta doc": [{"concept": "Acme", "type": "org", "description": "A firm"},
                     {"concept": "Cobalt", "type": "product", "description": "A metal"}],
        "gamma doc": [{"concept": "acme", "type": "org", "description": "A firm"},
                      {"concept": "Boston", "type": "location", "description": "A city"}],
    }
    for key, value in extraction.items():
        s.add(fenced(value), role="concept.extract", match=key, scope="last")
    s.add("```json\n{}\n```", role="concept.metadata")
    s.add(fenced(dict(ILO_VERDICT, insight_potential="HIGH")), role="concept.potential", match="CONCEPT: Acme")
    s.add(fenced(dict(ILO_VERDICT, insight_potential="LOW")), role="concept.potential", match="CONCEPT: Boston")
    s.add(fenced(dict(ILO_VERDICT, insight_potential="NONE")), role="concept.potential")
    return s


DOCS = [SourceDoc("a.txt", "alpha doc"), SourceDoc("b.txt", "beta doc"), SourceDoc("c.txt", "gamma doc")]


def test_concept_layer_counts():
    b = mock_backends(corpus_script())
    m = build_concept_layer(b, DOCS, "goal")
    kinds = [n.kind for n in m.nodes.values()]
    assert kinds.count(NodeKind.DOCUMENT) == 3
    assert kinds.count(NodeKind.CONCEPT) == 3
    assert kinds.count(NodeKind.HYPOTHESIS) == 1
    assert len(m.nodes) == 8
    assert sum(e.kind is EdgeKind.DOC_CONCEPT for e in m.edges) == 6
    assert sum(e.kind is EdgeKind.PARENT_CHILD for e in m.edges) == 1
    acme = next(n for n in m.nodes.values() if n.name == "Acme")
    assert acme.attributes["potential"] == "1"
    assert m.insight_potential_score(acme.id) == 1
    for c in m.of_kind(NodeKind.CONCEPT):
        assert m.documents_of(c)
    # the already-known list grows as documents are processed
    assert "Acme" in roles(b, "concept.extract")[1].system


def test_empty_corpus_root_only():
    m = build_concept_layer(mock_backends(MockScript()), [], "goal")
    assert len(m.nodes) == 1


def test_failed_extraction_keeps_documents():
    s = MockScript().add("not json at all", role="concept.extract").add("{}", role="concept.metadata")
    m = build_concept_layer(mock_backends(s), DOCS, "goal")
    assert sorted(n.kind.value for n in m.nodes.values()) == ["Document"] * 3 + ["Root"]


# -- clustering -------------------------------------------------------------

def test_two_blobs_contiguous():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.05, (6, 8)) + 5
    bb = rng.normal(0, 0.05, (6, 8)) - 5
    x = np.vstack([a, bb])[[0, 6, 1, 7, 2, 8, 3, 9, 4, 10, 5, 11]]
    ids = [str(i) for i in range(12)]
    s = cluster_concepts(ids, x)
    assert s.cluster_count == 2
    groups = [s.labels[c] for c in s.ordered_concepts]
    assert groups == sorted(groups) and len(set(groups)) == 2
    assert sorted(s.ordered_concepts) == sorted(ids)


def test_small_and_identical_single_cluster():
    assert cluster_concepts(["1", "2", "3"], np.eye(3)).cluster_count == 1
    s = cluster_concepts([str(i) for i in range(8)], np.ones((8, 4)))
    assert s.cluster_count == 1 and s.ordered_concepts == [str(i) for i in range(8)]


# -- topic trees ------------------------------------------------------------

def tree(depth_two=True, leaves=("L1", "L2", "L3", "L4")):
    half = len(leaves) // 2 or 1
    groups = [leaves[:half], leaves[half:]] if len(leaves) > 1 else [leaves]
    kids = [{"node_id": i + 1, "name": f"G{i}", "description": "",
             "children": [{"node_id": 10 + j, "name": n, "description": n, "children": []} for j, n in enumerate(g)]
             if depth_two else []} for i, g in enumerate(groups)]
    return {"node_id": 0, "name": "root", "description": "", "children": kids}


def _layer_with(names):
    m = ExplorationMap.with_root("goal")
    return m, [m.add_node(NodeKind.CONCEPT, n, "") for n in names]


def _unit(i, dim=16):
    v = [0.0] * dim
    v[i] = 1.0
    return v


def test_concepts_attach_to_argmax_leaf():
    names = ["c1", "c2", "c3", "c4", "c5"]
    target = {"c1": 0, "c2": 1, "c3": 2, "c4": 3, "c5": 3}
    overrides = {f"L{i + 1}: L{i + 1}": _unit(i) for i in range(4)}
    overrides.update({f"{n}: ": _unit(t) for n, t in target.items()})
    s = MockScript(embedding={"dim": 16, "overrides": overrides}).add(fenced(tree()), role="tree.build")
    b = mock_backends(s)
    m, ids = _layer_with(names)
    build_topic_tree(b, m, ClusterSuggestion(ids, 1))
    assert validate(m) == []
    leaves = leaf_topics(m)
    for cid, n in zip(ids, names):
        parent = m.parent(cid)
        assert parent in leaves and m.node(parent).name == f"L{target[n] + 1}"


def test_one_leaf_takes_everything():
    one = {"name": "root", "children": [{"name": "A", "children": [{"name": "B", "children": []}]}]}
    b = mock_backends(MockScript().add(fenced(one), role="tree.build"))
    m, ids = _layer_with(["x", "y", "z"])
    build_topic_tree(b, m, ClusterSuggestion(ids, 1))
    assert {m.node(m.parent(c)).name for c in ids} == {"B"}


def test_cosine_tie_goes_to_lowest_leaf():
    overrides = {"L1: L1": _unit(0), "L2: L2": _unit(0), "c: ": _unit(0)}
    s = MockScript(embedding={"dim": 16, "overrides": overrides}).add(fenced(tree(leaves=("L1", "L2"))),
                                                                      role="tree.build")
    m, ids = _layer_with(["c"])
    build_topic_tree(mock_backends(s), m, ClusterSuggestion(ids, 1))
    assert m.node(m.parent(ids[0])).name == "L1"


def test_tree_level_violation_retried_then_error():
    s = MockScript()
    s.add(fenced(tree(depth_two=False)), role="tree.build", repeat=1)
    s.add(fenced(tree()), role="tree.build")
    b = mock_backends(s)
    m, ids = _layer_with(["a"])
    build_topic_tree(b, m, ClusterSuggestion(ids, 1))
    calls = roles(b, "tree.build")
    assert len(calls) == 2 and "1 topic levels" in calls[1].full_text()

    bad = mock_backends(MockScript().add(fenced(tree(depth_two=False)), role="tree.build"))
    m, ids = _layer_with(["a"])
    with pytest.raises(BuildError):
        build_topic_tree(bad, m, ClusterSuggestion(ids, 1))


def test_concept_names_rejected_in_tree():
    s = MockScript()
    s.add(fenced(tree(leaves=("a", "L2"))), role="tree.build", repeat=1)
    s.add(fenced(tree(leaves=("L1", "L2"))), role="tree.build")
    b = mock_backends(s)
    m, ids = _layer_with(["a"])
    build_topic_tree(b, m, ClusterSuggestion(ids, 1))
    assert "must not appear" in roles(b, "tree.build")[1].full_text()


def three_level(branch="Health Systems"):
    return {"name": "root", "children": [
        {"name": branch, "children": [{"name": "Workforce", "children": [{"name": "Nurses", "children": []}]}]},
        {"name": "Financing", "children": [{"name": "Budgets", "children": []}]},
    ]}


def test_top_down_builds_tree():
    seeds = [SearchResult("WHO workforce report", "shortages", "https://who.example/1", "2025-01-01")]
    b = mock_backends(MockScript().add(fenced(three_level()), role="tree.top_down"))
    m = build_top_down(b, "Analyse global health priorities", seeds)
    names = {m.node(t).name for t in m.of_kind(NodeKind.TOPIC)}
    assert "Health Systems" in names
    assert not m.of_kind(NodeKind.CONCEPT) and not m.of_kind(NodeKind.DOCUMENT)
    assert "[S1] WHO workforce report" in roles(b, "tree.top_down")[0].last_text
    assert validate(m) == []


def test_top_down_two_levels_rejected():
    b = mock_backends(MockScript().add(fenced(tree()), role="tree.top_down"))
    with pytest.raises(BuildError):
        build_top_down(b, "goal", [])
    assert len(roles(b, "tree.top_down")) == 4


def test_top_down_without_seeds():
    b = mock_backends(MockScript().add(fenced(three_level()), role="tree.top_down"))
    assert len(build_top_down(b, "goal", []).of_kind(NodeKind.TOPIC)) == 5


# -- seed-guided insertion --------------------------------------------------

SEEDS = [SearchResult("t", "s", "https://e.example", None)]


def _insertion_map():
    m = ExplorationMap.with_root("goal")
    t1 = m.add_node(NodeKind.TOPIC, "T1", parent=m.root)
    t2 = m.add_node(NodeKind.TOPIC, "T2", parent=m.root)
    m.add_node(NodeKind.TOPIC, "T3", parent=t1)
    t4 = m.add_node(NodeKind.TOPIC, "T4", parent=t2)
    t5 = m.add_node(NodeKind.TOPIC, "T5", parent=t2)
    return m, {"T2": t2, "T4": t4, "T5": t5}


def test_insertion_selects_then_creates():
    s = MockScript()
    s.add(fenced({"choice": "t2"}), role="tree.expand", repeat=1)
    s.add(fenced({"choice": "T6"}), role="tree.expand", repeat=1)
    m, ids = _insertion_map()
    before = len(m.nodes)
    out = insert_seed_guided(mock_backends(s), m, m.root, SEEDS, l_topic=2, l_concept=1)
    assert m.node(out).name == "T6" and m.parent(out) == ids["T2"]
    assert len(m.nodes) == before + 1


def test_insertion_existing_path_adds_nothing():
    s = MockScript()
    s.add(fenced({"choice": "T2"}), role="tree.expand", repeat=1)
    s.add(fenced({"choice": "T5"}), role="tree.expand", repeat=1)
    m, ids = _insertion_map()
    before = len(m.nodes)
    assert insert_seed_guided(mock_backends(s), m, m.root, SEEDS, 2, 2) == ids["T5"]
    assert len(m.nodes) == before


def test_insertion_at_limit_is_noop():
    m, ids = _insertion_map()
    b = mock_backends(MockScript())
    assert insert_seed_guided(b, m, ids["T4"], SEEDS, 2, 1) == ids["T4"]
    assert b.model.calls == []


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["T1", "T2", "T3", "T4", "T5", "new a", "new b"]), min_size=4, max_size=4),
       st.integers(1, 4), st.integers(1, 4))
def test_insertion_depth_bound(choices, lt, lc):
    s = MockScript()
    for c in choices:
        s.add(fenced({"choice": c}), role="tree.expand", repeat=1)
    m, _ = _insertion_map()
    before = len(m.nodes)
    out = insert_seed_guided(mock_backends(s), m, m.root, SEEDS, lt, lc)
    limit = max(lt, lc)
    assert topic_level(m, out) <= limit
    assert len(m.nodes) - before <= limit
    assert validate(m) == []
