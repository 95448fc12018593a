import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insightmap.backends import FormatError, MockScript, SearchResult, mock_backends
from insightmap.hypotheses import (
    HypothesisConfig,
    HypothesisEngine,
    Scorecard,
    Weights,
    audit_scores,
    diversity_from_similarity,
    overall,
    score_diversity,
)
from insightmap.map_model import ExplorationMap, NodeKind, Origin

# (relevance, impact, diversity, published overall) from the worked scorecard
SCORECARD = [
    ("broadband gaps widen health inequality", 5, 4, 4.16, 4.55),
    ("climate migration drains rural labor", 7, 1, 3.35, 4.70),
    ("fertilizer shocks push deforestation", 8, 9, 4.41, 7.12),
    ("just-in-time logistics fragility at ports", 1, 7, 3.77, 3.03),
    ("drought cuts hydropower and cold chains", 10, 10, 3.80, 8.14),
]
BATCH = [row[0] for row in SCORECARD]
DIM = 16


def _unit(cos: float) -> list[float]:
    v = [0.0] * DIM
    v[0], v[1] = cos, math.sqrt(1 - cos * cos)
    return v


def _tags(tag: str, values) -> str:
    body = "\n".join(str(v) for v in values)
    return f"<{tag}_REASONING>ranked</{tag}_REASONING>\n<{tag}_SCORE>\n{body}\n</{tag}_SCORE>"


def paper_script(batch_responses=None) -> MockScript:
    explored = "previously explored hypothesis"
    overrides = {explored: [1.0] + [0.0] * (DIM - 1)}
    for text, _, _, d, _ in SCORECARD:
        overrides[text] = _unit(1 - d / 10)
    s = MockScript(embedding={"dim": DIM, "overrides": overrides})
    for resp in batch_responses or []:
        s.add(resp, role="hypothesis.generate", repeat=1)
    s.add(json.dumps({"hypothesis": BATCH}), role="hypothesis.generate")
    s.add("<HYPOTHESIS_RELEVANCE_REASONING>fits</HYPOTHESIS_RELEVANCE_REASONING>"
          "<HYPOTHESIS_RELEVANCE_SCORE>0.6</HYPOTHESIS_RELEVANCE_SCORE>",
          role="hypothesis.relevance_isolated")
    s.add(_tags("HYPOTHESIS_RELEVANCE", [r[1] for r in SCORECARD]), role="hypothesis.relevance_relative")
    s.add(_tags("HYPOTHESIS_IMPACT", [r[2] for r in SCORECARD]), role="hypothesis.impact")
    return s


# -- arithmetic -------------------------------------------------------------

@pytest.mark.parametrize("row", SCORECARD, ids=[r[0][:20] for r in SCORECARD])
def test_overall_reproduces_scorecard(row):
    _, r, i, d, published = row
    # rounding of the published two-decimal value puts one row exactly on the edge
    assert abs(overall(r, i, d) - published) <= 0.005 + 1e-9


def test_overall_trivial():
    assert overall(0, 0, 0) == 0


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        Weights(0.5, 0.5, 0.5)


def test_diversity_rules():
    e = np.eye(4)
    assert score_diversity(e[0], np.zeros((0, 4))) == 10
    assert score_diversity(e[0], e[:1]) == 0
    assert diversity_from_similarity(0.584) == pytest.approx(4.16)
    assert diversity_from_similarity(-0.3) == 10


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_diversity_bounded_and_monotone(a, b):
    da, db = diversity_from_similarity(a), diversity_from_similarity(b)
    assert 0 <= da <= 10 and 0 <= db <= 10
    if a <= b:
        assert da >= db


# -- engine -----------------------------------------------------------------

def _engine(script, **cfg):
    return HypothesisEngine(mock_backends(script), HypothesisConfig(**cfg))


def test_score_batch_reproduces_scorecard():
    eng = _engine(paper_script())
    cards = eng.score_batch(BATCH, "goal", "", ["previously explored hypothesis"])
    for card, (_, r, i, d, published) in zip(cards, SCORECARD):
        assert (card.relevance, card.impact) == (r, i)
        assert card.diversity == pytest.approx(d)
        assert abs(card.overall - published) <= 0.005 + 1e-9


def test_isolated_notes_feed_relative_prompt():
    script = paper_script()
    eng = _engine(script)
    eng.score_relevance(BATCH, "goal")
    calls = eng.backends.model.calls
    rel = [c for c in calls if c.role_tag == "hypothesis.relevance_relative"]
    assert len([c for c in calls if c.role_tag == "hypothesis.relevance_isolated"]) == 5
    assert "isolated assessment (0.60): fits" in rel[0].full_text()


def test_generate_retries_on_wrong_count_and_duplicates():
    four = json.dumps({"hypothesis": BATCH[:4]})
    dup = json.dumps({"hypothesis": BATCH[:4] + [BATCH[0]]})
    eng = _engine(paper_script([four, dup]))
    assert eng.generate_batch("leaf", "goal") == BATCH
    gens = [c for c in eng.backends.model.calls if c.role_tag == "hypothesis.generate"]
    assert len(gens) == 3
    assert "exactly 5" in gens[1].full_text()


def test_generate_gives_up_after_retries():
    four = json.dumps({"hypothesis": BATCH[:4]})
    eng = _engine(paper_script([four] * 4))
    with pytest.raises(FormatError):
        eng.generate_batch("leaf", "goal")


def test_relative_scale_violation_retried():
    s = MockScript()
    s.add(_tags("HYPOTHESIS_IMPACT", [11, 1]), role="hypothesis.impact", repeat=1)
    s.add(_tags("HYPOTHESIS_IMPACT", [9, 1]), role="hypothesis.impact", repeat=1)
    s.add(_tags("HYPOTHESIS_IMPACT", [10, 1]), role="hypothesis.impact")
    assert _engine(s).score_impact(["a", "b"]) == [10, 1]


def test_relative_scale_exhausted_raises():
    s = MockScript().add(_tags("HYPOTHESIS_IMPACT", [11, 1]), role="hypothesis.impact")
    with pytest.raises(FormatError):
        _engine(s).score_impact(["a", "b"])


def test_singleton_passthrough():
    s = MockScript().add(_tags("HYPOTHESIS_IMPACT", [6]), role="hypothesis.impact")
    assert _engine(s).score_impact(["only"]) == [6]


def test_commit_batch_selects_argmax_and_grows_pool():
    m = ExplorationMap.with_root("g")
    t = m.add_node(NodeKind.TOPIC, "leaf", parent=m.root)
    cards = [Scorecard(h, r, i, d, overall(r, i, d)) for h, r, i, d, _ in SCORECARD]
    before = m.insight_potential_score(t)
    best = _engine(MockScript()).commit_batch(m, t, cards)
    assert m.hypothesis(best).text == "drought cuts hydropower and cold chains"
    assert m.insight_potential_score(t) == before + 5
    assert m.exploration_score(t) == 0
    assert audit_scores(m) == []


def test_commit_tie_goes_to_smaller_text():
    m = ExplorationMap.with_root("g")
    t = m.add_node(NodeKind.TOPIC, "leaf", parent=m.root)
    cards = [Scorecard("zeta", 5, 5, 5, 5.0), Scorecard("alpha", 5, 5, 5, 5.0)]
    best = _engine(MockScript()).commit_batch(m, t, cards)
    assert m.hypothesis(best).text == "alpha"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10), st.integers(1, 10), st.floats(0, 10)),
                min_size=5, max_size=5))
def test_commit_argmax_matches_scan(rows):
    m = ExplorationMap.with_root("g")
    t = m.add_node(NodeKind.TOPIC, "leaf", parent=m.root)
    cards = [Scorecard(f"h{k}", r, i, d, overall(r, i, d)) for k, (r, i, d) in enumerate(rows)]
    best = _engine(MockScript()).commit_batch(m, t, cards)
    top = max(c.overall for c in cards)
    expected = sorted(c.hypothesis for c in cards if c.overall == top)[0]
    assert m.hypothesis(best).text == expected
    assert len(m.unexplored_children(t)) == 5


def test_audit_flags_tampered_score():
    m = ExplorationMap.with_root("g")
    t = m.add_node(NodeKind.TOPIC, "leaf", parent=m.root)
    h = m.add_hypothesis(t, "x", Origin.GENERATION_BATCH)
    m.node(h).attributes.update(relevance="10.0", impact="10.0", diversity="3.8", overall="9.0")
    assert [row[0] for row in audit_scores(m)] == [h]


def test_generate_for_uses_tree_path_seeds():
    script = paper_script()
    script.extras["search"] = {"results": {
        "methods & data > few nexus modeling": [
            {"title": "Nexus approach", "snippet": "model-based assessments", "url": "https://n.example/a",
             "date": "2025-12-16"}]}}
    eng = _engine(script)
    m = ExplorationMap.with_root("goal")
    a = m.add_node(NodeKind.TOPIC, "Methods & Data", parent=m.root)
    b = m.add_node(NodeKind.TOPIC, "FEW Nexus Modeling", parent=a)
    h = m.add_hypothesis(b, "previously explored hypothesis", Origin.GENERATION_BATCH)
    m.add_insight(h, "done")
    chosen = eng.generate_for(m, b)
    assert m.hypothesis(chosen).text == "drought cuts hydropower and cold chains"
    assert m.hypothesis(chosen).scores.overall == pytest.approx(8.14)
    gen = [c for c in eng.backends.model.calls if c.role_tag == "hypothesis.generate"][0]
    assert "[S1] Nexus approach" in gen.full_text()
    assert isinstance(eng.backends.search.search("methods & data > few nexus modeling")[0], SearchResult)
