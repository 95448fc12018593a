import json
import random

import pytest
from hypothesis import given, strategies as st

from insightmap.backends import FormatError, MockScript, mock_backends
from insightmap.meta import (
    NO_HIGHLIGHTS,
    NOCHANGE,
    Cluster,
    Highlight,
    MetaConfig,
    MetaReport,
    MetaReporter,
    PersonaPair,
    Refinement,
    greedy_select,
    render_meta_markdown,
    token_count,
)
from insightmap.report import Report, Section, SectionType


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


def words(n, w="word"):
    return " ".join([w] * n)


def report(title, body_words=50, word="care"):
    return Report(title, f"{title} summary", "", "", [
        Section("Body", SectionType.TEXT, "", "", {"paragraphs": [words(body_words, word)]})])


PERSONA = PersonaPair("reviewer text", "audience text")


def meta(script, **cfg):
    return MetaReporter(mock_backends(script), MetaConfig(**cfg))


# --- greedy enrichment ---------------------------------------------------------


def test_greedy_examples():
    lengths = {"a": 1000, "b": 2000, "c": 9000}
    assert greedy_select(lengths, 3500) == ["a", "b"]
    assert greedy_select(lengths, 0) == []
    assert greedy_select(lengths, 12000) == ["a", "b", "c"]


def oracle_prefix(lengths, budget):
    order = sorted(lengths, key=lambda k: (lengths[k], k))
    for p in range(len(order), -1, -1):
        if sum(lengths[k] for k in order[:p]) <= budget:
            return order[:p]


@given(st.lists(st.integers(0, 5000), max_size=10), st.integers(0, 20000))
def test_greedy_matches_exhaustive_oracle(sizes, budget):
    lengths = {f"r{i}": n for i, n in enumerate(sizes)}
    assert greedy_select(lengths, budget) == oracle_prefix(lengths, budget)


def test_token_count():
    assert token_count("a b  c\n d") == 4
    assert token_count("a b c", 1.3) == 4


# --- personas / highlights / entities -----------------------------------------


def test_personas():
    s = MockScript().add(words(250), role="meta.persona").add(words(200), role="meta.audience")
    p = meta(s).derive_personas([report("A")], "goal")
    assert len(p.highlighter.split()) == 250 and len(p.audience.split()) == 200
    with pytest.raises(ValueError):
        meta(s).derive_personas([], "goal")


def test_persona_out_of_bounds_flagged():
    s = MockScript().add(words(20), role="meta.persona").add(words(200), role="meta.audience")
    flags = []
    p = meta(s, retries=1).derive_personas([report("A")], "goal", flags)
    assert p.highlighter == words(20) and flags and "meta.persona" in flags[0]


def test_highlight_marker():
    s = MockScript().add(NO_HIGHLIGHTS, role="meta.highlight")
    h = meta(s).extract_highlight("r1", report("thin"), PERSONA)
    assert h.empty and h.text == NO_HIGHLIGHTS


def test_entities_dedupe_and_empty():
    s = MockScript().add(fenced({"entities": [{"name": "ILO", "type": "organization"},
                                              {"name": "ILO", "type": "Organization"},
                                              {"name": "Kenya", "type": "location"}]}), role="meta.entities")
    m = meta(s)
    assert m.extract_entities(Highlight("r", "ILO said")) == [{"name": "ILO", "type": "organization"},
                                                             {"name": "Kenya", "type": "location"}]
    assert m.extract_entities(Highlight("r", NO_HIGHLIGHTS)) == []
    assert len(m.backends.model.calls) == 1


# --- clusters / assignment -------------------------------------------------------


def test_detect_clusters_and_manual_mode():
    s = MockScript().add(fenced({"clusters": {"1": "care jobs", "2": "energy prices"}}), role="meta.clusters")
    m = meta(s, k=2)
    cl = m.detect_clusters({"r1": [{"name": "ILO", "type": "organization"}]})
    assert [c.label for c in cl] == ["care jobs", "energy prices"]
    manual = meta(MockScript(), manual_clusters={"a": "manual theme"})
    assert [c.label for c in manual.detect_clusters({})] == ["manual theme"]
    assert manual.backends.model.calls == []


def test_too_many_clusters_retries():
    s = MockScript().add(fenced({"clusters": {"1": "a", "2": "b", "3": "c"}}), role="meta.clusters", repeat=1)
    s.add(fenced({"clusters": {"1": "a"}}), role="meta.clusters")
    assert len(meta(s, k=2).detect_clusters({"r": []})) == 1


def test_assign_multi_and_unknown():
    clusters = [Cluster("1", "a"), Cluster("2", "b"), Cluster("3", "c")]
    s = MockScript().add(fenced({"cluster_ids": ["9"]}), role="meta.assign", repeat=1)
    s.add(fenced({"cluster_ids": ["3", "1"]}), role="meta.assign")
    assert meta(s).assign(Highlight("r", "x"), clusters) == ["1", "3"]


# --- refinement ----------------------------------------------------------------


def refine_script(enrich=None):
    s = MockScript().add(words(700), role="meta.themes")
    if enrich is not None:
        s.add(enrich, role="meta.enrich")
    return s.add(words(400), role="meta.condense")


def test_enrichment_shortest_first_under_budget():
    reps = {"big": report("big", 9000), "one": report("one", 1000), "two": report("two", 2000)}
    hs = [Highlight(r, "quote") for r in reps]
    m = meta(refine_script(words(800)), token_budget=3500, token_factor=1.0)
    ref = m.refine(hs, reps, PERSONA)
    assert ref.included == ["one", "two"] and ref.enrichment == "applied"
    docs = m.backends.model.calls[1].last_text
    assert "=== one ===" in docs and "=== big ===" not in docs


def test_enrichment_skipped_at_zero_budget():
    reps = {"one": report("one", 1000)}
    m = meta(refine_script(), token_budget=0)
    ref = m.refine([Highlight("one", "q")], reps, PERSONA)
    assert ref.enrichment == "skipped" and ref.included == [] and ref.enriched == ref.themes
    assert [c.role_tag for c in m.backends.model.calls] == ["meta.themes", "meta.condense"]


def test_enrichment_nochange():
    reps = {"one": report("one", 100)}
    m = meta(refine_script(NOCHANGE))
    ref = m.refine([Highlight("one", "q")], reps, PERSONA)
    assert ref.enrichment == "nochange" and ref.enriched == ref.themes


# --- rendering -----------------------------------------------------------------


def render_script(bad_key=False):
    s = MockScript()
    s.add(fenced({"subject": "Care economy investments reshape jobs growth and equality across eleven synthesised reports"}),
          role="meta.subject")
    s.add(fenced({"category": "Economy"}), role="meta.category")
    areas = [{"theme": f"t{i}", "implications": "i [REPORT_1]", "actions": "a"} for i in range(3)]
    s.add(fenced({"intro": "Opening [REPORT_2].", "areas": areas, "conclusion": "End."}), role="meta.overview")
    if bad_key:
        s.add(fenced({"themes": [{"theme": "x", "description": "d", "related_reports": "[REPORT_9]"}]}),
              role="meta.core_themes")
    s.add(fenced({"themes": [{"theme": "x", "description": "d", "related_reports": "[REPORT_1][REPORT_2]"}]}),
          role="meta.core_themes")
    s.add(fenced({"implications": [{"area": "a", "strategic implications": "s"}]}), role="meta.implications")
    s.add(fenced({"recommendations": [{"title": "t", "opportunity": "o", "risk": "r", "action": "a",
                                       "rationale": "w", "priority": "High"}]}), role="meta.recommendations")
    s.add(fenced({"metrics": [{"metric_name": "m", "baseline": "b", "target": "t"}]}), role="meta.metrics")
    return s


def test_render_sequential_with_context(tmp_path):
    m = meta(render_script())
    out = m.render(Cluster("1", "care"), Refinement("t", "t", "condensed", [], "skipped"), ["r-a", "r-b"], PERSONA)
    assert out.category == "Economy" and out.member_reports == ["r-a", "r-b"]
    calls = m.backends.model.calls
    assert "Economy" in calls[-1].full_text() and "condensed" in calls[-1].full_text()
    path = tmp_path / "m.json"
    out.save(path)
    assert MetaReport.load(path) == out
    md = render_meta_markdown(out)
    assert "[REPORT_2] r-b" in md


def test_render_dangling_report_key_rejected():
    m = meta(render_script(bad_key=True), retries=0)
    with pytest.raises(FormatError):
        m.render(Cluster("1", "care"), Refinement("t", "t", "c", [], "skipped"), ["only"], PERSONA)


# --- full run ------------------------------------------------------------------


def test_run_prunes_and_drops():
    reps = {"r1": report("care one"), "r2": report("energy two"), "r3": report("thin"), "r4": report("care four")}
    s = MockScript()
    s.add(words(250), role="meta.persona").add(words(200), role="meta.audience")
    s.add(NO_HIGHLIGHTS, role="meta.highlight", match="# thin", scope="last")
    s.add("care quote", role="meta.highlight", match="# care", scope="last")
    s.add("energy quote", role="meta.highlight")
    s.add(fenced({"entities": [{"name": "ILO", "type": "organization"}]}), role="meta.entities")
    s.add(fenced({"clusters": {"1": "care", "2": "nobody"}}), role="meta.clusters")
    s.add(fenced({"cluster_ids": ["1"]}), role="meta.assign", match="care quote", scope="last")
    s.add(fenced({"cluster_ids": []}), role="meta.assign")
    s.add(words(700), role="meta.themes").add(words(800), role="meta.enrich").add(words(400), role="meta.condense")
    for rule in render_script().rules:
        s.add(rule.response, role=rule.role)
    metas, log = meta(s, k=2).run(reps, "goal")
    assert len(metas) == 1 and metas[0].member_reports == ["r1", "r4"]
    assert log["dropped"] == ["r2"] and log["pruned"] == ["2"]
    assert log["highlights"]["r3"] == NO_HIGHLIGHTS


def test_run_is_order_independent():
    reps = {f"r{i}": report(f"rep {i}") for i in range(4)}

    def script():
        s = MockScript()
        s.add(words(250), role="meta.persona").add(words(200), role="meta.audience")
        s.add(lambda req: "quote " + req.last_text.split("\n")[0], role="meta.highlight")
        s.add(fenced({"entities": [{"name": "X", "type": "topic"}]}), role="meta.entities")
        s.add(fenced({"clusters": {"1": "all"}}), role="meta.clusters")
        s.add(fenced({"cluster_ids": ["1"]}), role="meta.assign")
        s.add(words(700), role="meta.themes").add(NOCHANGE, role="meta.enrich").add(words(400), role="meta.condense")
        for rule in render_script().rules:
            s.add(rule.response, role=rule.role)
        return s

    a, _ = meta(script()).run(reps, "goal")
    shuffled = dict(random.Random(1).sample(sorted(reps.items()), 4))
    b, _ = meta(script()).run(shuffled, "goal")
    assert a == b
