import json
import re
import sqlite3
import threading

import pytest
from hypothesis import given, strategies as st

from insightmap.backends import MockScript, SearchResult, mock_backends
from insightmap.citations import (
    EXCERPT_CAP,
    KEY_RE,
    CitationDB,
    CitationNotFound,
    keys_in,
    remap,
    strip_citations,
)
from insightmap.tools import ToolCall, ToolRegistry
from insightmap.tools.docsearch import NO_RESULTS, DocSearchTool, Passage, VectorIndex
from insightmap.tools.sql import SqlRejected, SqlTool, check_select, rewrite_predicate, Pattern
from insightmap.tools.websearch import (
    SCRAPE_CHARS,
    PlannedSearch,
    WebSearchTool,
    merge_results,
    normalize_url,
    parse_plan,
    recency_window,
)


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


def dangling_free(text: str, db: CitationDB) -> bool:
    return all(k in db for k in KEY_RE.findall(text))


# -- citation database ------------------------------------------------------------


def test_register_assigns_sequential_keys_per_tool():
    db = CitationDB()
    a = db.register("WEB_SEARCH", "web", {"url": "https://a"}, "alpha")
    b = db.register("WEB_SEARCH", "web", {"url": "https://b"}, "beta")
    c = db.register("TABLE", "table_row", {"sql": "SELECT 1"}, "[]")
    assert (a, b, c) == ("WEB_SEARCH_1", "WEB_SEARCH_2", "TABLE_1")
    assert db.resolve(b).content == "beta"
    assert db.resolve("[WEB_SEARCH_1]").locator == {"url": "https://a"}


def test_resolve_unknown_key_raises():
    with pytest.raises(CitationNotFound):
        CitationDB().resolve("WEB_SEARCH_9")


def test_identical_registration_reuses_key_and_caps_content():
    db = CitationDB()
    long = "x" * (EXCERPT_CAP + 50)
    k1 = db.register("DOC_SEARCH", "document", {"filename": "a.txt", "page": ""}, long)
    k2 = db.register("DOC_SEARCH", "document", {"filename": "a.txt", "page": ""}, long)
    assert k1 == k2 and len(db) == 1
    assert len(db.resolve(k1).content) == EXCERPT_CAP


def test_citation_db_persists_and_continues_numbering(tmp_path):
    path = tmp_path / "citations.jsonl"
    db = CitationDB(path)
    db.register("WEB_SEARCH", "web", {"url": "u1"}, "one", {"title": "t"})
    db.register("WEB_SEARCH", "web", {"url": "u2"}, "two", available=False)
    again = CitationDB(path)
    assert len(again) == 2
    assert again.resolve("WEB_SEARCH_2").available is False
    assert again.register("WEB_SEARCH", "web", {"url": "u3"}, "three") == "WEB_SEARCH_3"
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and set(json.loads(lines[0])) >= {"key", "source_kind", "locator", "content", "metadata"}


def test_concurrent_registration_gives_unique_keys():
    db = CitationDB()
    keys: list[str] = []

    def worker(n):
        for i in range(50):
            keys.append(db.register("WEB_SEARCH", "web", {"url": f"{n}/{i}"}, "c"))

    threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(keys)) == 200
    assert sorted(int(k.rsplit("_", 1)[1]) for k in keys) == list(range(1, 201))


def test_register_rejects_bad_kind_and_prefix():
    db = CitationDB()
    with pytest.raises(ValueError):
        db.register("web", "web", {}, "x")
    with pytest.raises(ValueError):
        db.register("WEB", "video", {}, "x")


def test_key_helpers():
    text = "A [WEB_SEARCH_2] and [TABLE_1], again [WEB_SEARCH_2] plus [3]."
    assert keys_in(text) == ["WEB_SEARCH_2", "TABLE_1"]
    assert strip_citations(text) == "A and, again plus."
    assert remap("x [1] y [2] z [9]", {"1": "DOC_SEARCH_4", "2": "DOC_SEARCH_5"}) == \
        "x [DOC_SEARCH_4] y [DOC_SEARCH_5] z "


@given(st.lists(st.integers(1, 20), max_size=10))
def test_remap_never_leaves_unmapped_positions(positions):
    mapping = {str(i): f"DOC_SEARCH_{i + 100}" for i in range(1, 11)}
    text = " ".join(f"[{p}]" for p in positions)
    out = remap(text, mapping)
    assert not re.search(r"\[\d+\]", out)
    assert keys_in(out) == list(dict.fromkeys(mapping[str(p)] for p in positions if p <= 10))


# -- tool registry ----------------------------------------------------------------


class Echo:
    name = "ECHO"
    description = "echoes"

    def run(self, query, params=None):
        return query.upper()


def test_registry_validates_calls():
    reg = ToolRegistry([Echo()])
    assert reg.check(ToolCall("NOPE", "q")).startswith("unknown tool")
    assert reg.check(ToolCall("ECHO", "  ")) is not None
    assert reg.run(ToolCall("ECHO", "hi")) == "HI"
    assert "TOOL_NAME" in reg.describe()
    with pytest.raises(ValueError):
        reg.add(Echo())


# -- SQL subagent -----------------------------------------------------------------


@pytest.fixture
def trade_db(tmp_path):
    path = tmp_path / "trade.db"
    conn = sqlite3.connect(path)
    conn.execute("CREATE TABLE economy (country TEXT, year INTEGER, gdp REAL)")
    conn.executemany("INSERT INTO economy VALUES (?, ?, ?)", [
        ("United Arab Emirates", 2023, 504.2),
        ("United Kingdom", 2023, 3340.0),
        ("United States", 2023, 27360.0),
        ("Saudi Arabia", 2023, 1068.0),
    ])
    conn.commit()
    conn.close()
    return path


def _verify_uae(req):
    listing = req.last_text
    for line in listing.splitlines():
        m = re.match(r"(\d+): (.*)", line)
        if m and m.group(2) == "United Arab Emirates":
            return fenced({"indices": [int(m.group(1))]})
    return fenced({"indices": []})


def sql_script(first_sql: str, bad_first: bool = False) -> MockScript:
    s = MockScript()
    if bad_first:
        s.add(fenced({"query_1": {"query_description": "oops",
                                  "sql_query": "INSERT INTO economy VALUES ('X', 1, 1)"}}),
              role="sql.generate", repeat=1)
    s.add(fenced({"query_1": {"query_description": "GDP by country", "sql_query": first_sql}}),
          role="sql.generate")
    s.add(fenced({"patterns": [{"pattern_id": 1, "table_name": "economy", "column_name": "country",
                                "reference_column": "country", "search_pattern": "UAE"}]}),
          role="sql.patterns")
    s.add(_verify_uae, role="sql.verify")
    s.add(fenced({"response": "GDP was 504.2 billion [TABLE_1]."}), role="sql.analyze")
    return s


def test_sql_entity_resolution_rewrites_abbreviation(trade_db):
    script = sql_script("SELECT country, gdp FROM economy WHERE country = 'UAE'")
    b = mock_backends(script)
    db = CitationDB()
    tool = SqlTool(b, trade_db, db)
    out = tool.run("What was the GDP of the UAE in 2023?")
    assert out == "GDP was 504.2 billion [TABLE_1]."
    assert tool.executed[-1] == "SELECT country, gdp FROM economy WHERE country = 'United Arab Emirates'"
    rec = db.resolve("TABLE_1")
    assert rec.source_kind == "table_row"
    assert json.loads(rec.content) == [{"country": "United Arab Emirates", "gdp": 504.2}]
    assert any(c.role_tag == "sql.verify" for c in b.model.calls)


def test_sql_non_empty_result_skips_resolution(trade_db):
    script = sql_script("SELECT country, gdp FROM economy WHERE year = 2023 ORDER BY gdp DESC LIMIT 2")
    b = mock_backends(script)
    tool = SqlTool(b, trade_db, CitationDB())
    tool.run("largest economies")
    roles = [c.role_tag for c in b.model.calls]
    assert "sql.patterns" not in roles and "sql.verify" not in roles
    assert len(tool.executed) == 1


def test_sql_insert_is_fed_back_and_retried(trade_db):
    script = sql_script("SELECT gdp FROM economy WHERE country = 'Saudi Arabia'", bad_first=True)
    b = mock_backends(script)
    tool = SqlTool(b, trade_db, CitationDB())
    tool.run("Saudi GDP")
    gen = [c for c in b.model.calls if c.role_tag == "sql.generate"]
    assert len(gen) == 2
    assert "only SELECT" in gen[1].last_text
    assert all(s.upper().startswith(("SELECT", "WITH")) for s in tool.executed)
    conn = sqlite3.connect(trade_db)
    assert conn.execute("SELECT COUNT(*) FROM economy").fetchone()[0] == 4


def test_sql_refuses_after_persistent_non_select(trade_db):
    s = MockScript()
    s.add(fenced({"query_1": {"query_description": "x", "sql_query": "DELETE FROM economy"}}), role="sql.generate")
    tool = SqlTool(mock_backends(s), trade_db, CitationDB(), max_tries=3)
    out = tool.run("wipe it")
    assert out.startswith("SQL subagent refused")
    assert tool.executed == []
    assert len(tool.backends.model.calls) == 3


@pytest.mark.parametrize("sql", [
    "DELETE FROM economy",
    "SELECT 1; DROP TABLE economy",
    "UPDATE economy SET gdp = 0",
    "SELECT * FROM missing_table",
    "PRAGMA table_info(economy)",
])
def test_check_select_rejects(trade_db, sql):
    conn = sqlite3.connect(trade_db)
    with pytest.raises(SqlRejected):
        check_select(conn, sql)


def test_check_select_accepts_cte_and_semicolon_literal(trade_db):
    conn = sqlite3.connect(trade_db)
    assert check_select(conn, "WITH t AS (SELECT * FROM economy) SELECT * FROM t;") .endswith("FROM t")
    check_select(conn, "SELECT * FROM economy WHERE country = 'a;b'")


def test_rewrite_predicate_like_and_in():
    p = Pattern("economy", "country", "e.country", "%UAE%")
    sql = "SELECT * FROM economy e WHERE e.country LIKE '%UAE%' AND year = 1"
    assert rewrite_predicate(sql, p, ["United Arab Emirates"]) == \
        "SELECT * FROM economy e WHERE e.country = 'United Arab Emirates' AND year = 1"
    assert "IN ('A', 'B')" in rewrite_predicate(sql, p, ["A", "B"])


# -- document search --------------------------------------------------------------


PASSAGES = [
    Passage("Solar capacity grew quickly in 2023 across southern regions.", "energy.txt", "1"),
    Passage("Wind farms faced supply chain delays for turbine blades.", "energy.txt", "2"),
    Passage("Battery storage prices fell by a fifth during the year.", "storage.txt", "1"),
    Passage("Grid operators reported curtailment during solar peaks.", "grid.txt", "4"),
]


def doc_tool(script: MockScript, **kw):
    b = mock_backends(script)
    index = VectorIndex.build(b.embedder, PASSAGES)
    db = CitationDB()
    return DocSearchTool(b, index, db, top_k=2, **kw), b, db


def test_doc_reflect_done_first_turn_single_round():
    s = MockScript()
    s.add(fenced({"should_decompose": False, "reasoning": "single"}), role="doc.decide")
    s.add(fenced({"analysis": "enough", "is_complete": True, "missing_information": ""}), role="doc.reflect")
    s.add(fenced({"answer": "Solar grew [1] and was curtailed [2]."}), role="doc.answer")
    tool, b, db = doc_tool(s)
    out = tool.run("How did solar capacity grow?")
    assert tool.rounds == 1
    assert not any(c.role_tag == "doc.enhance" for c in b.model.calls)
    assert dangling_free(out, db) and keys_in(out) == ["DOC_SEARCH_1", "DOC_SEARCH_2"]
    rec = db.resolve("DOC_SEARCH_1")
    assert set(rec.locator) == {"filename", "page"}


def test_doc_reflect_loop_bounded_by_max_turns():
    s = MockScript()
    s.add(fenced({"should_decompose": False}), role="doc.decide")
    s.add(fenced({"analysis": "", "is_complete": False, "missing_information": "more"}), role="doc.reflect")
    s.add(fenced({"enhanced_queries": ["battery prices", "wind delays"]}), role="doc.enhance")
    s.add(fenced({"answer": "Partial [1]."}), role="doc.answer")
    tool, b, db = doc_tool(s, max_turns=3)
    tool.run("Everything about energy")
    assert tool.rounds == 3
    assert sum(c.role_tag == "doc.enhance" for c in b.model.calls) == 2


def test_doc_decompose_two_subqueries_then_synthesis():
    s = MockScript()
    s.add(fenced({"should_decompose": True}), role="doc.decide")
    s.add(fenced({"sub_queries": ["solar growth", "battery prices"]}), role="doc.decompose")
    s.add(fenced({"answer": "Answer [1]."}), role="doc.answer")
    s.add(lambda req: fenced({"synthesized_answer": " ".join(re.findall(r"ANSWER: (.*)", req.last_text))}),
          role="doc.synthesize")
    tool, b, db = doc_tool(s)
    out = tool.run("Compare solar growth and battery prices")
    roles = [c.role_tag for c in b.model.calls]
    assert roles.count("doc.answer") == 2 and roles.count("doc.synthesize") == 1
    assert "doc.reflect" not in roles
    assert dangling_free(out, db) and len(keys_in(out)) >= 1


def test_doc_hyde_embeds_hypothetical_text():
    hypo = "A report passage describing falling battery storage costs."
    s = MockScript()
    s.add(fenced({"should_decompose": False}), role="doc.decide")
    s.add(fenced({"hypothetical_document": hypo}), role="doc.hyde")
    s.add(fenced({"is_complete": True}), role="doc.reflect")
    s.add(fenced({"answer": "Cheaper [1]."}), role="doc.answer")
    tool, b, db = doc_tool(s, hyde=True)
    query = "what about storage?"
    tool.run(query)
    embedded = [t for call in b.embedder.calls for t in call]
    assert hypo in embedded and query not in embedded


def test_doc_empty_index_and_degraded_answer():
    s = MockScript()
    b = mock_backends(s)
    tool = DocSearchTool(b, VectorIndex.build(b.embedder, []), CitationDB())
    assert tool.run("anything") == NO_RESULTS

    s = MockScript()
    s.add("not json", role="doc.*")
    tool, b, db = doc_tool(s)
    out = tool.run("solar")
    assert out.startswith("[DOC_SEARCH_1]") and dangling_free(out, db)


def test_vector_index_roundtrip(tmp_path):
    b = mock_backends(MockScript())
    idx = VectorIndex.build(b.embedder, PASSAGES)
    idx.save(tmp_path / "idx")
    again = VectorIndex.load(tmp_path / "idx")
    q = b.embedder.embed(["battery storage prices"])[0]
    assert again.search(q, 2) == idx.search(q, 2)
    assert again.passages == PASSAGES


# -- web search -------------------------------------------------------------------


def plan_xml(items):
    body = "".join(f"<search><question>{q}</question><timerange>{t}</timerange></search>" for q, t in items)
    return f"<output>{body}</output>"


def _r(n: int, url: str) -> dict:
    return {"title": f"T{n}", "snippet": f"snippet {n}", "url": url, "date": "2026-01-14"}


WEB_RESULTS = {
    "heat pump adoption": [_r(1, "https://a.com/1"), _r(2, "https://www.b.com/2/"), _r(3, "https://a.com/3")],
    "heat pump subsidies": [_r(4, "https://c.com/4"), _r(5, "https://b.com/2"), _r(6, "https://c.com/6")],
    "heat pump installers": [],
}


def web_script(pages=None, window="Not Applicable", **extra) -> MockScript:
    s = MockScript(search={"results": WEB_RESULTS, "pages": pages or {}}, **extra)
    s.add(plan_xml([(q, window) for q in WEB_RESULTS]), role="web.strategy")
    s.add(lambda req: "<output><summary>\"quoted\" " + re.search(r"LINK: (\S+)", req.last_text).group(1)
          + "</summary></output>", role="web.summarize")
    s.add(lambda req: "<output><answer>" + " ".join(f"[{n}]" for n in re.findall(r"^\[(\d+)\]", req.last_text, re.M))
          + "</answer></output>", role="web.aggregate")
    return s


def test_web_merge_dedupes_to_five_citations():
    pages = {r["url"]: "page " * 10 for rows in WEB_RESULTS.values() for r in rows}
    b = mock_backends(web_script(pages))
    db = CitationDB()
    out = WebSearchTool(b, db).run("heat pumps")
    assert len(db) == 5
    assert [r.locator["url"] for r in db.records()] == [
        "https://a.com/1", "https://c.com/4", "https://www.b.com/2/", "https://a.com/3", "https://c.com/6"]
    assert keys_in(out) == [f"WEB_SEARCH_{i}" for i in range(1, 6)]
    assert all(r.available for r in db.records())


def test_merge_results_hand_dedupe():
    q1 = [SearchResult(**r) for r in WEB_RESULTS["heat pump adoption"]]
    q2 = [SearchResult(**r) for r in WEB_RESULTS["heat pump subsidies"]]
    merged = merge_results([q1, q2])
    assert [r.title for r in merged] == ["T1", "T4", "T2", "T3", "T6"]
    assert normalize_url("https://WWW.b.com/2/#frag") == normalize_url("https://b.com/2")


def test_web_recency_applied_to_every_query():
    s = MockScript(search={"results": WEB_RESULTS})
    s.add(plan_xml([("heat pump adoption", "Past Week"), ("heat pump subsidies", "Not Applicable"),
                    ("heat pump installers", "Past Year")]), role="web.strategy")
    s.add("<output><answer>none [1]</answer></output>", role="web.aggregate")
    b = mock_backends(s)
    WebSearchTool(b, CitationDB(), full=False).run("latest heat pump news this week")
    assert len(b.search.calls) == 3
    assert {tr for _, tr in b.search.calls} == {"Past Week"}


def test_web_all_scrapes_fail_falls_back_to_snippets():
    b = mock_backends(web_script(pages={}))
    db = CitationDB()
    out = WebSearchTool(b, db).run("heat pumps")
    assert len(db) == 5 and not any(r.available for r in db.records())
    assert db.resolve("WEB_SEARCH_1").content == "snippet 1"
    assert not any(c.role_tag == "web.summarize" for c in b.model.calls)
    agg = next(c for c in b.model.calls if c.role_tag == "web.aggregate")
    assert "snippet 4" in agg.last_text
    assert dangling_free(out, db)


def test_web_scrape_truncated_before_summary():
    pages = {r["url"]: "z" * (SCRAPE_CHARS + 500) for rows in WEB_RESULTS.values() for r in rows}
    b = mock_backends(web_script(pages))
    WebSearchTool(b, CitationDB()).run("heat pumps")
    summ = next(c for c in b.model.calls if c.role_tag == "web.summarize")
    assert summ.last_text.count("z") == SCRAPE_CHARS


def test_web_plan_count_enforced_with_retry():
    s = MockScript(search={"results": WEB_RESULTS})
    s.add(plan_xml([("only one", "Not Applicable")]), role="web.strategy", repeat=1)
    s.add(plan_xml([(q, "Not Applicable") for q in WEB_RESULTS]), role="web.strategy")
    s.add("<output><answer>ok [1]</answer></output>", role="web.aggregate")
    b = mock_backends(s)
    WebSearchTool(b, CitationDB(), full=False).run("heat pumps")
    strat = [c for c in b.model.calls if c.role_tag == "web.strategy"]
    assert len(strat) == 2 and "need 3 to 8" in strat[1].last_text


def test_parse_plan_and_window():
    plan = parse_plan(plan_xml([("a", "past month"), ("b", "Past Day"), ("c", "Not Applicable")]))
    assert [p.time_range for p in plan] == ["Past Month", "Past Day", "Not Applicable"]
    assert recency_window(plan) == "Past Day"
    assert recency_window([PlannedSearch("x", "Not Applicable")]) is None


def test_web_parallel_matches_sequential():
    pages = {r["url"]: "body" for rows in WEB_RESULTS.values() for r in rows}
    outs = []
    for workers in (1, 4):
        b = mock_backends(web_script(pages, max_workers=workers))
        db = CitationDB()
        outs.append((WebSearchTool(b, db).run("heat pumps"), [r.locator for r in db.records()]))
    assert outs[0] == outs[1]
