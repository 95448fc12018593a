"""SQL subagent over a read-only SQLite database.

Only a single SELECT (optionally WITH ... SELECT) ever reaches the engine;
an authorizer additionally denies any non-read action.  Empty results
trigger semantic entity resolution of the query's string literals.
"""

from __future__ import annotations

import json
import logging
import re
import sqlite3
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union


from ..backends import Backends, FormatError, ModelRequest, ask_json, cosine_matrix, user
from ..citations import CitationDB, remap

logger = logging.getLogger(__name__)

TOOL = "TABLE"
_LOCAL_TABLE = re.compile(r"\[TABLE_(\d+)\]")
_ALLOWED_ACTIONS = {sqlite3.SQLITE_SELECT, sqlite3.SQLITE_READ, sqlite3.SQLITE_FUNCTION}
_RECURSIVE = getattr(sqlite3, "SQLITE_RECURSIVE", 33)


class SqlRejected(ValueError):
    pass


@dataclass
class SqlQuery:
    description: str
    sql: str


@dataclass
class Pattern:
    table: str
    column: str
    reference: str
    pattern: str


def _authorizer(action, *_args):
    return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS or action == _RECURSIVE else sqlite3.SQLITE_DENY


def check_select(conn: sqlite3.Connection, sql: str) -> str:
    """Return the normalized statement or raise :class:`SqlRejected`."""
    text = sql.strip().rstrip(";").strip()
    if not text:
        raise SqlRejected("empty SQL")
    head = re.match(r"\s*(\w+)", text)
    if head is None or head.group(1).upper() not in ("SELECT", "WITH"):
        raise SqlRejected(f"only SELECT statements are allowed, got {head.group(1).upper() if head else text[:20]!r}")
    # left installed: every statement this module runs is a read
    conn.set_authorizer(_authorizer)
    try:
        conn.execute("EXPLAIN " + text)
    except (sqlite3.Error, sqlite3.Warning) as exc:
        raise SqlRejected(f"statement rejected: {exc}") from None
    return text


class SqlTool:
    name = "SQL"
    description = "Answers questions from the structured database by writing and running SQL."

    def __init__(self, backends: Backends, db_path: Union[str, Path], citations: CitationDB,
                 max_tries: int = 3, row_limit: int = 200, candidates: int = 10,
                 guidelines: str = ""):
        self.backends = backends
        self.db_path = Path(db_path)
        self.citations = citations
        self.max_tries = max_tries
        self.row_limit = row_limit
        self.candidates = candidates
        self.guidelines = guidelines
        self.executed: list[str] = []

    def connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(f"file:{self.db_path}?mode=ro", uri=True, check_same_thread=False)
        conn.set_authorizer(_authorizer)
        return conn

    def schema(self, conn: sqlite3.Connection) -> str:
        rows = conn.execute("SELECT sql FROM sqlite_master WHERE type IN ('table','view') AND sql IS NOT NULL "
                            "ORDER BY name").fetchall()
        return "\n".join(r[0] for r in rows)

    # -- steps ----------------------------------------------------------------

    def generate(self, conn: sqlite3.Connection, question: str) -> list[SqlQuery]:
        system = (
            "Turn a question about a SQLite database into SQL. Only SELECT statements, correct "
            "joins, a sensible LIMIT, text matching where useful, and more than one query only "
            "when a single one cannot answer.\n"
            f"SCHEMA:\n{self.schema(conn)}\nNORMALIZATION GUIDELINES: {self.guidelines or '(none)'}\n"
            'Reply with fenced JSON: {"query_1": {"query_description": str, "sql_query": str}, ...}'
        )

        def check(v: Any) -> list[SqlQuery]:
            if not isinstance(v, dict) or not v:
                raise FormatError('expected {"query_1": {...}}')
            out = []
            for key in sorted(v, key=lambda k: int(re.sub(r"\D", "", k) or 0)):
                item = v[key]
                if not isinstance(item, dict) or "sql_query" not in item:
                    raise FormatError(f"{key} lacks sql_query")
                try:
                    sql = check_select(conn, str(item["sql_query"]))
                except SqlRejected as exc:
                    raise FormatError(f"{key}: {exc}") from None
                out.append(SqlQuery(str(item.get("query_description", "")), sql))
            return out

        req = ModelRequest("sql.generate", system, user(f"QUESTION: {question}"))
        return ask_json(self.backends.model, req, check, self.max_tries - 1)

    def execute(self, conn: sqlite3.Connection, sql: str) -> tuple[list[str], list[tuple]]:
        sql = check_select(conn, sql)
        self.executed.append(sql)
        cur = conn.execute(sql)
        rows = cur.fetchmany(self.row_limit)
        cols = [d[0] for d in cur.description or []]
        return cols, rows

    def patterns(self, sql: str) -> list[Pattern]:
        system = (
            "List every text-matching predicate in the SQL query with its table, column, the "
            "column reference as written and the literal pattern.\n"
            'Reply with fenced JSON: {"patterns": [{"pattern_id": int, "table_name": str, '
            '"column_name": str, "reference_column": str, "search_pattern": str}]} (empty list if none)'
        )

        def check(v: Any) -> list[Pattern]:
            if not isinstance(v, dict) or not isinstance(v.get("patterns"), list):
                raise FormatError('expected {"patterns": [...]}')
            return [Pattern(str(p["table_name"]), str(p["column_name"]),
                            str(p.get("reference_column") or p["column_name"]), str(p["search_pattern"]))
                    for p in v["patterns"]]

        req = ModelRequest("sql.patterns", system, user(f"SQL: {sql}"))
        try:
            return ask_json(self.backends.model, req, check, self.max_tries - 1)
        except (FormatError, KeyError) as exc:
            logger.warning("pattern extraction failed: %s", exc)
            return []

    def column_values(self, conn: sqlite3.Connection, p: Pattern) -> list[str]:
        ident = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
        if not (ident.match(p.table) and ident.match(p.column)):
            return []
        sql = f'SELECT DISTINCT "{p.column}" FROM "{p.table}" WHERE "{p.column}" IS NOT NULL LIMIT 5000'
        try:
            return [str(r[0]) for r in conn.execute(sql).fetchall()]
        except sqlite3.Error:
            return []

    def verify(self, p: Pattern, candidates: list[str]) -> list[str]:
        literal = p.pattern.strip("%")
        listing = "\n".join(f"{i}: {c}" for i, c in enumerate(candidates))
        system = (
            f'Which candidate values mean the same entity as "{literal}"? Exact and partial '
            "matches, synonyms, abbreviations, misspellings and acronyms count. Be conservative: "
            "an extra word that changes the entity is not a match.\n"
            'Reply with fenced JSON: {"indices": [int, ...]} (empty if none).'
        )

        def check(v: Any) -> list[int]:
            idx = v.get("indices") if isinstance(v, dict) else None
            if not isinstance(idx, list) or not all(isinstance(i, int) and 0 <= i < len(candidates) for i in idx):
                raise FormatError(f'"indices" must list integers in 0..{len(candidates) - 1}')
            return idx

        req = ModelRequest("sql.verify", system, user(f"CANDIDATE VALUES:\n{listing}"))
        try:
            return [candidates[i] for i in ask_json(self.backends.model, req, check, self.max_tries - 1)]
        except FormatError as exc:
            logger.warning("match verification failed: %s", exc)
            return []

    def resolve_entities(self, conn: sqlite3.Connection, sql: str) -> Optional[str]:
        """Rewrite string predicates with verified column values; None if nothing changed."""
        rewritten = sql
        for p in self.patterns(sql):
            values = self.column_values(conn, p)
            literal = p.pattern.strip("%")
            if not values or not literal:
                continue
            emb = self.backends.embedder
            sims = cosine_matrix(emb.embed([literal]), emb.embed(values))[0]
            order = sorted(range(len(values)), key=lambda i: (-sims[i], i))[: self.candidates]
            verified = self.verify(p, [values[i] for i in order])
            if not verified:
                continue
            rewritten = rewrite_predicate(rewritten, p, verified)
        return rewritten if rewritten != sql else None

    def analyze(self, question: str, results: list[tuple[SqlQuery, list[str], list[tuple]]]) -> str:
        blocks = []
        for i, (q, cols, rows) in enumerate(results, 1):
            table = json.dumps([dict(zip(cols, r)) for r in rows], default=str)
            blocks.append(f"[TABLE_{i}] {q.description}\nSQL: {q.sql}\nROWS: {table}")
        system = (
            "Answer the question from the SQL results only, citing the table identifiers such as "
            '[TABLE_1] for every figure you use.\nReply with fenced JSON: {"response": str}'
        )

        def check(v: Any) -> str:
            if not isinstance(v, dict) or not str(v.get("response", "")).strip():
                raise FormatError('expected {"response": non-empty string}')
            return str(v["response"])

        req = ModelRequest("sql.analyze", system, user(f"QUESTION: {question}\n\n" + "\n\n".join(blocks)))
        return ask_json(self.backends.model, req, check, self.max_tries - 1)

    # -- entry point ----------------------------------------------------------

    def run(self, query: str, params: Optional[dict[str, str]] = None) -> str:
        conn = self.connect()
        try:
            try:
                queries = self.generate(conn, query)
            except FormatError as exc:
                return f"SQL subagent refused the request: {exc}"
            results = []
            for q in queries:
                try:
                    cols, rows = self.execute(conn, q.sql)
                    if not rows:
                        better = self.resolve_entities(conn, q.sql)
                        if better is not None:
                            q = SqlQuery(q.description, better)
                            cols, rows = self.execute(conn, better)
                except (sqlite3.Error, SqlRejected) as exc:
                    return f"SQL error while running {q.sql!r}: {exc}"
                results.append((q, cols, rows))
        finally:
            conn.close()

        mapping = {}
        for i, (q, cols, rows) in enumerate(results, 1):
            content = json.dumps([dict(zip(cols, r)) for r in rows], default=str)
            mapping[str(i)] = self.citations.register(
                TOOL, "table_row", {"database": self.db_path.name, "sql": q.sql, "rows": f"0-{len(rows)}"},
                content, {"description": q.description, "row_count": str(len(rows))})
        if not any(rows for _, _, rows in results):
            keys = " ".join(f"[{k}]" for k in mapping.values())
            return f"The query returned no rows {keys}".strip() + "."
        try:
            answer = self.analyze(query, results)
        except FormatError as exc:
            logger.warning("SQL analysis failed, returning raw rows: %s", exc)
            return "\n".join(f"[{mapping[str(i)]}] {self.citations.resolve(mapping[str(i)]).content}"
                             for i in range(1, len(results) + 1))
        return remap(answer, mapping, _LOCAL_TABLE)


def _sql_string(value: str) -> str:
    return "'" + value.replace("'", "''") + "'"


def rewrite_predicate(sql: str, p: Pattern, values: list[str]) -> str:
    """Replace ``ref = 'x'`` / ``ref LIKE 'x'`` by an exact-match predicate."""
    quoted = re.escape(_sql_string(p.pattern))
    ref = re.escape(p.reference)
    exact = f"{p.reference} = {_sql_string(values[0])}" if len(values) == 1 else \
        f"{p.reference} IN ({', '.join(_sql_string(v) for v in values)})"
    pred = re.compile(rf"{ref}\s*(?:=|LIKE)\s*{quoted}(?:\s+COLLATE\s+NOCASE)?", re.I)
    new, n = pred.subn(exact, sql, count=1)
    if n:
        return new
    return sql.replace(_sql_string(p.pattern), _sql_string(values[0]), 1)
