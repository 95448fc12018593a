"""Web-search subagent: query expansion, merged ranking, scrape and summarize."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence
from urllib.parse import urlsplit, urlunsplit

from ..backends import Backends, FetchError, FormatError, ModelRequest, SearchResult, ask, extract_tag, user
from ..citations import CitationDB, remap

logger = logging.getLogger(__name__)

TOOL = "WEB_SEARCH"
TIME_RANGES = ("Not Applicable", "Past Day", "Past Week", "Past Month", "Past Year")
_NARROWNESS = {"Past Day": 0, "Past Week": 1, "Past Month": 2, "Past Year": 3}
SCRAPE_CHARS = 20_000


@dataclass
class PlannedSearch:
    question: str
    time_range: str


def normalize_url(url: str) -> str:
    parts = urlsplit(url.strip())
    host = parts.netloc.lower().removeprefix("www.")
    path = parts.path.rstrip("/") or "/"
    return urlunsplit(("", host, path, parts.query, ""))


def merge_results(per_query: Sequence[Sequence[SearchResult]]) -> list[SearchResult]:
    """Interleave by per-query rank, then drop repeated URLs (first occurrence wins)."""
    merged: list[SearchResult] = []
    seen: set[str] = set()
    depth = max((len(r) for r in per_query), default=0)
    for rank in range(depth):
        for results in per_query:
            if rank < len(results):
                r = results[rank]
                key = normalize_url(r.url)
                if key not in seen:
                    seen.add(key)
                    merged.append(r)
    return merged


def recency_window(plan: Sequence[PlannedSearch]) -> Optional[str]:
    """The narrowest time range any planned search asks for, or None."""
    windows = [p.time_range for p in plan if p.time_range in _NARROWNESS]
    return min(windows, key=_NARROWNESS.get) if windows else None


def parse_plan(text: str, lo: int = 3, hi: int = 8) -> list[PlannedSearch]:
    body = extract_tag(text, "output")
    blocks = re.findall(r"<search>(.*?)</search>", body, re.S)
    plan = []
    for b in blocks:
        q = extract_tag(b, "question")
        tr = (extract_tag(b, "timerange", required=False) or "Not Applicable").strip()
        match = next((t for t in TIME_RANGES if t.lower() == tr.lower()), None)
        if match is None:
            raise FormatError(f"unknown timerange {tr!r}; use one of {', '.join(TIME_RANGES)}")
        if q:
            plan.append(PlannedSearch(q, match))
    if not lo <= len(plan) <= hi:
        raise FormatError(f"need {lo} to {hi} <search> entries, got {len(plan)}")
    return plan


class WebSearchTool:
    name = "WEB_SEARCH"
    description = "Searches the web and answers with source citations."

    def __init__(self, backends: Backends, citations: CitationDB, full: bool = True,
                 background: str = "", retries: int = 2, min_queries: int = 3, max_queries: int = 8):
        self.backends = backends
        self.citations = citations
        self.full = full
        self.background = background
        self.retries = retries
        self.min_queries = min_queries
        self.max_queries = max_queries

    def plan(self, query: str) -> list[PlannedSearch]:
        system = (
            f"Plan {self.min_queries} to {self.max_queries} varied web searches that together cover "
            "the question: broad ones, aspect-specific ones and one or two drilling into a concrete "
            "angle. Do not take the question's premises for granted. Give each a time range: "
            f"{', '.join(TIME_RANGES)}.\nBACKGROUND: {self.background or '(none)'}\n"
            f"TODAY: {self.backends.today()}\n"
            "Reply as <output><search><question>...</question><timerange>...</timerange></search>...</output>"
        )
        req = ModelRequest("web.strategy", system, user(f"QUESTION: {query}"))
        return ask(self.backends.model, req, lambda t: parse_plan(t, self.min_queries, self.max_queries),
                   self.retries)

    def _search_all(self, questions: Sequence[str], window: Optional[str]) -> list[list[SearchResult]]:
        def one(q: str) -> list[SearchResult]:
            return self.backends.search.search(q, window)

        if self.backends.max_workers > 1:
            with ThreadPoolExecutor(self.backends.max_workers) as pool:
                return list(pool.map(one, questions))
        return [one(q) for q in questions]

    def summarize(self, query: str, result: SearchResult, page: str) -> str:
        system = (
            "Summarize the web page for the query by quoting its most relevant passages in "
            "quotation marks, with just enough context, keeping facts, figures and dates. Invent "
            "nothing. One to five sentences.\nReply as <output><summary>...</summary></output>"
        )
        prompt = f"QUERY: {query}\nTITLE: {result.title}\nLINK: {result.url}\nPAGE:\n{page}"
        req = ModelRequest("web.summarize", system, user(prompt))
        return ask(self.backends.model, req, lambda t: extract_tag(t, "summary"), self.retries)

    def _evidence(self, query: str, r: SearchResult) -> tuple[str, str, bool]:
        """(summary shown to the aggregator, stored content, content available)."""
        if not self.full:
            return r.snippet, r.snippet, True
        try:
            page = self.backends.fetcher.fetch(r.url)[:SCRAPE_CHARS]
        except FetchError as exc:
            logger.info("scrape failed for %s, using snippet: %s", r.url, exc)
            return r.snippet, r.snippet, False
        try:
            summary = self.summarize(query, r, page)
        except FormatError:
            summary = r.snippet
        return summary, f"{summary}\n\n{page}", True

    def aggregate(self, query: str, entries: Sequence[tuple[SearchResult, str]]) -> str:
        system = (
            "Answer the query from the numbered web summaries. Cite every factual statement with "
            "its position in square brackets such as [1], show disagreements between sources, "
            "invent nothing and write connected prose.\nReply as <output><answer>...</answer></output>"
        )
        body = "\n\n".join(f"[{i}] {r.title} ({r.url})\n{s}" for i, (r, s) in enumerate(entries, 1))
        req = ModelRequest("web.aggregate", system, user(f"QUERY: {query}\n\n{body}"))
        return ask(self.backends.model, req, lambda t: extract_tag(t, "answer"), self.retries)

    def run(self, query: str, params: Optional[dict[str, str]] = None) -> str:
        try:
            plan = self.plan(query)
        except FormatError as exc:
            logger.warning("search planning failed, searching the query directly: %s", exc)
            plan = [PlannedSearch(query, "Not Applicable")]
        window = recency_window(plan)
        results = merge_results(self._search_all([p.question for p in plan], window))
        if not results:
            return "No web results were found."
        entries, mapping = [], {}
        for i, r in enumerate(results, 1):
            shown, content, available = self._evidence(query, r)
            mapping[str(i)] = self.citations.register(
                TOOL, "web", {"url": r.url}, content,
                {"title": r.title, "date": r.date or "", "snippet": r.snippet}, available)
            entries.append((r, shown))
        try:
            text = self.aggregate(query, entries)
        except FormatError as exc:
            logger.warning("web aggregation failed, returning summaries: %s", exc)
            return "\n".join(f"[{mapping[str(i)]}] {s}" for i, (_, s) in enumerate(entries, 1))
        return remap(text, mapping)
