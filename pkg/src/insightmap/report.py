"""Report generation from an accepted insight's trace.

Stages run in a fixed order: outline, title/summary, sections (each seeing
the ones before it), citation audit, poster.  Every stage validates model
output against a schema and re-prompts with the error on failure.
"""

from __future__ import annotations

import difflib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Union

import numpy as np

from .backends import (Backends, BackendError, FormatError, ModelRequest, ask, ask_json, cosine_matrix,
                       extract_json, user)
from .citations import KEY_RE, CitationDB, keys_in, strip_citations
from .evaluation.numbers import extract_numbers, found_in

logger = logging.getLogger(__name__)

DECLINED = "DECLINED"


class SectionType(str, Enum):
    TEXT = "Text"
    TABLE = "Table"
    CHART = "Chart"
    BULLETS = "BulletPoints"
    NUMBERED = "NumberedList"
    CATEGORIZATION = "Categorization"
    MEASUREMENT = "Measurement"
    RECOMMENDATION = "Recommendation"
    TIMELINE = "Timeline"

    @classmethod
    def parse(cls, raw: str) -> "SectionType":
        key = re.sub(r"[\s_-]+", "", str(raw)).casefold()
        for t in cls:
            if t.value.casefold() == key:
                return t
        raise FormatError(f"unknown section type {raw!r}; use one of {', '.join(t.value for t in cls)}")


# Content shape each type must return; shown to the model and enforced below.
SCHEMAS: dict[SectionType, tuple[str, str]] = {
    SectionType.TEXT: ("Paragraphs of explanation and analysis.", '{"paragraphs": [str, ...]}'),
    SectionType.TABLE: ("Rows comparing items across the same columns.",
                        '{"columns": [str, ...], "rows": [[str, ...], ...]}'),
    SectionType.CHART: ("A standard chart built only from explicit figures.", '{"code": str, "caption": str}'),
    SectionType.BULLETS: ("Short unordered key points.", '{"items": [str, ...]}'),
    SectionType.NUMBERED: ("Ordered steps or priorities.", '{"items": [str, ...]}'),
    SectionType.CATEGORIZATION: ("Items grouped under named categories.",
                                 '{"categories": [{"name": str, "items": [str, ...]}, ...]}'),
    SectionType.MEASUREMENT: ("Ratings such as low/medium/high per category, each justified.",
                              '{"measurements": [{"category": str, "rating": str, "justification": str}, ...]}'),
    SectionType.RECOMMENDATION: ("Actions per stakeholder with justification, impact and priority.",
                                 '{"recommendations": [{"stakeholder": str, "action": str, '
                                 '"justification": str, "impact": str, "priority": str}, ...]}'),
    SectionType.TIMELINE: ("Dated events or milestones in date order.",
                           '{"entries": [{"date": str, "event": str}, ...]}'),
}

_FORBIDDEN_TITLE = re.compile(
    r"^\s*(title|report title|summary|executive summary|abstract)\s*$|executive summary|"
    r"raw (retrieval|search)|(retrieval|search) results|tool outputs?", re.I)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class PlanEntry:
    title: str
    type: SectionType
    description: str
    throughline: str
    subsections: list["PlanEntry"] = field(default_factory=list)


@dataclass
class Outline:
    throughline: str
    sections: list[PlanEntry]

    def flat(self) -> list[tuple[int, PlanEntry]]:
        out = []
        for s in self.sections:
            out.append((1, s))
            out.extend((2, sub) for sub in s.subsections)
        return out


@dataclass
class Section:
    title: str
    type: SectionType
    description: str
    throughline: str
    content: dict[str, Any]
    level: int = 1
    citations: list[str] = field(default_factory=list)
    flagged: str = ""


@dataclass
class Report:
    title: str
    summary: str
    overview: str
    throughline: str
    sections: list[Section]
    declined: list[dict[str, str]] = field(default_factory=list)
    audit_log: list[dict[str, Any]] = field(default_factory=list)
    audit_skipped: bool = False
    goal: str = ""
    hypothesis: str = ""
    insight: str = ""
    created: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["sections"]:
            s["type"] = s["type"].value if isinstance(s["type"], Enum) else s["type"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        d = dict(d)
        d["sections"] = [Section(**{**s, "type": SectionType(s["type"])}) for s in d["sections"]]
        return cls(**d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Report":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def all_keys(self) -> list[str]:
        text = self.summary + "\n" + "\n".join(t for s in self.sections for t in text_leaves(s))
        return keys_in(text)


@dataclass
class Poster:
    headline: str
    context: str
    metrics: list[dict[str, str]]
    insights: list[str]
    actions: list[str]
    risks: list[str]
    tags: list[str]
    selected_chart_index: Optional[int] = None
    selected_table_index: Optional[int] = None
    chart_caption: Optional[str] = None
    table_caption: Optional[str] = None
    template: str = "neither"
    flagged: str = ""


@dataclass
class ReportConfig:
    retries: int = 2
    audit_top_k: int = 5
    overlap_cosine: float = 0.35
    source_chars: int = 2000
    min_edit_ratio: float = 0.8

    @classmethod
    def from_dict(cls, data: dict) -> "ReportConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# Text helpers
# ---------------------------------------------------------------------------

_ABBREV = {"e.g", "i.e", "etc", "vs", "mr", "mrs", "ms", "dr", "prof", "no", "fig", "st", "jr", "sr",
           "inc", "ltd", "co", "corp", "u.s", "u.k", "approx", "est", "al", "jan", "feb", "mar", "apr",
           "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec"}
_BOUNDARY = re.compile(r"[.!?][\"')]*((?:\s*\[[A-Z][A-Z_]*_[0-9]+\])*)\s+(?=[A-Z0-9\"(])")


def split_sentences(text: str) -> list[str]:
    """Sentence chunks; trailing citation keys stay with their sentence."""
    out, start = [], 0
    for m in _BOUNDARY.finditer(text):
        before = re.search(r"(\S+)$", text[start:m.start() + 1])
        token = before.group(1).rstrip(".!?\"')").lower() if before else ""
        if token in _ABBREV or (len(token) == 1 and token.isalpha()):
            continue
        out.append(text[start:m.end(1)].strip())
        start = m.end()
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def _strings(value: Any) -> Iterator[str]:
    if isinstance(value, str):
        yield value
    elif isinstance(value, list):
        for v in value:
            yield from _strings(v)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _strings(v)


def text_leaves(section: Section) -> list[str]:
    """Every prose string in a section (chart code excluded)."""
    content = {k: v for k, v in section.content.items() if k != "code"}
    return list(_strings(content))


def _map_strings(value: Any, fn: Callable[[str], str], skip: tuple[str, ...] = ("code",)) -> Any:
    if isinstance(value, str):
        return fn(value)
    if isinstance(value, list):
        return [_map_strings(v, fn, skip) for v in value]
    if isinstance(value, dict):
        return {k: (v if k in skip else _map_strings(v, fn, skip)) for k, v in value.items()}
    return value


def section_units(section: Section) -> list[tuple[str, str]]:
    """(kind, text) evaluation units: a table row, a list item or a sentence."""
    c, t = section.content, section.type
    if t is SectionType.TABLE:
        return [("table_row", " | ".join(str(x) for x in row)) for row in c.get("rows", [])]
    if t in (SectionType.BULLETS, SectionType.NUMBERED):
        return [("list_item", str(x)) for x in c.get("items", [])]
    if t is SectionType.CATEGORIZATION:
        return [("list_item", f"{cat.get('name', '')}: {item}") for cat in c.get("categories", [])
                for item in cat.get("items", [])]
    if t is SectionType.MEASUREMENT:
        return [("list_item", " - ".join(str(m.get(k, "")) for k in ("category", "rating", "justification")))
                for m in c.get("measurements", [])]
    if t is SectionType.RECOMMENDATION:
        return [("list_item", " - ".join(str(r.get(k, "")) for k in
                                         ("stakeholder", "action", "justification", "impact", "priority")))
                for r in c.get("recommendations", [])]
    if t is SectionType.TIMELINE:
        return [("list_item", f"{e.get('date', '')}: {e.get('event', '')}") for e in c.get("entries", [])]
    return [("sentence", s) for leaf in text_leaves(section) for s in split_sentences(leaf)]


_DATE = re.compile(r"(?:(Q[1-4])\s*)?(\d{4})(?:[-/](\d{1,2}))?(?:[-/](\d{1,2}))?")
_MONTH_NAMES = {m: i for i, m in enumerate(
    ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"], 1)}


def date_key(raw: str) -> tuple[int, int, int]:
    """Sortable (year, month, day) for loosely written dates."""
    m = _DATE.search(raw)
    if m is None:
        raise FormatError(f"timeline date {raw!r} has no four-digit year")
    year = int(m.group(2))
    month = int(m.group(3) or 0)
    if m.group(1):
        month = (int(m.group(1)[1]) - 1) * 3 + 1
    else:
        name = re.search(r"\b(jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\b", raw, re.I)
        if name and not month:
            month = _MONTH_NAMES[name.group(1).lower()]
    return year, month, int(m.group(4) or 0)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _str_list(v: Any, name: str, lo: int = 1) -> list[str]:
    if not isinstance(v, list) or len(v) < lo or not all(isinstance(x, str) and x.strip() for x in v):
        raise FormatError(f'"{name}" must be a list of at least {lo} non-empty strings')
    return [x.strip() for x in v]


def _records(v: Any, name: str, keys: tuple[str, ...]) -> list[dict[str, str]]:
    if not isinstance(v, list) or not v:
        raise FormatError(f'"{name}" must be a non-empty list')
    out = []
    for item in v:
        if not isinstance(item, dict) or any(not str(item.get(k, "")).strip() for k in keys):
            raise FormatError(f'each "{name}" entry needs non-empty {", ".join(keys)}')
        out.append({k: str(item[k]).strip() for k in keys})
    return out


def validate_content(t: SectionType, v: Any) -> dict[str, Any]:
    if not isinstance(v, dict):
        raise FormatError("section content must be a JSON object")
    if t is SectionType.TEXT:
        return {"paragraphs": _str_list(v.get("paragraphs"), "paragraphs")}
    if t is SectionType.TABLE:
        cols = _str_list(v.get("columns"), "columns")
        rows = v.get("rows")
        if not isinstance(rows, list) or not rows:
            raise FormatError('"rows" must be a non-empty list')
        for r in rows:
            if not isinstance(r, list) or len(r) != len(cols):
                raise FormatError(f"every row needs exactly {len(cols)} cells")
        return {"columns": cols, "rows": [[str(x) for x in r] for r in rows]}
    if t is SectionType.CHART:
        code, cap = v.get("code"), v.get("caption")
        if not (isinstance(code, str) and code.strip() and isinstance(cap, str) and cap.strip()):
            raise FormatError('a chart needs non-empty "code" and "caption"')
        return {"code": code, "caption": cap.strip()}
    if t in (SectionType.BULLETS, SectionType.NUMBERED):
        return {"items": _str_list(v.get("items"), "items")}
    if t is SectionType.CATEGORIZATION:
        cats = v.get("categories")
        if not isinstance(cats, list) or not cats:
            raise FormatError('"categories" must be a non-empty list')
        out = []
        for c in cats:
            if not isinstance(c, dict) or not str(c.get("name", "")).strip():
                raise FormatError("each category needs a name")
            out.append({"name": str(c["name"]).strip(), "items": _str_list(c.get("items"), "items")})
        return {"categories": out}
    if t is SectionType.MEASUREMENT:
        return {"measurements": _records(v.get("measurements"), "measurements",
                                         ("category", "rating", "justification"))}
    if t is SectionType.RECOMMENDATION:
        return {"recommendations": _records(v.get("recommendations"), "recommendations",
                                            ("stakeholder", "action", "justification", "impact", "priority"))}
    entries = _records(v.get("entries"), "entries", ("date", "event"))
    keyed = [(date_key(e["date"]), i, e) for i, e in enumerate(entries)]
    return {"entries": [e for _, _, e in sorted(keyed, key=lambda x: (x[0], x[1]))]}


def _plan_entry(v: Any, depth: int) -> PlanEntry:
    if not isinstance(v, dict):
        raise FormatError("each section must be an object")
    title = str(v.get("title", "")).strip()
    if not title:
        raise FormatError("every section needs a title")
    if _FORBIDDEN_TITLE.search(title):
        raise FormatError(f"section {title!r} is not allowed: no title, executive-summary or raw-results sections")
    subs = v.get("subsections") or []
    if subs and depth > 1:
        raise FormatError("subsections may not nest further")
    return PlanEntry(title, SectionType.parse(v.get("type", "")), str(v.get("description", "")).strip(),
                     str(v.get("section_throughline", v.get("throughline", ""))).strip(),
                     [_plan_entry(s, depth + 1) for s in subs])


def parse_outline(v: Any, lo: int = 3, hi: int = 6) -> Outline:
    if not isinstance(v, dict) or not isinstance(v.get("sections"), list):
        raise FormatError('expected {"report_throughline": str, "sections": [...]}')
    throughline = str(v.get("report_throughline", "")).strip()
    if not throughline:
        raise FormatError("the outline needs a report_throughline")
    if not lo <= len(v["sections"]) <= hi:
        raise FormatError(f"need {lo} to {hi} top-level sections, got {len(v['sections'])}")
    return Outline(throughline, [_plan_entry(s, 1) for s in v["sections"]])


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


def verbalized_insight(trace_narrative: str, citations: CitationDB, chars: int = 2000) -> str:
    """Trace narrative followed by the content of every source it cites."""
    keys = [k for k in keys_in(trace_narrative) if k in citations]
    sources = "\n\n".join(f"[{k}] {citations.resolve(k).content[:chars]}" for k in keys)
    return f"{trace_narrative}\n\nCITED SOURCES:\n{sources or '(none)'}"


def render_markdown(report: Report) -> str:
    lines = [f"# {report.title}", "", report.summary, ""]
    if report.overview:
        lines += [f"*{report.overview}*", ""]
    for s in report.sections:
        lines += [f"{'#' * (s.level + 1)} {s.title}", ""]
        lines += _render_content(s) + [""]
    if report.declined:
        lines += ["---", ""] + [f"Declined section: {d['title']} ({d['reason']})" for d in report.declined]
    return "\n".join(lines).rstrip() + "\n"


def render_section(s: Section) -> str:
    """Heading plus body of one section as markdown."""
    return f"{'#' * (s.level + 1)} {s.title}\n\n" + "\n".join(_render_content(s)).rstrip() + "\n"


def _render_content(s: Section) -> list[str]:
    c = s.content
    t = s.type
    if t is SectionType.TEXT:
        return [p + "\n" for p in c["paragraphs"]]
    if t is SectionType.TABLE:
        head = "| " + " | ".join(c["columns"]) + " |"
        return [head, "|" + "---|" * len(c["columns"])] + ["| " + " | ".join(r) + " |" for r in c["rows"]]
    if t is SectionType.CHART:
        return ["```python", c["code"].rstrip(), "```", f"*{c['caption']}*"]
    if t is SectionType.BULLETS:
        return [f"- {x}" for x in c["items"]]
    if t is SectionType.NUMBERED:
        return [f"{i}. {x}" for i, x in enumerate(c["items"], 1)]
    if t is SectionType.CATEGORIZATION:
        return [line for cat in c["categories"] for line in [f"**{cat['name']}**"] + [f"- {x}" for x in cat["items"]]]
    if t is SectionType.MEASUREMENT:
        return [f"- **{m['category']}**: {m['rating']} ({m['justification']})" for m in c["measurements"]]
    if t is SectionType.RECOMMENDATION:
        return [f"- **{r['stakeholder']}** [{r['priority']}]: {r['action']} Why: {r['justification']} "
                f"Impact: {r['impact']}" for r in c["recommendations"]]
    return [f"- **{e['date']}**: {e['event']}" for e in c["entries"]]


class ReportGenerator:
    def __init__(self, backends: Backends, citations: CitationDB, config: Optional[ReportConfig] = None):
        self.backends = backends
        self.citations = citations
        self.config = config or ReportConfig()

    def _ask(self, role: str, system: str, prompt: str, check: Callable[[Any], Any]) -> Any:
        return ask_json(self.backends.model, ModelRequest(role, system, user(prompt)), check, self.config.retries)

    def _no_dangling(self, value: Any) -> None:
        missing = [k for k in keys_in("\n".join(_strings(value))) if k not in self.citations]
        if missing:
            raise FormatError(f"unknown citation keys {', '.join(missing)}; use only keys from the sources")

    # -- outline / title --------------------------------------------------------

    def outline(self, verbalized: str, goal: str) -> Outline:
        if not verbalized.strip():
            raise ValueError("cannot outline an empty trace")
        types = "\n".join(f"- {t.value}: {SCHEMAS[t][0]}" for t in SectionType)
        system = (
            "Plan a report around the final insight in the research trace. Fix one throughline for the "
            "whole report and state for each section how it advances it. Use 3 to 6 sections, adding "
            "subsections only where they clearly help, and plan only what the trace can fill. Favour "
            "tables, charts, timelines and other structured types when the evidence allows. Leave out "
            "title pages, executive summaries and dumps of raw search output.\n"
            f"GOAL: {goal}\nTODAY: {self.backends.today()}\nSECTION TYPES:\n{types}\n"
            'Reply with fenced JSON: {"report_throughline": str, "sections": [{"title": str, "type": str, '
            '"description": str, "section_throughline": str, "subsections": [...]}]}'
        )
        return self._ask("report.outline", system, verbalized, parse_outline)

    def title_summary(self, outline: Outline, insight: str) -> dict[str, str]:
        if not outline.sections:
            raise ValueError("outline has no sections")
        system = (
            "Write a short title naming the insight, a self-contained executive summary giving the finding, "
            "its main evidence and its most important caveat with inline citation keys, and a one-paragraph "
            "overview of how the sections build the throughline. Add no facts beyond the insight and plan.\n"
            'Reply with fenced JSON: {"title": str, "summary": str, "overview": str}'
        )
        plan = json.dumps({"report_throughline": outline.throughline,
                           "sections": [{"title": p.title, "type": p.type.value, "description": p.description}
                                        for _, p in outline.flat()]}, indent=1)

        def check(v: Any) -> dict[str, str]:
            if not isinstance(v, dict) or not all(str(v.get(k, "")).strip() for k in ("title", "summary")):
                raise FormatError('need non-empty "title" and "summary"')
            out = {k: str(v.get(k, "")).strip() for k in ("title", "summary", "overview")}
            self._no_dangling(out)
            return out

        return self._ask("report.title", system, f"INSIGHT: {insight}\nPLAN:\n{plan}", check)

    # -- sections ---------------------------------------------------------------

    def section(self, verbalized: str, so_far: str, plan: PlanEntry) -> Union[dict[str, Any], str]:
        """Validated content, or the decline reason for a chart."""
        if plan.type is SectionType.CHART:
            return self._chart(verbalized, so_far, plan)
        desc, schema = SCHEMAS[plan.type]
        system = (
            "Write one report section from the research trace only. Keep the style of the report so far, "
            "use short clear sentences, do not repeat or contradict earlier sections, and carry over the "
            "citation keys of the sources you use. Never invent figures or keys.\n"
            f"TITLE: {plan.title}\nTYPE: {plan.type.value} ({desc})\nTHROUGHLINE: {plan.throughline}\n"
            f"PLAN: {plan.description}\nTODAY: {self.backends.today()}\n"
            f"Reply with fenced JSON: {schema}"
        )

        def check(v: Any) -> dict[str, Any]:
            content = validate_content(plan.type, v)
            self._no_dangling(content)
            return content

        return self._ask("report.section", system, f"TRACE:\n{verbalized}\n\nREPORT SO FAR:\n{so_far or '(empty)'}",
                         check)

    def _chart(self, verbalized: str, so_far: str, plan: PlanEntry) -> Union[dict[str, Any], str]:
        system = (
            "Decide whether the explicit figures in the trace justify a chart for this section. If they "
            f"do not, reply with {DECLINED} followed by a short reason. Otherwise reply with fenced JSON "
            '{"code": "<self-contained matplotlib code with the data inline>", "caption": str}. '
            "Use a standard chart type and keep citation keys out of the chart.\n"
            f"TITLE: {plan.title}\nPLAN: {plan.description}"
        )

        def parse(text: str) -> Union[dict[str, Any], str]:
            stripped = text.strip()
            if stripped.upper().startswith(DECLINED):
                return stripped[len(DECLINED):].strip(" :.-\n") or "insufficient evidence"
            content = validate_content(SectionType.CHART, extract_json(text))
            content["code"] = KEY_RE.sub("", content["code"])
            return content

        req = ModelRequest("report.chart", system, user(f"TRACE:\n{verbalized}\n\nREPORT SO FAR:\n{so_far or '(empty)'}"))
        return ask(self.backends.model, req, parse, self.config.retries)

    def sections(self, verbalized: str, outline: Outline, header: str = "") -> tuple[list[Section], list[dict]]:
        done: list[Section] = []
        declined: list[dict] = []
        for level, plan in outline.flat():
            so_far = header + "\n\n" + "\n".join(
                f"{'#' * (s.level + 1)} {s.title}\n" + "\n".join(_render_content(s)) for s in done)
            flagged = ""
            try:
                content = self.section(verbalized, so_far.strip(), plan)
            except FormatError as exc:
                if plan.type is SectionType.CHART:
                    declined.append({"title": plan.title, "reason": f"invalid chart output: {exc}"})
                    continue
                logger.warning("section %r fell back to text: %s", plan.title, exc)
                content, flagged = {"paragraphs": [plan.description or plan.title]}, f"schema fallback: {exc}"
                sec = Section(plan.title, SectionType.TEXT, plan.description, plan.throughline, content, level,
                              [], flagged)
                done.append(sec)
                continue
            if isinstance(content, str):
                declined.append({"title": plan.title, "reason": content})
                continue
            sec = Section(plan.title, plan.type, plan.description, plan.throughline, content, level)
            sec.citations = keys_in("\n".join(text_leaves(sec)))
            done.append(sec)
        return done, declined

    # -- audit ------------------------------------------------------------------

    def _supported(self, chunk: str, key: str, chunk_vec: np.ndarray, rec_vecs: dict[str, np.ndarray]) -> bool:
        content = self.citations.resolve(key).content
        plain = strip_citations(chunk)
        if any(found_in(n, content) for n in extract_numbers(plain)):
            return True
        return float(cosine_matrix(chunk_vec[None, :], rec_vecs[key][None, :])[0, 0]) >= self.config.overlap_cosine

    def _audit_chunk(self, chunk: str, where: str, allowed: list[str], rec_vecs: dict[str, np.ndarray],
                     log: list[dict]) -> str:
        for k in keys_in(chunk):
            if k not in self.citations:
                chunk = chunk.replace(f"[{k}]", "")
                log.append({"where": where, "action": "remove", "key": k, "reason": "key not in citation database"})
        chunk = re.sub(r"[ \t]{2,}", " ", chunk).replace(" .", ".").strip()
        if not allowed:
            return chunk
        plain = strip_citations(chunk)
        chunk_vec = self.backends.embedder.embed([plain])[0]
        mat = np.vstack([rec_vecs[k] for k in allowed])
        sims = cosine_matrix(chunk_vec[None, :], mat)[0]
        top = [allowed[i] for i in sorted(range(len(allowed)), key=lambda i: (-sims[i], i))[: self.config.audit_top_k]]
        cands = list(dict.fromkeys(keys_in(chunk) + top))
        records = "\n\n".join(f"[{k}] {self.citations.resolve(k).content[:800]}" for k in cands)
        system = (
            "Audit the citations of one passage. Check each existing key against its record, remove or "
            "replace keys that do not support the claim, and add a key right after a claim a record "
            "supports. Use keys exactly as given. If nothing supports a claim, leave it uncited. Keep the "
            "wording; change nothing else.\n"
            'Reply with fenced JSON: {"text": "<the passage with repaired citations>"}, or '
            '{"unchanged": true} if every citation is already right.'
        )

        def check(v: Any) -> str:
            if isinstance(v, dict) and v.get("unchanged") is True:
                return chunk
            if not isinstance(v, dict) or not isinstance(v.get("text"), str) or not v["text"].strip():
                raise FormatError('expected {"text": non-empty string} or {"unchanged": true}')
            return v["text"].strip()

        revised = self._ask("report.audit", system, f"PASSAGE: {chunk}\n\nRECORDS:\n{records}", check)
        if revised == chunk:
            return chunk
        new_plain = strip_citations(revised)
        if [n.raw for n in extract_numbers(new_plain)] != [n.raw for n in extract_numbers(plain)]:
            log.append({"where": where, "action": "rejected", "key": "", "reason": "edit changed numbers"})
            return chunk
        if difflib.SequenceMatcher(None, plain, new_plain).ratio() < self.config.min_edit_ratio:
            log.append({"where": where, "action": "rejected", "key": "", "reason": "edit not minimal"})
            return chunk
        before, after = set(keys_in(chunk)), keys_in(revised)
        for k in after:
            if k in before:
                continue
            if k not in self.citations or not self._supported(revised, k, chunk_vec, rec_vecs):
                revised = revised.replace(f"[{k}]", "")
                log.append({"where": where, "action": "rejected", "key": k, "reason": "no overlap with record"})
            else:
                log.append({"where": where, "action": "add", "key": k, "reason": "supported by record"})
        for k in before - set(keys_in(revised)):
            log.append({"where": where, "action": "remove", "key": k, "reason": "auditor removed"})
        revised = re.sub(r"[ \t]{2,}", " ", revised).replace(" .", ".").strip()
        if strip_citations(revised) != plain:
            log.append({"where": where, "action": "edit", "key": "", "reason": "wording adjusted"})
        return revised

    def audit(self, report: Report, allowed_keys: Optional[list[str]] = None) -> Report:
        """Repair citations sentence by sentence; every change is logged."""
        allowed = [k for k in (allowed_keys if allowed_keys is not None else [r.key for r in self.citations.records()])
                   if k in self.citations]
        rec_vecs: dict[str, np.ndarray] = {}
        if allowed:
            vecs = self.backends.embedder.embed([self.citations.resolve(k).content for k in allowed])
            rec_vecs = dict(zip(allowed, vecs))
        log: list[dict] = []

        def fix_leaf(where: str) -> Callable[[str], str]:
            def fn(text: str) -> str:
                return " ".join(self._audit_chunk(s, where, allowed, rec_vecs, log) for s in split_sentences(text))
            return fn

        try:
            summary = fix_leaf("summary")(report.summary)
            sections = []
            for s in report.sections:
                content = _map_strings(s.content, fix_leaf(s.title))
                new = Section(**{**asdict(s), "type": s.type, "content": content})
                new.citations = keys_in("\n".join(text_leaves(new)))
                sections.append(new)
        except (FormatError, BackendError) as exc:
            logger.warning("citation audit skipped: %s", exc)
            report.audit_skipped = True
            return self._drop_dangling(report)
        report.summary, report.sections = summary, sections
        report.audit_log.extend(log)
        return report

    def _drop_dangling(self, report: Report) -> Report:
        def clean(text: str) -> str:
            for k in keys_in(text):
                if k not in self.citations:
                    report.audit_log.append({"where": "report", "action": "remove", "key": k,
                                             "reason": "key not in citation database"})
                    text = text.replace(f"[{k}]", "")
            return text

        report.summary = clean(report.summary)
        for s in report.sections:
            s.content = _map_strings(s.content, clean)
            s.citations = keys_in("\n".join(text_leaves(s)))
        return report

    # -- poster -----------------------------------------------------------------

    def poster(self, report: Report) -> Poster:
        charts = [s for s in report.sections if s.type is SectionType.CHART]
        tables = [s for s in report.sections if s.type is SectionType.TABLE]
        visuals = "\n".join([f"CHART {i}: {s.title} - {s.content['caption']}" for i, s in enumerate(charts)]
                            + [f"TABLE {i}: {s.title} - {s.description}" for i, s in enumerate(tables)])
        system = (
            "Distil the report into a one-page poster an executive grasps in half a minute. Open with the "
            "conclusion, use only what the report states and keep its numbers exact. Feature at most one "
            "chart and one table, and only if essential to the headline; otherwise use null.\n"
            "Fields: headline (8-12 words, the conclusion), context (20-30 words), metrics (3-5 "
            "{value, label}), insights (3-4), actions (3-4, imperative), risks (2-3), tags (2-3), "
            "selected_chart_index, selected_table_index (0-based or null), chart_caption, table_caption.\n"
            f"VISUALS:\n{visuals or '(none)'}\nReply with fenced JSON."
        )
        req = ModelRequest("poster", system, user(render_markdown(report)))
        last: dict[str, Any] = {}

        def parse(text: str) -> Poster:
            value = extract_json(text)
            last["value"] = value
            return parse_poster(value, len(charts), len(tables))

        try:
            return ask(self.backends.model, req, parse, self.config.retries)
        except FormatError as exc:
            logger.warning("poster bounds violated after retries, clamping: %s", exc)
            p = clamp_poster(last.get("value", {}), len(charts), len(tables))
            p.flagged = str(exc)
            return p


POSTER_BOUNDS = {"metrics": (3, 5), "insights": (3, 4), "actions": (3, 4), "risks": (2, 3), "tags": (2, 3)}
WORD_BOUNDS = {"headline": (8, 12), "context": (20, 30)}


def template_for(chart: Optional[int], table: Optional[int]) -> str:
    if chart is not None and table is not None:
        return "chart+table"
    if chart is not None:
        return "chart-only"
    if table is not None:
        return "table-only"
    return "neither"


def _index(v: Any, n: int, name: str) -> Optional[int]:
    if v is None:
        return None
    if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < n:
        raise FormatError(f"{name} must be null or an index below {n}")
    return v


def parse_poster(v: Any, n_charts: int, n_tables: int) -> Poster:
    if not isinstance(v, dict):
        raise FormatError("poster must be a JSON object")
    for name, (lo, hi) in WORD_BOUNDS.items():
        words = len(str(v.get(name, "")).split())
        if not lo <= words <= hi:
            raise FormatError(f"{name} must have {lo} to {hi} words, got {words}")
    lists = {}
    for name, (lo, hi) in POSTER_BOUNDS.items():
        items = v.get(name)
        if not isinstance(items, list) or not lo <= len(items) <= hi:
            raise FormatError(f"{name} must list {lo} to {hi} entries")
        lists[name] = items
    metrics = _records(lists["metrics"], "metrics", ("value", "label"))
    chart = _index(v.get("selected_chart_index"), n_charts, "selected_chart_index")
    table = _index(v.get("selected_table_index"), n_tables, "selected_table_index")
    return Poster(str(v["headline"]).strip(), str(v["context"]).strip(), metrics,
                  *(_str_list(lists[k], k) for k in ("insights", "actions", "risks", "tags")),
                  selected_chart_index=chart, selected_table_index=table,
                  chart_caption=v.get("chart_caption") if chart is not None else None,
                  table_caption=v.get("table_caption") if table is not None else None,
                  template=template_for(chart, table))


def clamp_poster(v: Any, n_charts: int, n_tables: int) -> Poster:
    """Best-effort poster from out-of-bounds output: trim lists and strings."""
    v = v if isinstance(v, dict) else {}

    def words(name: str) -> str:
        return " ".join(str(v.get(name, "")).split()[: WORD_BOUNDS[name][1]])

    def items(name: str) -> list:
        raw = v.get(name) if isinstance(v.get(name), list) else []
        return raw[: POSTER_BOUNDS[name][1]]

    def idx(name: str, n: int) -> Optional[int]:
        x = v.get(name)
        return x if isinstance(x, int) and not isinstance(x, bool) and 0 <= x < n else None

    chart, table = idx("selected_chart_index", n_charts), idx("selected_table_index", n_tables)
    metrics = [{"value": str(m.get("value", "")), "label": str(m.get("label", ""))}
               for m in items("metrics") if isinstance(m, dict)]
    return Poster(words("headline"), words("context"), metrics,
                  *([str(x) for x in items(k)] for k in ("insights", "actions", "risks", "tags")),
                  selected_chart_index=chart, selected_table_index=table,
                  chart_caption=v.get("chart_caption") if chart is not None else None,
                  table_caption=v.get("table_caption") if table is not None else None,
                  template=template_for(chart, table))


def render_poster(p: Poster, report: Report) -> str:
    charts = [s for s in report.sections if s.type is SectionType.CHART]
    tables = [s for s in report.sections if s.type is SectionType.TABLE]
    lines = [f"# {p.headline}", "", p.context, "", "## Key metrics"]
    lines += [f"- **{m['value']}** {m['label']}" for m in p.metrics]
    if p.selected_chart_index is not None:
        c = charts[p.selected_chart_index]
        lines += ["", f"## Chart: {c.title}", f"*{p.chart_caption or c.content['caption']}*"]
    if p.selected_table_index is not None:
        t = tables[p.selected_table_index]
        lines += ["", f"## Table: {t.title}"] + _render_content(t)
        if p.table_caption:
            lines.append(f"*{p.table_caption}*")
    for head, items in (("What it means", p.insights), ("What to do", p.actions), ("Watch-outs", p.risks)):
        lines += ["", f"## {head}"] + [f"- {x}" for x in items]
    lines += ["", "Tags: " + ", ".join(p.tags), f"Template: {p.template}"]
    return "\n".join(lines) + "\n"


def generate_report(gen: ReportGenerator, verbalized: str, goal: str, hypothesis: str,
                    insight: str) -> tuple[Report, Poster]:
    """Outline, title, sections, audit and poster for one accepted insight."""
    outline = gen.outline(verbalized, goal)
    head = gen.title_summary(outline, insight)
    sections, declined = gen.sections(verbalized, outline, f"# {head['title']}\n{head['summary']}")
    report = Report(head["title"], head["summary"], head["overview"], outline.throughline, sections, declined,
                    goal=goal, hypothesis=hypothesis, insight=insight, created=gen.backends.today())
    allowed = [k for k in keys_in(verbalized) if k in gen.citations]
    report = gen.audit(report, allowed)
    return report, gen.poster(report)
