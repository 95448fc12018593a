"""Meta-reports: distil many reports into themed, cited syntheses.

Stages: reader personas, per-report highlights, entity extraction, cluster
detection (or manual clusters), assignment, three refinement passes per
cluster, then sequential rendering of the meta-report sections.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar, Union

from .backends import Backends, FormatError, Message, ModelRequest, ask, extract_json, user
from .report import Report, render_markdown

logger = logging.getLogger(__name__)

NO_HIGHLIGHTS = "No significant highlights found."
NOCHANGE = "<NOCHANGE/>"
REPORT_KEY = re.compile(r"\[REPORT_(\d+)\]")

T = TypeVar("T")


@dataclass
class MetaConfig:
    k: int = 4
    token_budget: int = 12000
    token_factor: float = 1.3
    word_slack: float = 0.10
    retries: int = 2
    sample_size: int = 5
    report_chars: int = 24000
    manual_clusters: Optional[dict[str, str]] = None
    seed_keywords: list[str] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "MetaConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class PersonaPair:
    highlighter: str
    audience: str


@dataclass
class Highlight:
    report: str
    text: str

    @property
    def empty(self) -> bool:
        return not self.text.strip() or self.text.strip() == NO_HIGHLIGHTS


@dataclass
class Cluster:
    id: str
    label: str
    members: list[str] = field(default_factory=list)


@dataclass
class Refinement:
    themes: str
    enriched: str
    summary: str
    included: list[str]
    enrichment: str  # "skipped", "nochange" or "applied"
    flags: list[str] = field(default_factory=list)


@dataclass
class MetaReport:
    cluster: str
    label: str
    subject: str
    category: str
    overview: dict[str, Any]
    themes: list[dict[str, str]]
    implications: list[dict[str, str]]
    recommendations: list[dict[str, str]]
    metrics: list[dict[str, str]]
    member_reports: list[str]
    summary: str = ""
    enrichment: str = ""
    enriched_with: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetaReport":
        return cls(**d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetaReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Pure helpers
# ---------------------------------------------------------------------------


def token_count(text: str, factor: float = 1.0) -> int:
    """Whitespace tokens scaled by ``factor``, rounded up."""
    return math.ceil(len(text.split()) * factor)


def greedy_select(lengths: dict[str, int], budget: int) -> list[str]:
    """Shortest-first prefix of documents whose cumulative length fits ``budget``."""
    chosen, used = [], 0
    for doc, n in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        if used + n > budget:
            break
        chosen.append(doc)
        used += n
    return chosen


def within(words: int, lo: int, hi: int, slack: float) -> bool:
    return lo * (1 - slack) <= words <= hi * (1 + slack)


def report_keys(text: str) -> list[int]:
    return [int(x) for x in REPORT_KEY.findall(text)]


def _pmap(fn: Callable[[Any], T], items: Sequence[Any], workers: int) -> list[T]:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _strings(v: Any) -> list[str]:
    if isinstance(v, str):
        return [v]
    if isinstance(v, list):
        return [s for x in v for s in _strings(x)]
    if isinstance(v, dict):
        return [s for x in v.values() for s in _strings(x)]
    return []


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


class MetaReporter:
    def __init__(self, backends: Backends, config: Optional[MetaConfig] = None):
        self.backends = backends
        self.config = config or MetaConfig()

    # -- bounded free text ------------------------------------------------------

    def _bounded(self, role: str, system: str, prompt: str, lo: int, hi: int,
                 flags: list[str], allow: Optional[str] = None) -> str:
        """Free text within [lo, hi] words (with slack); accepted with a flag after retries."""
        last: dict[str, str] = {}

        def parse(text: str) -> str:
            text = text.strip()
            last["text"] = text
            if allow and allow in text:
                return allow
            n = len(text.split())
            if not within(n, lo, hi, self.config.word_slack):
                raise FormatError(f"write {lo} to {hi} words; you wrote {n}")
            return text

        try:
            return ask(self.backends.model, ModelRequest(role, system, user(prompt)), parse, self.config.retries)
        except FormatError as exc:
            flags.append(f"{role}: {exc}")
            logger.warning("%s accepted out of bounds: %s", role, exc)
            return last.get("text", "")

    def _json(self, role: str, system: str, prompt: str, check: Callable[[Any], T],
              history: Optional[list[Message]] = None) -> T:
        msgs = list(history or []) + user(prompt)
        return ask(self.backends.model, ModelRequest(role, system, msgs), lambda t: check(extract_json(t)),
                   self.config.retries)

    # -- personas / highlights ----------------------------------------------------

    def derive_personas(self, samples: Sequence[Report], goal: str, flags: Optional[list[str]] = None) -> PersonaPair:
        if not samples:
            raise ValueError("need at least one sample report to derive personas")
        flags = flags if flags is not None else []
        digest = "\n\n".join(f"- {r.title}: {r.summary}" for r in samples)
        ctx = f"GOAL: {goal}\nSAMPLE REPORTS:\n{digest}"
        highlighter = self._bounded(
            "meta.persona",
            "Describe, in 200 to 400 words, a reviewer who reads reports on behalf of a busy senior "
            "decision-maker in this area. The reviewer keeps only strategically important, new, actionable "
            "or turning-point findings, quotes evidence exactly, and ignores everything else.",
            ctx, 200, 400, flags)
        audience = self._bounded(
            "meta.audience",
            "Profile, in 150 to 300 words, the senior reader these reports serve: their role, "
            "responsibilities and worries, the decisions and time horizons they face, how they like "
            "information delivered and how expert they are.",
            ctx, 150, 300, flags)
        if not highlighter.strip() or not audience.strip():
            raise FormatError("persona derivation returned empty text")
        return PersonaPair(highlighter, audience)

    def _report_text(self, report: Report) -> str:
        text = render_markdown(report)
        cap = self.config.report_chars
        if len(text) <= cap:
            return text
        # keep the head and the tail of long reports
        return text[: cap // 2] + "\n[...]\n" + text[-cap // 2:]

    def extract_highlight(self, rid: str, report: Report, persona: PersonaPair) -> Highlight:
        system = (
            f"{persona.highlighter}\n\nPull out only the passages of this report that matter strategically, "
            "are new or mark a turning point, can be acted on, or bear on a decision. Give them as exact "
            f"quotes or short bullets. If nothing qualifies, reply exactly: {NO_HIGHLIGHTS}"
        )
        text = self.backends.model.complete(ModelRequest("meta.highlight", system, user(self._report_text(report))))
        text = text.strip()
        if NO_HIGHLIGHTS in text and len(text) <= len(NO_HIGHLIGHTS) + 20:
            text = NO_HIGHLIGHTS
        return Highlight(rid, text)

    # -- entities / clusters --------------------------------------------------------

    def extract_entities(self, highlight: Highlight) -> list[dict[str, str]]:
        if highlight.empty:
            return []

        def check(v: Any) -> list[dict[str, str]]:
            ents = v.get("entities") if isinstance(v, dict) else None
            if not isinstance(ents, list):
                raise FormatError('expected {"entities": [{"name": str, "type": str}]}')
            out, seen = [], set()
            for e in ents:
                if not isinstance(e, dict) or not str(e.get("name", "")).strip():
                    raise FormatError("every entity needs a name")
                item = {"name": str(e["name"]).strip(), "type": str(e.get("type", "")).strip().lower()}
                key = (item["name"].casefold(), item["type"])
                if key not in seen:
                    seen.add(key)
                    out.append(item)
            return out

        return self._json(
            "meta.entities",
            "List the key people, organisations, topics, events and places in the highlights. "
            'Reply with JSON {"entities": [{"name": str, "type": str}]}',
            highlight.text, check)

    def detect_clusters(self, entities: dict[str, list[dict[str, str]]]) -> list[Cluster]:
        if self.config.manual_clusters:
            return [Cluster(str(i), label) for i, label in self.config.manual_clusters.items()]
        k = self.config.k
        summary = "\n".join(f"{rid}: " + "; ".join(f"{e['name']} ({e['type']})" for e in ents)
                            for rid, ents in entities.items() if ents)
        seeds = ""
        if self.config.seed_keywords:
            seeds = "Use these keywords as anchors where they fit: " + ", ".join(self.config.seed_keywords) + "\n"

        def check(v: Any) -> list[Cluster]:
            cl = v.get("clusters") if isinstance(v, dict) else None
            if not isinstance(cl, dict) or not cl:
                raise FormatError('expected {"clusters": {"1": "description", ...}}')
            if len(cl) > k:
                raise FormatError(f"give at most {k} clusters")
            if any(not str(d).strip() for d in cl.values()):
                raise FormatError("every cluster needs a description")
            return [Cluster(str(i), str(d).strip()) for i, d in cl.items()]

        return self._json(
            "meta.clusters",
            f"Group the documents below into {k} distinct themes, judged by meaning rather than shared words. "
            "Describe each theme in a specific sentence or two instead of listing entities.\n" + seeds +
            'Reply with JSON {"clusters": {"1": "description", "2": "description"}}',
            f"ENTITIES BY DOCUMENT:\n{summary}", check)

    def assign(self, highlight: Highlight, clusters: Sequence[Cluster]) -> list[str]:
        ids = [c.id for c in clusters]
        defs = "\n".join(f"{c.id}: {c.label}" for c in clusters)

        def check(v: Any) -> list[str]:
            got = v.get("cluster_ids") if isinstance(v, dict) else None
            if not isinstance(got, list):
                raise FormatError('expected {"cluster_ids": [str, ...]}')
            got = [str(x).strip() for x in got]
            bad = [x for x in got if x not in ids]
            if bad:
                raise FormatError(f"unknown cluster ids {bad}; choose from {ids}")
            return sorted(set(got), key=ids.index)

        return self._json(
            "meta.assign",
            "Assign the document to every cluster its highlights belong to, or to none.\n"
            f"CLUSTERS:\n{defs}\n" + 'Reply with JSON {"cluster_ids": ["1", "3"]}',
            highlight.text, check)

    # -- refinement -------------------------------------------------------------

    def refine(self, highlights: Sequence[Highlight], reports: dict[str, Report], persona: PersonaPair) -> Refinement:
        flags: list[str] = []
        joined = "\n\n".join(f"[{h.report}]\n{h.text}" for h in highlights)
        themes = self._bounded(
            "meta.themes",
            f"READER:\n{persona.audience}\n\nWrite a 500 to 1000 word analysis for this reader of the main "
            "themes, what they mean strategically and the patterns running through the highlights.",
            joined, 500, 1000, flags)
        texts = {h.report: render_markdown(reports[h.report]) for h in highlights}
        lengths = {rid: token_count(t, self.config.token_factor) for rid, t in texts.items()}
        included = greedy_select(lengths, self.config.token_budget)
        enriched, status = themes, "skipped"
        if included:
            docs = "\n\n".join(f"=== {rid} ===\n{texts[rid]}" for rid in included)
            out = self._bounded(
                "meta.enrich",
                "Deepen the analysis with evidence, examples, figures and context from the full documents. "
                f"If it needs nothing, reply {NOCHANGE}. Otherwise return the enriched analysis in 600 to "
                "1200 words.",
                f"ANALYSIS:\n{themes}\n\nDOCUMENTS:\n{docs}", 600, 1200, flags, allow=NOCHANGE)
            if out == NOCHANGE:
                status = "nochange"
            else:
                enriched, status = out, "applied"
        summary = self._bounded(
            "meta.condense",
            f"READER:\n{persona.audience}\n\nCondense the analysis into 300 to 500 plain words for this reader, "
            "keeping the most critical, actionable findings and their strategic meaning.",
            enriched, 300, 500, flags)
        return Refinement(themes, enriched, summary, included, status, flags)

    # -- rendering ----------------------------------------------------------------

    def render(self, cluster: Cluster, refinement: Refinement, members: Sequence[str],
               persona: PersonaPair) -> MetaReport:
        n = len(members)
        index = "\n".join(f"[REPORT_{i}] = {rid}" for i, rid in enumerate(members, 1))
        system = (
            "You are writing a meta-report that synthesises several reports for a senior reader, one part at a "
            "time. Keep every part consistent with the parts already written. Cite source reports only as "
            f"[REPORT_X] using this index:\n{index}\nREADER:\n{persona.audience}"
        )
        history: list[Message] = [Message("user", f"CLUSTER: {cluster.label}\n\nANALYSIS:\n{refinement.summary}")]

        def cited_ok(value: Any, allow_citations: bool = True) -> None:
            keys = [k for s in _strings(value) for k in report_keys(s)]
            if keys and not allow_citations:
                raise FormatError("do not include citations here")
            bad = sorted({k for k in keys if not 1 <= k <= n})
            if bad:
                raise FormatError(f"unknown report keys {', '.join(f'[REPORT_{k}]' for k in bad)}; use 1 to {n}")

        def step(role: str, prompt: str, check: Callable[[Any], T]) -> T:
            result = self._json(role, system, prompt, check, history)
            history.extend([Message("user", prompt), Message("assistant", json.dumps(result, ensure_ascii=False))])
            return result

        def subject_check(v: Any) -> str:
            s = str(v.get("subject", "")).strip() if isinstance(v, dict) else ""
            if not within(len(s.split()), 10, 15, self.config.word_slack):
                raise FormatError("the subject must be a 10 to 15 word line")
            cited_ok(s, allow_citations=False)
            return s

        def category_check(v: Any) -> str:
            c = str(v.get("category", "")).strip() if isinstance(v, dict) else ""
            if not c:
                raise FormatError('expected {"category": str}')
            cited_ok(c, allow_citations=False)
            return c

        def overview_check(v: Any) -> dict[str, Any]:
            if not isinstance(v, dict):
                raise FormatError('expected {"intro": str, "areas": [...], "conclusion": str}')
            intro = str(v.get("intro", v.get("introduction", ""))).strip()
            areas = v.get("areas", v.get("major_areas"))
            concl = str(v.get("conclusion", "")).strip()
            if not intro or not concl or not isinstance(areas, list) or not 3 <= len(areas) <= 5:
                raise FormatError("need an intro, a conclusion and 3 to 5 areas")
            for a in areas:
                if not isinstance(a, dict) or not str(a.get("theme", "")).strip():
                    raise FormatError("every area needs a theme")
            out = {"intro": intro, "areas": areas, "conclusion": concl}
            cited_ok(out)
            return out

        def records(name: str, keys: tuple[str, ...]) -> Callable[[Any], list[dict[str, str]]]:
            def check(v: Any) -> list[dict[str, str]]:
                items = v.get(name) if isinstance(v, dict) else None
                if not isinstance(items, list) or not items:
                    raise FormatError(f'expected {{"{name}": [...]}} with at least one entry')
                out = []
                for it in items:
                    if not isinstance(it, dict) or any(k not in it for k in keys):
                        raise FormatError(f"each {name} entry needs {', '.join(keys)}")
                    out.append({k: str(it[k]).strip() for k in keys})
                cited_ok(out)
                return out
            return check

        subject = step("meta.subject", "Write a 10 to 15 word title line naming the theme and saying it draws "
                       'on several reports. No citations. JSON {"subject": str}', subject_check)
        category = step("meta.category", "Name one primary category for this analysis (for example Economy, "
                        'Energy, Technology or Geopolitics). No citations. JSON {"category": str}', category_check)
        overview = step("meta.overview", "Write the executive overview: an opening, 3 to 5 major areas each with "
                        "theme, implications and immediate actions, and a conclusion. JSON "
                        '{"intro": str, "areas": [{"theme", "implications", "actions"}], "conclusion": str}',
                        overview_check)
        themes = step("meta.core_themes", "List the core themes behind this narrative with a short description "
                      'and the reports behind each. JSON {"themes": [{"theme", "description", "related_reports"}]}',
                      records("themes", ("theme", "description", "related_reports")))
        implications = step("meta.implications", "For each major area give the strategic opportunities and risks. "
                            'JSON {"implications": [{"area", "strategic implications"}]}',
                            records("implications", ("area", "strategic implications")))
        recs = step("meta.recommendations", "Give concrete recommendations. JSON {\"recommendations\": [{\"title\", "
                    '"opportunity", "risk", "action", "rationale", "priority"}]}',
                    records("recommendations", ("title", "opportunity", "risk", "action", "rationale", "priority")))
        metrics = step("meta.metrics", "List metrics to monitor progress and early warnings, with a baseline if "
                       'known. JSON {"metrics": [{"metric_name", "baseline", "target"}]}',
                       records("metrics", ("metric_name", "baseline", "target")))
        return MetaReport(cluster.id, cluster.label, subject, category, overview, themes, implications, recs,
                          metrics, list(members), refinement.summary, refinement.enrichment,
                          refinement.included, list(refinement.flags))

    # -- whole run ----------------------------------------------------------------

    def run(self, reports: dict[str, Report], goal: str) -> tuple[list[MetaReport], dict[str, Any]]:
        """Meta-reports for every non-empty cluster plus a log of intermediate results."""
        if not reports:
            raise ValueError("no reports to synthesise")
        ids = sorted(reports)
        workers = self.backends.max_workers
        flags: list[str] = []
        persona = self.derive_personas([reports[i] for i in ids[: self.config.sample_size]], goal, flags)
        highlights = _pmap(lambda rid: self.extract_highlight(rid, reports[rid], persona), ids, workers)
        usable = [h for h in highlights if not h.empty]
        entity_lists = _pmap(self.extract_entities, usable, workers)
        entities = {h.report: e for h, e in zip(usable, entity_lists)}
        clusters = self.detect_clusters(entities) if usable else []
        assignments = _pmap(lambda h: self.assign(h, clusters), usable, workers) if clusters else []
        for h, cids in zip(usable, assignments):
            for c in clusters:
                if c.id in cids:
                    c.members.append(h.report)
        live = [c for c in clusters if c.members]
        by_id = {h.report: h for h in usable}

        def build(c: Cluster) -> MetaReport:
            ref = self.refine([by_id[m] for m in c.members], reports, persona)
            return self.render(c, ref, c.members, persona)

        metas = _pmap(build, live, workers)
        log = {
            "persona": asdict(persona),
            "persona_flags": flags,
            "highlights": {h.report: h.text for h in highlights},
            "entities": entities,
            "clusters": [asdict(c) for c in clusters],
            "dropped": [h.report for h, cids in zip(usable, assignments) if not cids],
            "pruned": [c.id for c in clusters if not c.members],
        }
        return metas, log


def render_meta_markdown(m: MetaReport) -> str:
    lines = [f"# {m.subject}", "", f"*Category: {m.category}*", "", "## Executive overview", "", m.overview["intro"], ""]
    for a in m.overview["areas"]:
        lines.append(f"- **{a.get('theme', '')}**: {a.get('implications', '')} {a.get('actions', '')}".rstrip())
    lines += ["", m.overview["conclusion"], "", "## Core themes", ""]
    lines += [f"- **{t['theme']}**: {t['description']} {t['related_reports']}".rstrip() for t in m.themes]
    lines += ["", "## Strategic implications", ""]
    lines += [f"- **{i['area']}**: {i['strategic implications']}" for i in m.implications]
    lines += ["", "## Recommendations", ""]
    lines += [f"- **{r['title']}** ({r['priority']}): {r['action']} Opportunity: {r['opportunity']} "
              f"Risk: {r['risk']} Why: {r['rationale']}" for r in m.recommendations]
    lines += ["", "## Metrics to monitor", "", "| Metric | Baseline | Target |", "|---|---|---|"]
    lines += [f"| {x['metric_name']} | {x['baseline']} | {x['target']} |" for x in m.metrics]
    lines += ["", "## Sources", ""] + [f"- [REPORT_{i}] {rid}" for i, rid in enumerate(m.member_reports, 1)]
    return "\n".join(lines) + "\n"
