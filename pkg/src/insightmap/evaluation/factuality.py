"""Claim-level factuality: extract claims, judge each against its cited sources."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Sequence

from ..backends import Backends, FormatError, ModelRequest, ask_json, user
from ..citations import CitationDB
from ..report import Report, Section, render_section

logger = logging.getLogger(__name__)

CLAIM_TYPES = ("statistic", "date", "event", "person", "organization", "location", "other")
SOURCE_CHARS = 6000


class Verdict(str, Enum):
    SUPPORTED = "SUPPORTED"
    PARTIAL = "PARTIAL"
    UNCITED = "UNCITED"
    UNVERIFIABLE = "UNVERIFIABLE"
    UNSUPPORTED = "UNSUPPORTED"


SCORES: dict[Verdict, float] = {
    Verdict.SUPPORTED: 1.0,
    Verdict.PARTIAL: 0.5,
    Verdict.UNCITED: 0.3,
    Verdict.UNVERIFIABLE: 0.25,
    Verdict.UNSUPPORTED: 0.0,
}


@dataclass
class Claim:
    text: str
    entities: list[str] = field(default_factory=list)
    citations: list[str] = field(default_factory=list)
    claim_type: str = "other"


@dataclass
class Judgement:
    key: str
    score: int
    support: str


def claim_verdict(scores: Sequence[int], has_citations: bool) -> Verdict:
    """Verdict from the pairwise judge scores over the retrievable cited sources.

    ``scores`` is empty when no cited source could be retrieved.
    """
    if not has_citations:
        return Verdict.UNCITED
    if not scores:
        return Verdict.UNVERIFIABLE
    best = max(scores)
    if best == 1:
        return Verdict.SUPPORTED
    if best == 0:
        return Verdict.PARTIAL
    return Verdict.UNSUPPORTED


def f_section(verdicts: Sequence[Verdict]) -> Optional[float]:
    if not verdicts:
        return None
    return sum(SCORES[v] for v in verdicts) / len(verdicts)


def f_report(per_section: Sequence[Sequence[Verdict]]) -> Optional[float]:
    total = sum(len(v) for v in per_section)
    if total == 0:
        return None
    return sum(f_section(v) * len(v) for v in per_section if v) / total


def parse_claims(value: Any) -> list[Claim]:
    if isinstance(value, dict) and isinstance(value.get("claims"), list):
        value = value["claims"]
    if not isinstance(value, list):
        raise FormatError("expected a JSON array of claims")
    out = []
    for item in value:
        if not isinstance(item, dict) or not str(item.get("claim_text", "")).strip():
            raise FormatError('every claim needs a non-empty "claim_text"')
        cites = item.get("citations", [])
        ents = item.get("verifiable_entities", [])
        if not isinstance(cites, list) or not isinstance(ents, list):
            raise FormatError('"citations" and "verifiable_entities" must be arrays')
        ctype = str(item.get("claim_type", "other")).strip().lower()
        out.append(Claim(str(item["claim_text"]).strip(), [str(e) for e in ents],
                         list(dict.fromkeys(str(c).strip().strip("[]") for c in cites if str(c).strip())),
                         ctype if ctype in CLAIM_TYPES else "other"))
    return out


def parse_judgement(value: Any) -> tuple[int, str]:
    if not isinstance(value, dict) or "is_factual" not in value:
        raise FormatError('expected {"is_factual": -1|0|1, "sentence_support": str}')
    try:
        score = int(str(value["is_factual"]).strip())
    except ValueError as exc:
        raise FormatError("is_factual must be -1, 0 or 1") from exc
    if score not in (-1, 0, 1):
        raise FormatError("is_factual must be -1, 0 or 1")
    return score, str(value.get("sentence_support", ""))


_CLAIMS_SYSTEM = (
    "List every specific, checkable factual claim in the section: figures, dates, named events, people, "
    "organisations and places. Skip opinions, recommendations and general statements. For each claim give "
    "the sentence or phrase, the entities a checker would look up, its citation keys without brackets, and "
    "its type (" + "|".join(CLAIM_TYPES) + ").\n"
    'Reply with a JSON array of {"claim_text", "verifiable_entities", "citations", "claim_type"}, or [] if '
    "there are none."
)

_JUDGE_SYSTEM = (
    "Decide whether the source text backs the statement. Check every figure, date, name and other detail "
    "in the statement against the source, allowing sensible inference across several source passages. "
    "Score 1 if the source fully backs it, 0 if the source is related but incomplete or ambiguous, and -1 "
    "if the source says nothing relevant or contradicts it.\n"
    'Reply with JSON {"is_factual": -1|0|1, "sentence_support": "<source sentences that back it>"}'
)


class FactualityJudge:
    def __init__(self, backends: Backends, citations: CitationDB, retries: int = 3):
        self.backends = backends
        self.citations = citations
        self.retries = retries

    def extract_claims(self, section: Section) -> list[Claim]:
        body = render_section(section)
        req = ModelRequest("eval.claims", _CLAIMS_SYSTEM, user(body))
        return ask_json(self.backends.model, req, parse_claims, self.retries)

    def judge(self, claim: Claim, key: str) -> Optional[Judgement]:
        """Score one claim/source pair; None when the source has no content."""
        if key not in self.citations or not self.citations.resolve(key).available:
            return None
        content = self.citations.resolve(key).content.strip()
        if not content:
            return None
        prompt = f"STATEMENT: {claim.text}\n\nSOURCE:\n{content[:SOURCE_CHARS]}"
        req = ModelRequest("eval.judge", _JUDGE_SYSTEM, user(prompt))
        score, support = ask_json(self.backends.model, req, parse_judgement, self.retries)
        return Judgement(key, score, support)

    def evaluate_section(self, section: Section) -> list[dict]:
        rows = []
        for claim in self.extract_claims(section):
            judged = [j for j in (self.judge(claim, k) for k in claim.citations) if j is not None]
            verdict = claim_verdict([j.score for j in judged], bool(claim.citations))
            rows.append({"claim": claim.text, "type": claim.claim_type, "citations": claim.citations,
                         "scores": {j.key: j.score for j in judged}, "verdict": verdict.value})
        return rows

    def evaluate(self, report: Report) -> dict:
        workers = max(1, self.backends.max_workers)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                per_section = list(pool.map(self.evaluate_section, report.sections))
        else:
            per_section = [self.evaluate_section(s) for s in report.sections]
        verdicts = [[Verdict(r["verdict"]) for r in rows] for rows in per_section]
        return {
            "score": f_report(verdicts),
            "per_section": [f_section(v) for v in verdicts],
            "verdicts": {v.value: sum(row.count(v) for row in verdicts) for v in Verdict},
            "claims": [{"section": i, **r} for i, rows in enumerate(per_section) for r in rows],
        }

