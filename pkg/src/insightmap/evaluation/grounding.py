"""Rule-based numeric grounding of report units against cited content."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from ..citations import CitationDB, keys_in, strip_citations
from ..report import Report, Section, section_units
from .numbers import NumericClaim, extract_numbers, found_in


class Tag(str, Enum):
    REF = "ref"
    SEC_REF = "sec_ref"
    REPORT_REF = "report_ref"
    PREV_SECTION = "prev_section"
    EXPLORER = "explorer"
    MISATTRIBUTED_SECTION = "misattributed_section"
    MISATTRIBUTED_REPORT = "misattributed_report"
    INCORRECT_REF = "incorrect_ref"
    NO_REF = "no_ref"
    UNVERIFIED = "unverified"


WEIGHTS: dict[Tag, float] = {
    Tag.REF: 1.0,
    Tag.SEC_REF: 0.8,
    Tag.REPORT_REF: 0.7,
    Tag.PREV_SECTION: 0.5,
    Tag.EXPLORER: 0.5,
    Tag.MISATTRIBUTED_SECTION: 0.4,
    Tag.MISATTRIBUTED_REPORT: 0.2,
    Tag.INCORRECT_REF: 0.0,
    Tag.NO_REF: 0.0,
    Tag.UNVERIFIED: 0.1,
}


@dataclass
class Unit:
    section: int
    kind: str
    text: str
    citations: list[str] = field(default_factory=list)


@dataclass
class ClaimTag:
    section: int
    unit: int
    raw: str
    tag: Tag


@dataclass
class _Source:
    """Cited content pre-split into numbers for repeated lookups."""

    text: str
    numbers: list[NumericClaim]


class Grounder:
    def __init__(self, citations: CitationDB, explorer_history: str = ""):
        self.citations = citations
        self.explorer = _Source(explorer_history, extract_numbers(explorer_history))
        self._cache: dict[str, _Source] = {}

    def retrievable(self, key: str) -> bool:
        return key in self.citations and self.citations.resolve(key).available

    def _source(self, key: str) -> Optional[_Source]:
        if key not in self.citations:
            return None
        if key not in self._cache:
            content = self.citations.resolve(key).content
            self._cache[key] = _Source(content, extract_numbers(content))
        return self._cache[key]

    def _in_keys(self, claim: NumericClaim, keys: Iterable[str]) -> bool:
        for k in keys:
            src = self._source(k)
            if src is not None and found_in(claim, src.text, src.numbers):
                return True
        return False

    def tag_claim(self, claim: NumericClaim, unit_keys: Sequence[str], section_keys: Sequence[str],
                  report_keys: Sequence[str], previous_text: str) -> Tag:
        cited = bool(unit_keys)
        if self._in_keys(claim, unit_keys):
            return Tag.REF
        if self._in_keys(claim, [k for k in section_keys if k not in unit_keys]):
            return Tag.MISATTRIBUTED_SECTION if cited else Tag.SEC_REF
        if self._in_keys(claim, [k for k in report_keys if k not in section_keys and k not in unit_keys]):
            return Tag.MISATTRIBUTED_REPORT if cited else Tag.REPORT_REF
        if previous_text and found_in(claim, previous_text):
            return Tag.PREV_SECTION
        if self.explorer.text and found_in(claim, self.explorer.text, self.explorer.numbers):
            return Tag.EXPLORER
        if not cited:
            return Tag.NO_REF
        if any(self.retrievable(k) for k in unit_keys):
            return Tag.INCORRECT_REF
        return Tag.UNVERIFIED

    def ground_report(self, report: Report) -> list[ClaimTag]:
        sections = report.sections
        report_keys = report.all_keys()
        tags: list[ClaimTag] = []
        previous: list[str] = []
        for si, sec in enumerate(sections):
            units = report_units(sec, si)
            section_keys = list(dict.fromkeys(k for u in units for k in u.citations))
            prev_text = "\n".join(previous)
            for ui, unit in enumerate(units):
                for claim in extract_numbers(strip_citations(unit.text)):
                    tag = self.tag_claim(claim, unit.citations, section_keys, report_keys, prev_text)
                    tags.append(ClaimTag(si, ui, claim.raw, tag))
            previous.append(strip_citations("\n".join(u.text for u in units)))
        return tags


def report_units(section: Section, index: int) -> list[Unit]:
    return [Unit(index, kind, text, keys_in(text)) for kind, text in section_units(section)]


def ng_section(tags: Sequence[Tag]) -> Optional[float]:
    """Mean tag weight; None for a section with no numeric claims."""
    if not tags:
        return None
    return sum(WEIGHTS[t] for t in tags) / len(tags)


def ng_report(per_section: Sequence[Sequence[Tag]]) -> Optional[float]:
    """Claim-count weighted mean of section scores; claimless sections carry no weight."""
    total = sum(len(t) for t in per_section)
    if total == 0:
        return None
    return sum(ng_section(t) * len(t) for t in per_section if t) / total


def grounding_summary(report: Report, citations: CitationDB, explorer_history: str = "") -> dict:
    claims = Grounder(citations, explorer_history).ground_report(report)
    per_section = [[c.tag for c in claims if c.section == i] for i in range(len(report.sections))]
    hist = Counter(c.tag.value for c in claims)
    return {
        "score": ng_report(per_section),
        "per_section": [ng_section(t) for t in per_section],
        "tags": {t.value: hist.get(t.value, 0) for t in Tag},
        "per_unit": [{"section": c.section, "unit": c.unit, "claim": c.raw, "tag": c.tag.value} for c in claims],
    }
