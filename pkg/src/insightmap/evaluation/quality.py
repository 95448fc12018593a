"""Attribute-based section quality judged against a fixed inventory."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from ..backends import Backends, FormatError, ModelRequest, ask_json, user
from ..report import Report, Section, render_markdown, render_section

logger = logging.getLogger(__name__)

DIMENSIONS = ("analytical", "originality", "coverage", "actionability", "presentation")
CLASS_SCORES = {"VeryGood": 2, "Good": 1, "Bad": -1, "VeryBad": -2}


@dataclass(frozen=True)
class Attribute:
    id: str
    dimension: str
    keyphrase: str
    cls: str

    @property
    def score(self) -> int:
        return CLASS_SCORES[self.cls]


# Three keyphrases per class, listed VeryGood, Good, Bad, VeryBad.
_PHRASES: dict[str, list[str]] = {
    "analytical": [
        "Demonstrates a clear and logical causal chain.",
        "Defines limitations and boundary conditions explicitly.",
        "Provides strong and comprehensive citation coverage.",
        "Shows mostly sound reasoning throughout.",
        "Briefly acknowledges limitations.",
        "Supports most claims with evidence.",
        "Contains noticeable reasoning gaps.",
        "Leaves key assumptions implicit.",
        "Presents findings as established facts without justification.",
        "Displays major reasoning gaps.",
        "Fails to discuss limitations.",
        "Makes unsupported quantitative claims.",
    ],
    "originality": [
        "Offers a distinctive and imaginative perspective.",
        "Presents clearly non-obvious ideas.",
        "Demonstrates strong creative reframing.",
        "Provides a fresh and engaging perspective.",
        "Introduces somewhat original ideas.",
        "Incorporates novel framing.",
        "Shows only minor originality.",
        "Presents fairly conventional ideas.",
        "Includes minor hints of newness.",
        "Entirely unoriginal or derivative.",
        "Offers nothing truly surprising.",
        "Delivers already familiar insights.",
    ],
    "coverage": [
        "Provides broad, multi-angle coverage.",
        "Thoroughly explores the central hypothesis.",
        "Aligns strongly with the topic and stated goal.",
        "Covers most of the relevant dimensions.",
        "Delivers strong topic coverage.",
        "Presents generally relevant and focused content.",
        "Exhibits noticeable gaps in coverage.",
        "Includes minor irrelevant details.",
        "Leaves several dimensions under-explored.",
        "Omits major dimensions of the topic.",
        "Provides narrow or overly selective coverage.",
        "Contains largely off-topic discussions.",
    ],
    "actionability": [
        "Offers directly implementable recommendations.",
        "Clearly advances the user's goal.",
        "Demonstrates high practical relevance for the target audience.",
        "Provides actionable and practical insights.",
        "Moderately supports goal achievement.",
        "Gives clear direction with limited operational detail.",
        "Contains vague or weakly actionable suggestions.",
        "Provides minimal operational guidance.",
        "Suggests sound but incremental actions.",
        "Lacks a clear path to implementation.",
        "Fails to meaningfully advance goals.",
        "Remains entirely theoretical or descriptive.",
    ],
    "presentation": [
        "Maintains an engaging and professional tone.",
        "Features a clear and well-structured structure.",
        "Uses highly readable and professional language.",
        "Adopts a generally engaging tone.",
        "Demonstrates mostly well-structured organization.",
        "Communicates clearly and effectively.",
        "Shows uneven tone or inconsistent style.",
        "Contains somewhat disjointed sections.",
        "Occasionally confusing in expression.",
        "Exhibits a flat or disengaging tone.",
        "Displays poor overall structure.",
        "Is difficult to read or follow.",
    ],
}

INVENTORY: tuple[Attribute, ...] = tuple(
    Attribute(f"{dim[:2].upper()}{i + 1}", dim, phrase, list(CLASS_SCORES)[i // 3])
    for dim in DIMENSIONS
    for i, phrase in enumerate(_PHRASES[dim])
)
BY_ID = {a.id: a for a in INVENTORY}

# With three attributes per class the raw sum spans [-9, 9].
RAW_MIN, RAW_MAX = -9, 9


def normalize(raw: float) -> float:
    return (raw - RAW_MIN) / (RAW_MAX - RAW_MIN) * 100.0


def dimension_scores(activated: Sequence[str]) -> dict[str, float]:
    """Normalized 0-100 score per dimension from the activated attribute ids."""
    raw = {d: 0 for d in DIMENSIONS}
    for aid in set(activated):
        a = BY_ID[aid]
        raw[a.dimension] += a.score
    return {d: normalize(raw[d]) for d in DIMENSIONS}


def overall(per_dimension: dict[str, float]) -> float:
    return sum(per_dimension[d] for d in DIMENSIONS) / len(DIMENSIONS)


def parse_activations(value: Any) -> list[str]:
    """``{"<id>": {"score": 0|1, "reasoning": str}, ...}``; omitted ids count as 0."""
    if isinstance(value, dict) and isinstance(value.get("attributes"), dict):
        value = value["attributes"]
    if not isinstance(value, dict):
        raise FormatError("expected a JSON object keyed by attribute id")
    unknown = [k for k in value if k not in BY_ID]
    if unknown:
        raise FormatError(f"unknown attribute ids: {', '.join(sorted(unknown)[:5])}")
    active = []
    for aid, entry in value.items():
        score = entry.get("score") if isinstance(entry, dict) else entry
        if str(score).strip() not in ("0", "1"):
            raise FormatError(f'attribute {aid} needs "score" 0 or 1')
        if str(score).strip() == "1":
            active.append(aid)
    missing = len(BY_ID) - len(value)
    if missing:
        logger.info("quality judge omitted %d attributes; counted as not shown", missing)
    return sorted(active, key=lambda a: list(BY_ID).index(a))


def _inventory_text() -> str:
    lines = []
    for dim in DIMENSIONS:
        lines.append(f"{dim.upper()}:")
        lines += [f"  {a.id}: {a.keyphrase}" for a in INVENTORY if a.dimension == dim]
    return "\n".join(lines)


_SYSTEM = (
    "You grade one marked section of a research report. The full report is given first for context only: "
    "a section that builds on or points to other sections is not at fault for that. If the marked copy and "
    "the report disagree, grade the marked copy. For every trait below answer 1 only if the marked section "
    "clearly shows it, otherwise 0, with one or two sentences of reasons.\n"
    'Reply with one JSON object: {"<trait id>": {"score": 0|1, "reasoning": str}, ...}\n'
    "TRAITS:\n" + _inventory_text()
)


class QualityJudge:
    def __init__(self, backends: Backends, retries: int = 3):
        self.backends = backends
        self.retries = retries

    def judge_section(self, report: Report, section: Section, goal: str) -> list[str]:
        prompt = (f"GOAL: {goal}\n\n## COMPLETE REPORT\n{render_markdown(report)}\n\n"
                  f"## SECTION TO EVALUATE (MARKED)\n{render_section(section)}")
        req = ModelRequest("eval.quality", _SYSTEM, user(prompt))
        return ask_json(self.backends.model, req, parse_activations, self.retries)

    def evaluate(self, report: Report, goal: str) -> dict:
        def one(sec: Section) -> list[str]:
            return self.judge_section(report, sec, goal)

        if self.backends.max_workers > 1:
            with ThreadPoolExecutor(self.backends.max_workers) as pool:
                activations = list(pool.map(one, report.sections))
        else:
            activations = [one(s) for s in report.sections]
        per_section = [dimension_scores(a) for a in activations]
        per_dim = report_dimensions(per_section)
        return {
            "per_dimension": per_dim,
            "overall": overall(per_dim) if per_dim else None,
            "per_section": [{"dimensions": d, "overall": overall(d)} for d in per_section],
            "activations": activations,
        }


def report_dimensions(per_section: Sequence[dict[str, float]]) -> Optional[dict[str, float]]:
    """Section mean per dimension."""
    if not per_section:
        return None
    return {d: sum(s[d] for s in per_section) / len(per_section) for d in DIMENSIONS}
