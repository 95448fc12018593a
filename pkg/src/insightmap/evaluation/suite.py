"""One-call evaluation of a finished report."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from ..backends import Backends
from ..citations import CitationDB
from ..report import Report
from .distinctness import DEFAULT_K, DistinctnessJudge
from .factuality import FactualityJudge
from .grounding import grounding_summary
from .quality import QualityJudge

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    k: int = DEFAULT_K
    seed: int = 0
    retries: int = 3

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        return cls(k=int(data.get("K", data.get("k", DEFAULT_K))), seed=int(data.get("seed", 0)),
                   retries=int(data.get("retries", 3)))


def _pct(x: Optional[float]) -> Optional[float]:
    return None if x is None else 100.0 * x


def evaluate_report(report: Report, citations: CitationDB, backends: Backends, goal: str,
                    explorer_history: str = "", config: Optional[EvalConfig] = None) -> dict:
    """All four report metrics; the report itself is never modified."""
    cfg = config or EvalConfig()
    ng = grounding_summary(report, citations, explorer_history)
    fact = FactualityJudge(backends, citations, cfg.retries).evaluate(report)
    qual = QualityJudge(backends, cfg.retries).evaluate(report, goal)
    dist = DistinctnessJudge(backends, cfg.k, cfg.seed, cfg.retries).evaluate(report)
    return {
        "numeric_grounding": ng,
        "factuality": fact,
        "quality": qual,
        "distinctness": dist,
        "scaled": {
            "numeric_grounding": _pct(ng["score"]),
            "factuality": _pct(fact["score"]),
            "quality": qual["overall"],
            "distinctness": dist["rescaled"],
        },
    }
