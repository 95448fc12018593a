"""Pairwise section repetition judged on a 0-4 scale."""

from __future__ import annotations

import itertools
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from ..backends import Backends, FormatError, ModelRequest, ask_json, user
from ..report import Report, Section, render_section

MIN_CHARS = 200
MAX_URL_SHARE = 0.30
DEFAULT_K = 30
LOW_SCORE = 1

_CLOSING_TITLE = re.compile(
    r"\b(conclusions?|concluding|key takeaways?|takeaways?|final thoughts|closing remarks|wrap[- ]up|"
    r"executive summary|summary)\b", re.I)
_URL = re.compile(r"^(?:\(?<?)(?:https?://|www\.)\S+$", re.I)


@dataclass
class PairScore:
    i: int
    j: int
    score: int
    explanation: str = ""
    repetitions: tuple[str, ...] = ()
    confidence: Optional[float] = None


def section_body(section: Section) -> str:
    text = render_section(section)
    return text.split("\n", 1)[1].strip() if "\n" in text else ""


def url_share(text: str) -> float:
    words = text.split()
    if not words:
        return 0.0
    return sum(1 for w in words if _URL.match(w.strip(".,;)>]"))) / len(words)


def keep_section(section: Section) -> bool:
    if _CLOSING_TITLE.search(section.title):
        return False
    body = section_body(section)
    return len(body) >= MIN_CHARS and url_share(body) <= MAX_URL_SHARE


def filter_sections(report: Report) -> list[int]:
    """Indices of body sections eligible for comparison.

    The title and executive summary live outside ``report.sections`` and are
    never candidates.
    """
    return [i for i, s in enumerate(report.sections) if keep_section(s)]


def sample_pairs(n: int, k: int = DEFAULT_K, seed: int = 0) -> list[tuple[int, int]]:
    """All pairs when there are at most ``k``, else ``k`` drawn without replacement."""
    pairs = list(itertools.combinations(range(n), 2))
    if len(pairs) <= k:
        return pairs
    return sorted(random.Random(seed).sample(pairs, k))


def summarize(scores: Sequence[PairScore]) -> dict:
    if not scores:
        return {"mean": None, "rescaled": None, "low_pairs": 0, "worst": None,
                "distribution": {str(v): 0 for v in range(5)}}
    values = [p.score for p in scores]
    mean = sum(values) / len(values)
    worst = min(scores, key=lambda p: (p.score, p.i, p.j))
    return {
        "mean": mean,
        "rescaled": 25.0 * mean,
        "low_pairs": sum(1 for v in values if v <= LOW_SCORE),
        "worst": {"pair": [worst.i, worst.j], "score": worst.score, "explanation": worst.explanation},
        "distribution": {str(v): values.count(v) for v in range(5)},
    }


def parse_pair(value: Any) -> tuple[int, str, tuple[str, ...], Optional[float]]:
    if not isinstance(value, dict) or "score" not in value:
        raise FormatError('expected {"score": 0-4, "explanation", "repetitions_found", "confidence"}')
    m = re.match(r"\s*(-?\d+(?:\.\d+)?)", str(value["score"]))
    if m is None or float(m.group(1)) not in (0, 1, 2, 3, 4):
        raise FormatError("score must be an integer from 0 to 4")
    reps = value.get("repetitions_found") or []
    if not isinstance(reps, list):
        raise FormatError('"repetitions_found" must be a list')
    conf = None
    c = re.match(r"\s*(\d+(?:\.\d+)?)", str(value.get("confidence", "")))
    if c:
        conf = float(c.group(1))
    return int(float(m.group(1))), str(value.get("explanation", "")), tuple(str(r) for r in reps), conf


_SYSTEM = (
    "Compare two sections of one report and rate how much information they repeat. Count restated "
    "facts, reused examples or quotes, and the same argument or conclusion in new words. Do not count "
    "shared topics with different content, one section extending the other, or the same example used "
    "for a different point. Judge only the given text.\n"
    "Scale: 4 no repetition; 3 one or two minor repeats; 2 several repeats that hurt reading; "
    "1 heavy repetition; 0 nearly everything repeated.\n"
    'Reply with JSON {"score": 0-4, "explanation": str, "repetitions_found": [str], "confidence": 0-1}'
)


class DistinctnessJudge:
    def __init__(self, backends: Backends, k: int = DEFAULT_K, seed: int = 0, retries: int = 3):
        self.backends = backends
        self.k = k
        self.seed = seed
        self.retries = retries

    def judge_pair(self, a: Section, b: Section) -> tuple[int, str, tuple[str, ...], Optional[float]]:
        prompt = f"SECTION A:\n{render_section(a)}\n\nSECTION B:\n{render_section(b)}"
        req = ModelRequest("eval.distinct", _SYSTEM, user(prompt))
        return ask_json(self.backends.model, req, parse_pair, self.retries)

    def evaluate(self, report: Report) -> dict:
        kept = filter_sections(report)
        pairs = [(kept[x], kept[y]) for x, y in sample_pairs(len(kept), self.k, self.seed)]

        def one(pair: tuple[int, int]) -> PairScore:
            score, why, reps, conf = self.judge_pair(report.sections[pair[0]], report.sections[pair[1]])
            return PairScore(pair[0], pair[1], score, why, reps, conf)

        if self.backends.max_workers > 1:
            with ThreadPoolExecutor(self.backends.max_workers) as pool:
                scores = list(pool.map(one, pairs))
        else:
            scores = [one(p) for p in pairs]
        out = summarize(scores)
        out["candidates"] = kept
        out["pairs"] = [{"pair": [p.i, p.j], "score": p.score} for p in scores]
        return out
