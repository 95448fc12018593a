"""Hypothesis batch generation and scoring.

A frontier node gets a batch of candidate hypotheses; each candidate is
scored for relevance and impact relative to the rest of the batch, and for
diversity against everything already explored on the map.  The overall
score is a fixed weighted sum of the three.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backends import Backends, FormatError, ModelRequest, ask, ask_json, extract_tag, user
from .map_model import ExplorationMap, NodeId, NodeKind, Origin, Scores, id_key

logger = logging.getLogger(__name__)


class ScoringError(FormatError):
    pass


@dataclass(frozen=True)
class Weights:
    relevance: float = 0.5
    impact: float = 0.2
    diversity: float = 0.3

    def __post_init__(self) -> None:
        total = self.relevance + self.impact + self.diversity
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")


@dataclass
class HypothesisConfig:
    weights: Weights = Weights()
    batch_size: int = 5
    diversity_scale: float = 10.0
    retries: int = 3
    background: str = ""
    search_seeds: bool = True


@dataclass
class Scorecard:
    hypothesis: str
    relevance: float
    impact: float
    diversity: float
    overall: float

    def as_scores(self) -> Scores:
        return Scores(self.relevance, self.impact, self.diversity, self.overall)


def overall(relevance: float, impact: float, diversity: float,
            weights: Weights = Weights()) -> float:
    return weights.relevance * relevance + weights.impact * impact + weights.diversity * diversity


def diversity_from_similarity(max_similarity: Optional[float], scale: float = 10.0) -> float:
    """Affine inverse of the maximum similarity, clipped to ``[0, scale]``."""
    if max_similarity is None:
        return scale
    return float(min(scale, max(0.0, scale * (1.0 - max_similarity))))


def score_diversity(vector: np.ndarray, explored: np.ndarray, scale: float = 10.0) -> float:
    """Diversity of one unit-norm embedding against explored embeddings."""
    if explored.size == 0:
        return scale
    sims = np.atleast_2d(explored) @ np.asarray(vector)
    return diversity_from_similarity(float(np.max(sims)), scale)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_NUM = re.compile(r"-?\d+(?:\.\d+)?")


def _parse_batch(value, size: int) -> list[str]:
    if not isinstance(value, dict) or not isinstance(value.get("hypothesis"), list):
        raise FormatError('expected {"hypothesis": [...]}')
    items = [str(h).strip() for h in value["hypothesis"]]
    if len(items) != size:
        raise FormatError(f"expected exactly {size} hypotheses, got {len(items)}")
    if any(not h for h in items):
        raise FormatError("empty hypothesis text")
    if len({h.casefold() for h in items}) != len(items):
        raise FormatError("hypotheses must be distinct")
    return items


def _parse_isolated(text: str) -> tuple[str, float]:
    reasoning = extract_tag(text, "HYPOTHESIS_RELEVANCE_REASONING", required=False) or ""
    raw = extract_tag(text, "HYPOTHESIS_RELEVANCE_SCORE")
    try:
        score = float(raw)
    except ValueError:
        raise FormatError(f"relevance score {raw!r} is not a number") from None
    if not 0.0 <= score <= 1.0:
        raise FormatError(f"isolated relevance {score} outside 0.0-1.0")
    return reasoning, score


def _relative_parser(tag: str, n: int):
    def parse(text: str) -> list[float]:
        block = extract_tag(text, tag)
        values = [float(x) for x in _NUM.findall(block)]
        if len(values) != n:
            raise ScoringError(f"expected {n} scores in <{tag}>, got {len(values)}")
        bad = [v for v in values if not 1.0 <= v <= 10.0]
        if bad:
            raise ScoringError(f"scores {bad} outside 1-10")
        if n >= 2 and (max(values) != 10.0 or min(values) != 1.0):
            raise ScoringError("the best hypothesis must get 10 and the worst must get 1")
        return values

    return parse


def _numbered(texts: Sequence[str]) -> str:
    return "\n".join(f"{i + 1}. {t}" for i, t in enumerate(texts))


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


class HypothesisEngine:
    def __init__(self, backends: Backends, config: Optional[HypothesisConfig] = None):
        self.backends = backends
        self.config = config or HypothesisConfig()

    # generation -------------------------------------------------------------

    def generate_batch(self, name_and_description: str, goal: str, background: str = "",
                       evidence: str = "") -> list[str]:
        n = self.config.batch_size
        system = (
            "You are a research lead proposing starting points for an investigation.\n"
            f"Goal: {goal}\nBackground: {background or self.config.background}\n"
            f"Propose {n} hypotheses about the topic below. They must differ clearly from "
            "each other and be worth investigating.\n"
            f'Answer with a fenced JSON object: {{"hypothesis": [{n} strings]}}.'
        )
        prompt = f"Topic or concept:\n{name_and_description}\n\nRecent evidence:\n{evidence or '(none)'}"
        req = ModelRequest("hypothesis.generate", system, user(prompt))
        return ask_json(self.backends.model, req, lambda v: _parse_batch(v, n), self.config.retries)

    # scoring ----------------------------------------------------------------

    def relevance_reasoning(self, hypothesis: str, goal: str, evidence: str) -> tuple[str, float]:
        system = (
            "Judge how relevant a hypothesis is to an investigation goal and how plausible it is "
            "given the search evidence. Reply with <HYPOTHESIS_RELEVANCE_REASONING>...</"
            "HYPOTHESIS_RELEVANCE_REASONING> then <HYPOTHESIS_RELEVANCE_SCORE>x</"
            "HYPOTHESIS_RELEVANCE_SCORE> with x between 0.0 and 1.0."
        )
        prompt = f"HYPOTHESIS: {hypothesis}\nGOAL: {goal}\nEVIDENCE: {evidence or '(none)'}"
        req = ModelRequest("hypothesis.relevance_isolated", system, user(prompt))
        return ask(self.backends.model, req, _parse_isolated, self.config.retries)

    def score_relevance(self, batch: Sequence[str], goal: str, evidence: str = "") -> list[float]:
        if not batch:
            raise ValueError("empty batch")
        notes = [self.relevance_reasoning(h, goal, evidence) for h in batch]
        listing = "\n".join(
            f"{i + 1}. {h}\n   isolated assessment ({s:.2f}): {r}"
            for i, (h, (r, s)) in enumerate(zip(batch, notes))
        )
        system = (
            "Grade the hypotheses relative to one another for relevance to the goal, on a 1-10 "
            "scale. The most relevant must receive 10 and the least relevant 1. Give reasoning in "
            "<HYPOTHESIS_RELEVANCE_REASONING> and one score per line, in input order, inside "
            "<HYPOTHESIS_RELEVANCE_SCORE>."
        )
        req = ModelRequest("hypothesis.relevance_relative", system,
                           user(f"HYPOTHESIS_LIST:\n{listing}\nGOAL: {goal}"))
        return ask(self.backends.model, req,
                   _relative_parser("HYPOTHESIS_RELEVANCE_SCORE", len(batch)), self.config.retries)

    def score_impact(self, batch: Sequence[str]) -> list[float]:
        if not batch:
            raise ValueError("empty batch")
        system = (
            "Grade the hypotheses relative to one another by how much it would matter if each "
            "turned out true (competitive, regulatory, financial, technological, human-capital, "
            "political, market effects). Use 1-10; the most impactful gets 10 and the least 1. "
            "Give reasoning in <HYPOTHESIS_IMPACT_REASONING> and one score per line, in input "
            "order, inside <HYPOTHESIS_IMPACT_SCORE>."
        )
        req = ModelRequest("hypothesis.impact", system, user(f"HYPOTHESIS_LIST:\n{_numbered(batch)}"))
        return ask(self.backends.model, req,
                   _relative_parser("HYPOTHESIS_IMPACT_SCORE", len(batch)), self.config.retries)

    def score_diversity(self, batch: Sequence[str], explored: Sequence[str]) -> list[float]:
        vecs = self.backends.embedder.embed(list(batch))
        prior = self.backends.embedder.embed(list(explored)) if explored else np.zeros((0, 0))
        return [score_diversity(v, prior, self.config.diversity_scale) for v in vecs]

    def score_batch(self, batch: Sequence[str], goal: str, evidence: str,
                    explored: Sequence[str]) -> list[Scorecard]:
        rel = self.score_relevance(batch, goal, evidence)
        imp = self.score_impact(batch)
        div = self.score_diversity(batch, explored)
        w = self.config.weights
        return [Scorecard(h, r, i, d, overall(r, i, d, w))
                for h, r, i, d in zip(batch, rel, imp, div)]

    # map integration --------------------------------------------------------

    def commit_batch(self, m: ExplorationMap, node: NodeId, cards: Sequence[Scorecard]) -> NodeId:
        """Attach every card under ``node`` and return the best one.

        Best = highest overall; ties go to the lexicographically smaller text.
        """
        if m.node(node).kind not in (NodeKind.TOPIC, NodeKind.CONCEPT):
            raise ValueError(f"node {node} is not a topic or concept")
        if not cards:
            raise ValueError("empty scorecard list")
        ids = [m.add_hypothesis(node, c.hypothesis, Origin.GENERATION_BATCH, c.as_scores())
               for c in cards]
        best = min(range(len(cards)), key=lambda i: (-cards[i].overall, cards[i].hypothesis))
        return ids[best]

    def seeds_for(self, m: ExplorationMap, node: NodeId) -> str:
        if not self.config.search_seeds:
            return ""
        path = " > ".join(m.node(n).name for n in m.path_to_root(node)[1:])
        results = self.backends.search.search(path)
        return "\n".join(f"[S{i + 1}] {r.title}: {r.snippet} ({r.url})"
                         for i, r in enumerate(results))

    def generate_for(self, m: ExplorationMap, node: NodeId) -> NodeId:
        """Generate, score and commit a batch at ``node``; returns the pick."""
        target = m.node(node)
        evidence = self.seeds_for(m, node)
        path = " > ".join(m.node(n).name for n in m.path_to_root(node)[1:])
        desc = f"{target.name} (path: {path})\n{target.description}"
        batch = self.generate_batch(desc, m.goal, self.config.background, evidence)
        explored = [h.text for h in m.hypotheses() if h.explored]
        cards = self.score_batch(batch, m.goal, evidence, explored)
        logger.info("scored batch at %s: %s", node,
                    json.dumps([round(c.overall, 3) for c in cards]))
        return self.commit_batch(m, node, cards)


def audit_scores(m: ExplorationMap, weights: Weights = Weights(), tol: float = 1e-9) -> list[tuple]:
    """Stored overall scores that disagree with a recomputation."""
    bad = []
    for rec in sorted(m.hypotheses(), key=lambda r: id_key(r.node)):
        if rec.scores is None:
            continue
        s = rec.scores
        again = overall(s.relevance, s.impact, s.diversity, weights)
        if abs(again - s.overall) > tol:
            bad.append((rec.node, s.overall, again))
    return bad
