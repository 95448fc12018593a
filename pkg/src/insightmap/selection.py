"""Breadth-first topic selection over the exploration map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .map_model import ExplorationMap, NodeId, NodeKind, id_key


class SelectionError(RuntimeError):
    pass


@dataclass
class SelectionTrace:
    path: list[NodeId] = field(default_factory=list)
    chosen: Optional[NodeId] = None
    generated: bool = False

    @property
    def frontier(self) -> NodeId:
        return self.path[-1]


Generator = Callable[[ExplorationMap, NodeId], NodeId]


def _descend_candidates(m: ExplorationMap, v: NodeId) -> list[NodeId]:
    topics = m.children(v, NodeKind.TOPIC)
    if topics:
        return topics
    if m.node(v).kind is NodeKind.TOPIC and not m.unexplored_children(v):
        # leaf topic with an empty own pool: concepts holding hypotheses are the frontier
        return [c for c in m.children(v, NodeKind.CONCEPT) if m.insight_potential_score(c) > 0]
    return []


def select_next(m: ExplorationMap, generate: Optional[Generator] = None) -> SelectionTrace:
    """Walk from Root to the least explored frontier and pick a hypothesis.

    At every step children with positive insight potential are preferred;
    among the candidates the lowest exploration score wins, ties going to
    the lowest node id.  When the frontier has no unexplored hypothesis,
    ``generate(map, frontier)`` is invoked and must return the selected new
    hypothesis; without a generator the trace comes back with
    ``generated=True`` and ``chosen=None``.
    """
    root = m.root
    if not m.children(root, NodeKind.TOPIC):
        raise SelectionError("map has no Topic nodes under Root")
    trace = SelectionTrace(path=[root])
    v = root
    while True:
        candidates = _descend_candidates(m, v)
        if not candidates:
            break
        positive = [c for c in candidates if m.insight_potential_score(c) > 0]
        pool = positive or candidates
        v = min(pool, key=lambda c: (m.exploration_score(c), id_key(c)))
        trace.path.append(v)

    if m.unexplored_children(v):
        trace.chosen = pick_unexplored(m, v)
    else:
        trace.generated = True
        if generate is not None:
            trace.chosen = generate(m, v)
    return trace


def pick_unexplored(m: ExplorationMap, node: NodeId) -> NodeId:
    """Highest overall score among the unexplored children.

    Unscored hypotheses rank after scored ones, in insertion order.
    """
    pool = m.unexplored_children(node)
    if not pool:
        raise SelectionError(f"node {node} has no unexplored hypotheses")

    def rank(h: NodeId) -> tuple:
        rec = m.hypothesis(h)
        if rec.scores is None:
            return (1, 0.0, id_key(h))
        return (0, -rec.scores.overall, id_key(h))

    return min(pool, key=rank)
