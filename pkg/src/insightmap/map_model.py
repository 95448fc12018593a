"""Exploration map: a typed directed graph that drives exploration.

Nodes are Root/Topic/Concept/Hypothesis/Insight/Document.  Parent-child
edges form a tree over everything except Documents, which hang off Concepts
through doc-concept edges.  A Hypothesis counts as explored once it has an
Insight child.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

NodeId = str


class NodeKind(str, Enum):
    ROOT = "Root"
    TOPIC = "Topic"
    CONCEPT = "Concept"
    HYPOTHESIS = "Hypothesis"
    INSIGHT = "Insight"
    DOCUMENT = "Document"


class EdgeKind(str, Enum):
    PARENT_CHILD = "parent-child"
    DOC_CONCEPT = "doc-concept"


class Origin(str, Enum):
    CONCEPT_LAYER = "concept_layer"
    GENERATION_BATCH = "generation_batch"
    EXPLORER_BRANCH = "explorer_branch"


class MapFormatError(ValueError):
    """Raised when a serialized map cannot be parsed."""


# Allowed (parent kind, child kind) pairs for parent-child edges.
_TREE_PAIRS = {
    (NodeKind.ROOT, NodeKind.TOPIC),
    (NodeKind.TOPIC, NodeKind.TOPIC),
    (NodeKind.TOPIC, NodeKind.CONCEPT),
    (NodeKind.TOPIC, NodeKind.HYPOTHESIS),
    (NodeKind.CONCEPT, NodeKind.HYPOTHESIS),
    (NodeKind.HYPOTHESIS, NodeKind.INSIGHT),
}

MAX_TOPIC_DEPTH = 4
_SCORE_KEYS = ("relevance", "impact", "diversity", "overall")


def id_key(node_id: NodeId) -> tuple:
    """Sort key giving numeric order to minted ids and lexical order otherwise."""
    return (0, int(node_id), "") if node_id.isdigit() else (1, 0, node_id)


@dataclass
class Node:
    id: NodeId
    kind: NodeKind
    name: str
    description: str = ""
    attributes: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Edge:
    src: NodeId
    dst: NodeId
    kind: EdgeKind


@dataclass
class Scores:
    relevance: float
    impact: float
    diversity: float
    overall: float


@dataclass
class HypothesisRecord:
    node: NodeId
    text: str
    status: str  # "unexplored" | "explored"
    origin: Origin
    scores: Optional[Scores] = None

    @property
    def explored(self) -> bool:
        return self.status == "explored"


class ExplorationMap:
    def __init__(self, goal: str = "", created_at: str = ""):
        self.goal = goal
        self.created_at = created_at
        self.nodes: dict[NodeId, Node] = {}
        self.edges: list[Edge] = []
        self.next_id = 0
        self._children: dict[NodeId, list[NodeId]] = {}
        self._parent: dict[NodeId, NodeId] = {}
        self._lock = threading.RLock()

    # -- construction -------------------------------------------------------

    @classmethod
    def with_root(cls, goal: str, created_at: str = "", name: str = "root",
                  description: str = "") -> "ExplorationMap":
        m = cls(goal, created_at)
        m.add_node(NodeKind.ROOT, name, description or goal)
        return m

    def mint_id(self) -> NodeId:
        with self._lock:
            nid = str(self.next_id)
            self.next_id += 1
            return nid

    def add_node(self, kind: NodeKind, name: str, description: str = "",
                 attributes: Optional[dict[str, str]] = None,
                 parent: Optional[NodeId] = None, node_id: Optional[NodeId] = None) -> NodeId:
        with self._lock:
            nid = node_id if node_id is not None else self.mint_id()
            if nid in self.nodes:
                raise ValueError(f"duplicate node id {nid}")
            if nid.isdigit():
                self.next_id = max(self.next_id, int(nid) + 1)
            self.nodes[nid] = Node(nid, NodeKind(kind), name, description, dict(attributes or {}))
            if parent is not None:
                self.add_edge(parent, nid, EdgeKind.PARENT_CHILD)
            return nid

    def add_edge(self, src: NodeId, dst: NodeId, kind: EdgeKind) -> None:
        with self._lock:
            for end in (src, dst):
                if end not in self.nodes:
                    raise KeyError(f"unknown node id {end}")
            edge = Edge(src, dst, EdgeKind(kind))
            self.edges.append(edge)
            if edge.kind is EdgeKind.PARENT_CHILD:
                self._children.setdefault(src, []).append(dst)
                self._parent.setdefault(dst, src)

    def remove_edge(self, edge: Edge) -> None:
        with self._lock:
            self.edges.remove(edge)
            self._reindex()

    def _reindex(self) -> None:
        self._children = {}
        self._parent = {}
        for e in self.edges:
            if e.kind is EdgeKind.PARENT_CHILD:
                self._children.setdefault(e.src, []).append(e.dst)
                self._parent.setdefault(e.dst, e.src)

    # -- queries -------------------------------------------------------------

    def node(self, node_id: NodeId) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id}") from None

    @property
    def root(self) -> NodeId:
        roots = [n.id for n in self.nodes.values() if n.kind is NodeKind.ROOT]
        if len(roots) != 1:
            raise ValueError(f"map has {len(roots)} Root nodes")
        return roots[0]

    def children(self, node_id: NodeId, kind: Optional[NodeKind] = None) -> list[NodeId]:
        kids = self._children.get(node_id, [])
        if kind is None:
            return list(kids)
        return [k for k in kids if self.nodes[k].kind is kind]

    def parent(self, node_id: NodeId) -> Optional[NodeId]:
        return self._parent.get(node_id)

    def path_to_root(self, node_id: NodeId) -> list[NodeId]:
        path = [node_id]
        seen = {node_id}
        while (p := self.parent(path[-1])) is not None and p not in seen:
            path.append(p)
            seen.add(p)
        return path[::-1]

    def depth(self, node_id: NodeId) -> int:
        return len(self.path_to_root(node_id)) - 1

    def of_kind(self, kind: NodeKind) -> list[NodeId]:
        return [n.id for n in self.nodes.values() if n.kind is kind]

    def descendants(self, node_id: NodeId) -> Iterator[NodeId]:
        stack = list(reversed(self.children(node_id)))
        seen = set()
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            yield nid
            stack.extend(reversed(self.children(nid)))

    def documents_of(self, concept: NodeId) -> list[NodeId]:
        return [e.src for e in self.edges if e.kind is EdgeKind.DOC_CONCEPT and e.dst == concept]

    def concepts_of(self, document: NodeId) -> list[NodeId]:
        return [e.dst for e in self.edges if e.kind is EdgeKind.DOC_CONCEPT and e.src == document]

    def find_child(self, node_id: NodeId, name: str) -> Optional[NodeId]:
        key = name.strip().casefold()
        for c in self.children(node_id):
            if self.nodes[c].name.strip().casefold() == key:
                return c
        return None

    # -- hypotheses ----------------------------------------------------------

    def is_explored(self, hyp: NodeId) -> bool:
        return any(self.nodes[c].kind is NodeKind.INSIGHT for c in self.children(hyp))

    def add_hypothesis(self, parent: NodeId, text: str, origin: Origin,
                       scores: Optional[Scores] = None) -> NodeId:
        attrs = {"origin": Origin(origin).value}
        nid = self.add_node(NodeKind.HYPOTHESIS, text[:80], text, attrs, parent=parent)
        if scores is not None:
            self.set_scores(nid, scores)
        return nid

    def set_scores(self, hyp: NodeId, scores: Scores) -> None:
        node = self.node(hyp)
        for key in _SCORE_KEYS:
            node.attributes[key] = repr(float(getattr(scores, key)))

    def hypothesis(self, hyp: NodeId) -> HypothesisRecord:
        node = self.node(hyp)
        if node.kind is not NodeKind.HYPOTHESIS:
            raise ValueError(f"node {hyp} is {node.kind.value}, not Hypothesis")
        scores = None
        if all(k in node.attributes for k in _SCORE_KEYS):
            scores = Scores(*(float(node.attributes[k]) for k in _SCORE_KEYS))
        return HypothesisRecord(
            node=hyp,
            text=node.description,
            status="explored" if self.is_explored(hyp) else "unexplored",
            origin=Origin(node.attributes.get("origin", Origin.GENERATION_BATCH.value)),
            scores=scores,
        )

    def hypotheses(self, under: Optional[NodeId] = None) -> list[HypothesisRecord]:
        ids = self.of_kind(NodeKind.HYPOTHESIS) if under is None else [
            d for d in self.descendants(under) if self.nodes[d].kind is NodeKind.HYPOTHESIS]
        return [self.hypothesis(h) for h in ids]

    def unexplored_children(self, node_id: NodeId) -> list[NodeId]:
        return [h for h in self.children(node_id, NodeKind.HYPOTHESIS) if not self.is_explored(h)]

    def add_insight(self, hyp: NodeId, statement: str,
                    attributes: Optional[dict[str, str]] = None) -> NodeId:
        if self.node(hyp).kind is not NodeKind.HYPOTHESIS:
            raise ValueError(f"insight parent {hyp} is not a Hypothesis")
        if self.is_explored(hyp):
            raise ValueError(f"hypothesis {hyp} already has an insight")
        return self.add_node(NodeKind.INSIGHT, statement[:80], statement, attributes, parent=hyp)

    # -- scores ---------------------------------------------------------------

    def _count_hypotheses(self, node_id: NodeId, explored: bool) -> int:
        kind = self.node(node_id).kind
        if kind not in (NodeKind.ROOT, NodeKind.TOPIC, NodeKind.CONCEPT):
            raise ValueError(f"scores are defined on Root/Topic/Concept, not {kind.value}")
        return sum(
            1 for d in self.descendants(node_id)
            if self.nodes[d].kind is NodeKind.HYPOTHESIS and self.is_explored(d) == explored
        )

    def insight_potential_score(self, node_id: NodeId) -> int:
        """Unexplored hypotheses anywhere in the subtree."""
        return self._count_hypotheses(node_id, explored=False)

    def exploration_score(self, node_id: NodeId) -> int:
        """Explored hypotheses anywhere in the subtree."""
        return self._count_hypotheses(node_id, explored=True)

    # -- equality / copying ---------------------------------------------------

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExplorationMap):
            return NotImplemented
        return (self.goal == other.goal and self.created_at == other.created_at
                and self.nodes == other.nodes and self.edges == other.edges)

    def copy(self) -> "ExplorationMap":
        return load(save(self))

    def __repr__(self) -> str:
        return f"ExplorationMap(goal={self.goal!r}, nodes={len(self.nodes)}, edges={len(self.edges)})"


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(m: ExplorationMap) -> list[str]:
    """Return one description per invariant violation; empty when valid."""
    out: list[str] = []
    roots = [n.id for n in m.nodes.values() if n.kind is NodeKind.ROOT]
    if len(roots) != 1:
        out.append(f"map: exactly one Root required, found {len(roots)}")

    parents: dict[NodeId, list[NodeId]] = {}
    for e in m.edges:
        if e.src not in m.nodes or e.dst not in m.nodes:
            out.append(f"edge {e.src}->{e.dst}: dangling endpoint")
            continue
        sk, dk = m.nodes[e.src].kind, m.nodes[e.dst].kind
        if e.kind is EdgeKind.DOC_CONCEPT:
            if not (sk is NodeKind.DOCUMENT and dk is NodeKind.CONCEPT):
                out.append(f"edge {e.src}->{e.dst}: doc-concept endpoint kinds "
                           f"({sk.value}->{dk.value})")
        else:
            parents.setdefault(e.dst, []).append(e.src)
            if (sk, dk) not in _TREE_PAIRS:
                out.append(f"edge {e.src}->{e.dst}: parent-child kinds {sk.value}->{dk.value} not allowed")

    for nid, ps in parents.items():
        if len(ps) > 1:
            out.append(f"node {nid}: multiple parents {sorted(ps, key=id_key)}")

    has_topics = any(n.kind is NodeKind.TOPIC for n in m.nodes.values())
    for n in m.nodes.values():
        kids = [m.nodes[c] for c in m.children(n.id) if c in m.nodes]
        if n.kind is NodeKind.CONCEPT:
            layer = [k for k in kids if k.kind is NodeKind.HYPOTHESIS
                     and k.attributes.get("origin") == Origin.CONCEPT_LAYER.value]
            if len(layer) > 1:
                out.append(f"node {n.id}: Concept has {len(layer)} concept-layer Hypothesis children")
            if has_topics and n.id not in parents:
                out.append(f"node {n.id}: Concept not attached to the Topic Tree")
        elif n.kind is NodeKind.HYPOTHESIS:
            if len(kids) > 1:
                out.append(f"node {n.id}: Hypothesis has {len(kids)} children (max one Insight)")
            if n.id not in parents:
                out.append(f"node {n.id}: Hypothesis has no parent")
        elif n.kind is NodeKind.INSIGHT:
            if kids:
                out.append(f"node {n.id}: Insight must be a leaf")
        elif n.kind is NodeKind.TOPIC:
            if n.id not in parents:
                out.append(f"node {n.id}: Topic has no parent")
        elif n.kind is NodeKind.DOCUMENT:
            if n.id in parents or kids:
                out.append(f"node {n.id}: Document in parent-child tree")

    # cycles and topic depth, walking up parent links
    for nid in m.nodes:
        seen = [nid]
        cur = nid
        while cur in parents:
            cur = parents[cur][0]
            if cur in seen:
                out.append(f"node {nid}: parent-child cycle")
                break
            seen.append(cur)
        else:
            if m.nodes[nid].kind is NodeKind.TOPIC and len(seen) - 1 > MAX_TOPIC_DEPTH:
                out.append(f"node {nid}: Topic depth {len(seen) - 1} exceeds {MAX_TOPIC_DEPTH}")
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def to_dict(m: ExplorationMap) -> dict:
    return {
        "goal": m.goal,
        "created_at": m.created_at,
        "next_id": m.next_id,
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "name": n.name,
             "description": n.description, "attributes": n.attributes}
            for n in m.nodes.values()
        ],
        "edges": [{"from": e.src, "to": e.dst, "kind": e.kind.value} for e in m.edges],
    }


def save(m: ExplorationMap) -> bytes:
    return (json.dumps(to_dict(m), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def from_dict(data: dict) -> ExplorationMap:
    try:
        m = ExplorationMap(data.get("goal", ""), data.get("created_at", ""))
        for i, n in enumerate(data["nodes"]):
            try:
                m.add_node(NodeKind(n["kind"]), n["name"], n.get("description", ""),
                           n.get("attributes", {}), node_id=str(n["id"]))
            except (KeyError, ValueError) as exc:
                raise MapFormatError(f"nodes[{i}]: {exc}") from exc
        for i, e in enumerate(data["edges"]):
            try:
                m.add_edge(str(e["from"]), str(e["to"]), EdgeKind(e["kind"]))
            except (KeyError, ValueError) as exc:
                raise MapFormatError(f"edges[{i}]: {exc}") from exc
        m.next_id = max(m.next_id, int(data.get("next_id", 0)))
    except (KeyError, TypeError) as exc:
        raise MapFormatError(f"missing field: {exc}") from exc
    return m


def load(raw: bytes) -> ExplorationMap:
    try:
        data = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MapFormatError(f"byte {exc.start}: invalid UTF-8") from exc
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise MapFormatError("line 1 column 1: top-level value must be an object")
    return from_dict(data)
