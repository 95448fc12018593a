"""Exploration-map construction.

Bottom-up: documents -> concepts -> disambiguated concept layer with
candidate hypotheses -> clustered concept ordering -> model-built Topic
Tree with every concept hung under its closest leaf.  Top-down: goal and
web seeds -> Topic Tree.  Seed-guided insertion grows an existing tree one
level at a time.
"""

from __future__ import annotations

import json
import logging
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .backends import (
    Backends,
    BackendError,
    FormatError,
    ModelRequest,
    SearchResult,
    ask_json,
    cosine_matrix,
    user,
)
from .map_model import (
    MAX_TOPIC_DEPTH,
    EdgeKind,
    ExplorationMap,
    NodeId,
    NodeKind,
    Origin,
    id_key,
)

logger = logging.getLogger(__name__)

NOT_FOUND = "NOT FOUND"
LEVELS = ("NONE", "LOW", "MEDIUM", "HIGH", "VERY_HIGH", "EXTREME")
_KEY_RE = re.compile(r"^[a-z0-9]+(?:_[a-z0-9]+)*$")
_DATE_RE = re.compile(r"^\d{2}_\d{2}_\d{4}$")


class BuildError(RuntimeError):
    pass


@dataclass
class BuilderConfig:
    chunk_size: int = 4000
    chunk_overlap: int = 400
    beta: float = 0.5
    k: int = 5
    positive_levels: tuple[str, ...] = ("MEDIUM", "HIGH", "VERY_HIGH", "EXTREME")
    min_levels: int = 2
    top_down_min_levels: int = 3
    max_levels: int = MAX_TOPIC_DEPTH
    retries: int = 3
    clusterer: str = "pca"  # "pca" or "umap"
    n_components: int = 20
    n_neighbors: int = 3
    min_cluster_size: int = 5
    seed: int = 0
    l_topic: int = 3
    l_concept: int = 4
    background: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> "BuilderConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "positive_levels" in known:
            known["positive_levels"] = tuple(_level(x) for x in known["positive_levels"])
        return cls(**known)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class SourceDoc:
    name: str
    text: str
    metadata: dict[str, str] = field(default_factory=dict)


def chunk_text(text: str, size: int, overlap: int) -> list[str]:
    if size <= 0 or not 0 <= overlap < size:
        raise ValueError("need size > 0 and 0 <= overlap < size")
    text = text.strip()
    if not text:
        return []
    step = size - overlap
    out = []
    for start in range(0, len(text), step):
        out.append(text[start:start + size])
        if start + size >= len(text):
            break
    return out


def load_corpus(path: str | Path, chunk_size: int = 4000, overlap: int = 400) -> list[SourceDoc]:
    """Read ``*.txt``/``*.md`` files plus optional sidecar ``<file>.json`` metadata."""
    root = Path(path)
    docs: list[SourceDoc] = []
    for f in sorted(p for p in root.rglob("*") if p.suffix.lower() in (".txt", ".md")):
        meta: dict[str, str] = {"filename": f.name}
        for side in (f.with_name(f.name + ".json"), f.with_suffix(".json")):
            if side.exists():
                raw = json.loads(side.read_text(encoding="utf-8"))
                meta.update({k: str(v) for k, v in raw.items() if v is not None})
                break
        chunks = chunk_text(f.read_text(encoding="utf-8"), chunk_size, overlap)
        for i, chunk in enumerate(chunks):
            m = dict(meta)
            if len(chunks) > 1:
                m["chunk"] = str(i)
            docs.append(SourceDoc(f"{meta['filename']}#{i}" if len(chunks) > 1 else meta["filename"],
                                  chunk, m))
    return docs


# ---------------------------------------------------------------------------
# concept extraction and disambiguation
# ---------------------------------------------------------------------------


@dataclass
class ConceptMention:
    concept: str
    type: str
    description: str
    appearing_phrases: list[str]
    source_doc: Optional[NodeId] = None


@dataclass
class UnifiedConcept:
    name: str
    type: str
    mentions: list[ConceptMention]
    description: str = ""

    @property
    def surface_forms(self) -> list[str]:
        return sorted({m.concept for m in self.mentions})

    @property
    def docs(self) -> list[NodeId]:
        seen: dict[NodeId, None] = {}
        for m in self.mentions:
            if m.source_doc is not None:
                seen.setdefault(m.source_doc, None)
        return list(seen)

    def descriptions(self) -> list[str]:
        out: list[str] = []
        for m in self.mentions:
            d = m.description.strip()
            if d and d.upper() != NOT_FOUND and d not in out:
                out.append(d)
        return out


def _parse_mentions(value: Any) -> list[ConceptMention]:
    if isinstance(value, dict) and isinstance(value.get("concepts"), list):
        value = value["concepts"]
    if not isinstance(value, list):
        raise FormatError("expected a JSON list of concept objects")
    out = []
    for item in value:
        if not isinstance(item, dict):
            raise FormatError("each concept must be a JSON object")
        name = str(item.get("concept", "")).strip()
        if not name:
            raise FormatError("concept name missing")
        phrases = item.get("appearing phrases", item.get("appearing_phrases")) or [name]
        if not isinstance(phrases, list):
            raise FormatError(f"'appearing phrases' of {name!r} must be a list")
        out.append(ConceptMention(
            concept=name,
            type=str(item.get("type", "")).strip(),
            description=str(item.get("description", NOT_FOUND)).strip() or NOT_FOUND,
            appearing_phrases=[str(p) for p in phrases],
        ))
    return out


def extract_concepts(backends: Backends, doc: SourceDoc, known: Sequence[str] = (),
                     retries: int = 3) -> list[ConceptMention]:
    if not doc.text.strip():
        raise ValueError("document text is empty")
    system = (
        "Extract the central concepts of the document: names, organizations, dates, places and "
        "similar key phrases. Skip things mentioned only in passing and keep each concept short.\n"
        "If a concept from the list below appears under another form, report it using the "
        "listed form.\nAlready known concepts:\n" + ("\n".join(known) if known else "(none)") + "\n"
        "Reply with a fenced JSON list ordered by importance to the document:\n"
        '[{"concept": str, "type": "location | product | person | date | ...", '
        f'"description": str or "{NOT_FOUND}", "appearing phrases": [str, ...]}}]'
    )
    meta = json.dumps(doc.metadata, sort_keys=True)
    req = ModelRequest("concept.extract", system, user(f"METADATA: {meta}\nDOCUMENT:\n{doc.text}"))
    return ask_json(backends.model, req, _parse_mentions, retries)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        lo, hi = sorted((ra, rb))
        self.parent[hi] = lo
        return True


def _surface_key(name: str) -> str:
    return " ".join(name.casefold().split())


def _is_person(kind: str) -> bool:
    return kind.strip().lower() in ("person", "people", "individual")


def _name_abbreviates(a: str, b: str) -> bool:
    """``J. Smith`` / ``John Smith``: same surname, compatible given names."""
    ta = re.findall(r"[\w'-]+", a.casefold())
    tb = re.findall(r"[\w'-]+", b.casefold())
    if len(ta) < 2 or len(tb) < 2 or ta[-1] != tb[-1] or len(ta) != len(tb):
        return False
    for x, y in zip(ta[:-1], tb[:-1]):
        if x == y:
            continue
        short, long_ = sorted((x, y), key=len)
        if len(short) != 1 or not long_.startswith(short):
            return False
    return ta != tb


def canonical_name(mentions: Sequence[ConceptMention]) -> str:
    """Most frequent surface form; ties prefer the longer, then the smaller string."""
    counts: dict[str, int] = {}
    for m in mentions:
        counts[m.concept] = counts.get(m.concept, 0) + 1
    return min(counts, key=lambda n: (-counts[n], -len(n), n))


def _group(mentions: list[ConceptMention]) -> UnifiedConcept:
    name = canonical_name(mentions)
    types = [m.type for m in mentions if m.type]
    kind = max(sorted(set(types)), key=types.count) if types else ""
    return UnifiedConcept(name, kind, list(mentions))


def _parse_judgement(value: Any) -> bool:
    if not isinstance(value, dict):
        raise FormatError("expected a JSON object")
    answer = str(value.get("answer", "")).strip().lower()
    if answer not in ("same", "different"):
        raise FormatError('"answer" must be "same" or "different"')
    return answer == "same"


def judge_same(backends: Backends, a: UnifiedConcept, b: UnifiedConcept, retries: int = 3) -> bool:
    system = (
        "Decide whether two concept names refer to exactly the same entity. A type of something "
        "or a part of something is different. A first name and a full name of one person, or an "
        "acronym and its expansion, usually refer to the same entity.\n"
        'Reply with fenced JSON: {"concept_pair": [str, str], "reasoning": str, '
        '"answer": "same" | "different"}'
    )
    prompt = (f"Concept 1: {a.name}\nDescription 1: {'; '.join(a.descriptions()) or NOT_FOUND}\n"
              f"Concept 2: {b.name}\nDescription 2: {'; '.join(b.descriptions()) or NOT_FOUND}")
    req = ModelRequest("concept.disambiguate", system, user(prompt))
    try:
        return ask_json(backends.model, req, _parse_judgement, retries)
    except FormatError as exc:
        logger.warning("disambiguation of %r/%r unparseable, keeping apart: %s", a.name, b.name, exc)
        return False


def surface_merge(groups: list[list[ConceptMention]]) -> list[list[ConceptMention]]:
    uf = _UnionFind(len(groups))
    by_key: dict[str, int] = {}
    for i, g in enumerate(groups):
        for m in g:
            k = _surface_key(m.concept)
            if k in by_key:
                uf.union(by_key[k], i)
            else:
                by_key[k] = i
    persons = [(i, m.concept) for i, g in enumerate(groups) for m in g if _is_person(m.type)]
    for x in range(len(persons)):
        for y in range(x + 1, len(persons)):
            if _name_abbreviates(persons[x][1], persons[y][1]):
                uf.union(persons[x][0], persons[y][0])
    return _collect(groups, uf)


def _collect(groups: list[list[ConceptMention]], uf: _UnionFind) -> list[list[ConceptMention]]:
    merged: dict[int, list[ConceptMention]] = {}
    for i, g in enumerate(groups):
        merged.setdefault(uf.find(i), []).extend(g)
    return [merged[r] for r in sorted(merged)]


def disambiguate(backends: Backends, items: Sequence[ConceptMention | UnifiedConcept], k: int = 5,
                 retries: int = 3) -> list[UnifiedConcept]:
    """Merge mentions that name the same entity.

    Surface forms are merged first without any model call.  Then every
    concept's top-``k`` embedding neighbours are judged pairwise and "same"
    verdicts are merged with union-find, repeating until a round merges
    nothing.  The output is therefore a fixed point: feeding it back in
    changes nothing.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    groups = [list(it.mentions) if isinstance(it, UnifiedConcept) else [it] for it in items]
    if not groups:
        return []
    groups = surface_merge(groups)
    verdicts: dict[tuple[str, str], bool] = {}
    while True:
        concepts = [_group(g) for g in groups]
        if len(concepts) < 2:
            break
        texts = [f"{c.name}: {'; '.join(c.descriptions())}" for c in concepts]
        sims = cosine_matrix(backends.embedder.embed(texts), backends.embedder.embed(texts))
        np.fill_diagonal(sims, -np.inf)
        pairs: set[tuple[int, int]] = set()
        for i in range(len(concepts)):
            order = sorted(range(len(concepts)), key=lambda j: (-sims[i, j], j))
            for j in order[:k]:
                if j != i:
                    pairs.add((min(i, j), max(i, j)))
        uf = _UnionFind(len(groups))
        merged_any = False
        for i, j in sorted(pairs):
            key = tuple(sorted((concepts[i].name, concepts[j].name)))
            if key not in verdicts:
                verdicts[key] = judge_same(backends, concepts[i], concepts[j], retries)
            if verdicts[key]:
                merged_any |= uf.union(i, j)
        if not merged_any:
            break
        groups = _collect(groups, uf)
    return [_group(g) for g in groups]


def unify_description(backends: Backends, name: str, descriptions: Sequence[str],
                      retries: int = 3) -> str:
    descs = [d for d in descriptions if d.strip() and d.strip().upper() != NOT_FOUND]
    if not descs:
        return ""
    if len(descs) == 1:
        return descs[0]
    system = (
        "Write one concise description of a concept from the descriptions gathered across "
        "documents. Remove repetition, keep every distinct piece of information, and where "
        "descriptions disagree follow the majority. Use only the given descriptions.\n"
        'Reply with fenced JSON: {"concept": str, "description": str}'
    )
    listing = "\n".join(f"- {d}" for d in descs)

    def check(v: Any) -> str:
        if not isinstance(v, dict) or not str(v.get("description", "")).strip():
            raise FormatError('expected {"concept", "description"} with a non-empty description')
        return str(v["description"]).strip()

    req = ModelRequest("concept.describe", system, user(f"CONCEPT: {name}\nDESCRIPTIONS:\n{listing}"))
    try:
        return ask_json(backends.model, req, check, retries)
    except (FormatError, BackendError) as exc:
        logger.warning("description merge for %r failed, using longest: %s", name, exc)
        return max(descs, key=lambda d: (len(d), d))


def extract_doc_metadata(backends: Backends, doc: SourceDoc, retries: int = 3) -> dict[str, str]:
    title = doc.metadata.get("title") or doc.metadata.get("filename") or doc.metadata.get("url")
    if not title:
        return {}
    system = (
        "Derive structured metadata from a document title: purpose, audience, likely use, "
        "publication date, organization and anything else it reveals.\n"
        "Keys are lowercase words joined by underscores. Dates use dd_mm_yyyy, with 01 for an "
        "unknown day. Reply with a fenced flat JSON object of strings."
    )

    def check(v: Any) -> dict[str, str]:
        if not isinstance(v, dict):
            raise FormatError("expected a flat JSON object")
        out = {}
        for key, val in v.items():
            if not _KEY_RE.match(str(key)):
                raise FormatError(f"key {key!r} is not lowercase_with_underscores")
            if isinstance(val, (dict, list)):
                raise FormatError(f"value of {key!r} must be a string")
            val = "" if val is None else str(val)
            if (key == "date" or key.endswith("_date")) and val and not _DATE_RE.match(val):
                raise FormatError(f"{key} {val!r} is not in dd_mm_yyyy form")
            out[key] = val
        return out

    req = ModelRequest("concept.metadata", system, user(f"TITLE: {title}"))
    try:
        return ask_json(backends.model, req, check, retries)
    except FormatError as exc:
        logger.warning("metadata for %s dropped: %s", doc.name, exc)
        return {}


# ---------------------------------------------------------------------------
# candidate concepts and insight potential
# ---------------------------------------------------------------------------


def document_frequency(m: ExplorationMap, concept: NodeId) -> int:
    return len(m.documents_of(concept))


def select_candidates(m: ExplorationMap, beta: float = 0.5) -> list[NodeId]:
    concepts = sorted(m.of_kind(NodeKind.CONCEPT), key=id_key)
    if not concepts:
        return []
    freq = {c: document_frequency(m, c) for c in concepts}
    med = statistics.median(freq.values())
    lo, hi = med * (1 - beta), med * (1 + beta)
    return [c for c in concepts if lo <= freq[c] <= hi]


def _level(raw: Any) -> str:
    level = re.sub(r"[\s-]+", "_", str(raw).strip().upper())
    if level not in LEVELS:
        raise FormatError(f"insight_potential {raw!r} not one of {', '.join(LEVELS)}")
    return level


@dataclass
class InsightPotentialVerdict:
    reasoning: str
    key_connecting_phrases: list[str]
    connection_drawn: str
    initial_hypothesis: Optional[str]
    level: str

    def positive(self, levels: Sequence[str]) -> bool:
        return self.level in levels and bool(self.initial_hypothesis)


def _parse_verdict(v: Any) -> InsightPotentialVerdict:
    if not isinstance(v, dict):
        raise FormatError("expected a JSON object")
    level = _level(v.get("insight_potential", ""))
    hyp = v.get("initial_hypothesis")
    hyp = None if hyp is None or str(hyp).strip().upper() in ("", "NONE") else str(hyp).strip()
    if level == "NONE":
        hyp = None
    phrases = v.get("key_connecting_phrases") or []
    if not isinstance(phrases, list):
        raise FormatError("key_connecting_phrases must be a list")
    return InsightPotentialVerdict(str(v.get("reasoning", "")), [str(p) for p in phrases],
                                   str(v.get("connection_drawn", "")), hyp, level)


def score_insight_potential(backends: Backends, concept: str, description: str,
                            docs: Sequence[tuple[str, str, dict]], retries: int = 3,
                            ) -> InsightPotentialVerdict:
    """Judge whether the documents around one concept seed a worthwhile thread.

    ``docs`` holds ``(label, text, metadata)`` triples.
    """
    if not docs:
        raise ValueError("need at least one document")
    system = (
        "You review a concept and the documents that mention it, and estimate whether a "
        "non-trivial, actionable insight could grow from them. What counts is a real link "
        "between documents, such as a contradiction, or a challenge in one that another could "
        "address. Sharing vocabulary is not enough.\n"
        'Reply with fenced JSON: {"reasoning": str, "key_connecting_phrases": [verbatim '
        'sentences], "connection_drawn": str, "initial_hypothesis": str or "NONE", '
        '"insight_potential": "NONE | LOW | MEDIUM | HIGH | VERY HIGH | EXTREME"}'
    )
    body = "\n\n".join(
        f"[Document{i + 1}] {label}\nMETADATA: {json.dumps(meta, sort_keys=True)}\n{text}"
        for i, (label, text, meta) in enumerate(docs)
    )
    req = ModelRequest("concept.potential", system,
                       user(f"CONCEPT: {concept}\nDESCRIPTION: {description or NOT_FOUND}\n\n{body}"))
    try:
        return ask_json(backends.model, req, _parse_verdict, retries)
    except FormatError as exc:
        logger.warning("insight potential for %r unparseable, treating as NONE: %s", concept, exc)
        return InsightPotentialVerdict("", [], "", None, "NONE")


def _pmap(backends: Backends, fn: Callable, items: Sequence) -> list:
    if backends.max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(backends.max_workers) as pool:
        return list(pool.map(fn, items))


def build_concept_layer(backends: Backends, docs: Sequence[SourceDoc], goal: str = "",
                        config: Optional[BuilderConfig] = None) -> ExplorationMap:
    cfg = config or BuilderConfig()
    m = ExplorationMap.with_root(goal, created_at=backends.clock.now().isoformat())
    if not docs:
        return m

    doc_ids = [m.add_node(NodeKind.DOCUMENT, d.name, d.text, dict(d.metadata)) for d in docs]

    # extraction is sequential because each call sees the concepts found so far
    mentions: list[ConceptMention] = []
    known: list[str] = []
    for did, doc in zip(doc_ids, docs):
        try:
            found = extract_concepts(backends, doc, known, cfg.retries)
        except FormatError as exc:
            logger.warning("concept extraction failed for %s, skipping: %s", doc.name, exc)
            continue
        for mention in found:
            mention.source_doc = did
            mentions.append(mention)
            if mention.concept not in known:
                known.append(mention.concept)

    for did, meta in zip(doc_ids, _pmap(backends, lambda d: extract_doc_metadata(backends, d, cfg.retries), docs)):
        for key, val in meta.items():
            m.node(did).attributes.setdefault(key, val)

    unified = disambiguate(backends, mentions, cfg.k, cfg.retries)
    descriptions = _pmap(backends, lambda u: unify_description(backends, u.name, u.descriptions(), cfg.retries),
                         unified)
    for concept, desc in zip(unified, descriptions):
        concept.description = desc
        attrs = {"type": concept.type, "surface_forms": json.dumps(concept.surface_forms)}
        cid = m.add_node(NodeKind.CONCEPT, concept.name, desc, attrs)
        for did in concept.docs:
            m.add_edge(did, cid, EdgeKind.DOC_CONCEPT)

    candidates = select_candidates(m, cfg.beta)

    def judge(cid: NodeId) -> InsightPotentialVerdict:
        node = m.node(cid)
        ctx = [(m.node(d).name, m.node(d).description, m.node(d).attributes) for d in m.documents_of(cid)]
        return score_insight_potential(backends, node.name, node.description, ctx, cfg.retries)

    for cid, verdict in zip(candidates, _pmap(backends, judge, candidates)):
        node = m.node(cid)
        node.attributes["insight_potential_level"] = verdict.level
        if verdict.positive(cfg.positive_levels):
            m.add_hypothesis(cid, verdict.initial_hypothesis, Origin.CONCEPT_LAYER)
            node.attributes["potential"] = "1"
    return m


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@dataclass
class ClusterSuggestion:
    ordered_concepts: list[NodeId]
    cluster_count: int
    labels: dict[NodeId, int] = field(default_factory=dict)


class PcaHdbscan:
    """PCA to ``n_components`` then HDBSCAN; deterministic."""

    def __init__(self, n_components: int = 20, min_cluster_size: int = 5, seed: int = 0):
        self.n_components = n_components
        self.min_cluster_size = min_cluster_size
        self.seed = seed

    def reduce(self, x: np.ndarray) -> np.ndarray:
        from sklearn.decomposition import PCA

        n = min(self.n_components, x.shape[0] - 1, x.shape[1])
        if n < 1:
            return x
        return PCA(n_components=n, random_state=self.seed).fit_transform(x)

    def labels(self, x: np.ndarray) -> np.ndarray:
        from sklearn.cluster import HDBSCAN

        return HDBSCAN(min_cluster_size=self.min_cluster_size).fit_predict(self.reduce(x))


class UmapHdbscan(PcaHdbscan):
    """UMAP reduction (optional ``umap-learn`` dependency) then HDBSCAN."""

    def __init__(self, n_components: int = 20, n_neighbors: int = 3, min_cluster_size: int = 5,
                 seed: int = 0):
        super().__init__(n_components, min_cluster_size, seed)
        self.n_neighbors = n_neighbors

    def reduce(self, x: np.ndarray) -> np.ndarray:
        import umap  # optional extra

        n = min(self.n_components, x.shape[0] - 2)
        return umap.UMAP(n_components=max(n, 1), n_neighbors=self.n_neighbors,
                         random_state=self.seed).fit_transform(x)


def make_clusterer(cfg: BuilderConfig):
    if cfg.clusterer == "umap":
        return UmapHdbscan(cfg.n_components, cfg.n_neighbors, cfg.min_cluster_size, cfg.seed)
    if cfg.clusterer == "pca":
        return PcaHdbscan(cfg.n_components, cfg.min_cluster_size, cfg.seed)
    raise ValueError(f"unknown clusterer {cfg.clusterer!r}")


def cluster_concepts(ids: Sequence[NodeId], embeddings: np.ndarray, clusterer=None,
                     min_cluster_size: int = 5) -> ClusterSuggestion:
    """Order concepts so cluster members are contiguous; noise goes last."""
    ids = list(ids)
    if not ids:
        raise ValueError("need at least one concept")
    x = np.asarray(embeddings, dtype=float)
    if len(ids) < min_cluster_size or np.allclose(x, x[0]):
        return ClusterSuggestion(ids, 1, {c: 0 for c in ids})
    labels = np.asarray((clusterer or PcaHdbscan(min_cluster_size=min_cluster_size)).labels(x))
    clusters = sorted({int(v) for v in labels if v >= 0})
    if not clusters:
        return ClusterSuggestion(ids, 1, {c: 0 for c in ids})
    ordered = [c for lab in clusters for c, v in zip(ids, labels) if v == lab]
    ordered += [c for c, v in zip(ids, labels) if v < 0]
    return ClusterSuggestion(ordered, len(clusters), {c: int(v) for c, v in zip(ids, labels)})


def concept_texts(m: ExplorationMap, ids: Sequence[NodeId]) -> list[str]:
    return [f"{m.node(c).name}: {m.node(c).description}" for c in ids]


# ---------------------------------------------------------------------------
# topic trees
# ---------------------------------------------------------------------------


@dataclass
class TopicSpec:
    name: str
    description: str
    children: list["TopicSpec"]

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def _topic(v: Any, where: str) -> TopicSpec:
    if not isinstance(v, dict):
        raise FormatError(f"{where}: expected an object")
    name = str(v.get("name", "")).strip()
    if not name:
        raise FormatError(f"{where}: topic name missing")
    kids = v.get("children") or []
    if not isinstance(kids, list):
        raise FormatError(f"{where}: children must be a list")
    return TopicSpec(name, str(v.get("description", "")),
                     [_topic(c, f"{where} > {name}") for c in kids])


def parse_tree(value: Any, min_levels: int, max_levels: int,
               forbidden: Sequence[str] = ()) -> list[TopicSpec]:
    """Validate a nested topic tree and return the top-level topics.

    Topic levels are counted below the root object, so ``root -> a -> b``
    has two levels.
    """
    if isinstance(value, list):
        value = {"name": "root", "children": value}
    root = _topic(value, "root")
    if not root.children:
        raise FormatError("tree has no topics under the root")
    levels = root.depth() - 1
    if not min_levels <= levels <= max_levels:
        raise FormatError(f"tree has {levels} topic levels, need between {min_levels} and {max_levels}")
    banned = {_surface_key(f) for f in forbidden}
    clashes = sorted({t.name for top in root.children for t in top.walk() if _surface_key(t.name) in banned})
    if clashes:
        raise FormatError(f"concept names must not appear as topics: {', '.join(clashes)}")
    return root.children


def _attach(m: ExplorationMap, parent: NodeId, specs: Sequence[TopicSpec]) -> None:
    for spec in specs:
        nid = m.add_node(NodeKind.TOPIC, spec.name, spec.description, parent=parent)
        _attach(m, nid, spec.children)


def leaf_topics(m: ExplorationMap) -> list[NodeId]:
    return sorted((t for t in m.of_kind(NodeKind.TOPIC) if not m.children(t, NodeKind.TOPIC)), key=id_key)


_TREE_FORMAT = (
    'Reply with fenced JSON: {"node_id": 0, "name": "root", "description": str, "children": '
    '[{"node_id": int, "name": str, "description": str, "children": [...]}]}'
)


def build_topic_tree(backends: Backends, m: ExplorationMap, suggestion: ClusterSuggestion,
                     config: Optional[BuilderConfig] = None) -> ExplorationMap:
    """Ask for a Topic Tree over the clustered concepts and attach each concept to its closest leaf."""
    cfg = config or BuilderConfig()
    concepts = list(suggestion.ordered_concepts)
    system = (
        "Build a hierarchy of topics that organizes the listed concepts of one domain into a "
        "mental map. The concepts themselves must not appear in the tree; every topic abstracts "
        "over its subtree. Keep similar concepts in the same branch and avoid heavy skew; "
        f"branches may differ in depth. Use between {cfg.min_levels} and {cfg.max_levels} levels "
        "of topics under the root.\n" + _TREE_FORMAT
    )
    listing = "\n".join(f"- {m.node(c).name}: {m.node(c).description}" for c in concepts)
    req = ModelRequest("tree.build", system, user(f"GOAL: {m.goal}\nCONCEPTS (grouped):\n{listing}"))
    names = [m.node(c).name for c in concepts]
    try:
        tops = ask_json(backends.model, req,
                        lambda v: parse_tree(v, cfg.min_levels, cfg.max_levels, names), cfg.retries)
    except FormatError as exc:
        raise BuildError(f"topic tree rejected: {exc}") from exc
    _attach(m, m.root, tops)
    attach_concepts(backends, m, concepts)
    return m


def attach_concepts(backends: Backends, m: ExplorationMap, concepts: Sequence[NodeId]) -> None:
    leaves = leaf_topics(m)
    if not leaves or not concepts:
        return
    sims = cosine_matrix(backends.embedder.embed(concept_texts(m, concepts)),
                         backends.embedder.embed(concept_texts(m, leaves)))
    for row, cid in zip(sims, concepts):
        best = int(np.argmax(row))  # first max = lowest id leaf
        m.add_edge(leaves[best], cid, EdgeKind.PARENT_CHILD)


def build_bottom_up(backends: Backends, docs: Sequence[SourceDoc], goal: str,
                    config: Optional[BuilderConfig] = None) -> ExplorationMap:
    cfg = config or BuilderConfig()
    m = build_concept_layer(backends, docs, goal, cfg)
    concepts = sorted(m.of_kind(NodeKind.CONCEPT), key=id_key)
    if not concepts:
        return m
    emb = backends.embedder.embed(concept_texts(m, concepts))
    suggestion = cluster_concepts(concepts, emb, make_clusterer(cfg), cfg.min_cluster_size)
    return build_topic_tree(backends, m, suggestion, cfg)


def web_seeds(backends: Backends, goal: str, background: str = "", n: int = 5,
              retries: int = 3) -> list[SearchResult]:
    """Search-keyword generation from the goal, then one search per keyword."""
    system = (
        f"Propose {n} varied web-search queries that would surface recent, relevant material "
        'for the research goal. Reply with fenced JSON: {"keywords": [str, ...]}'
    )

    def check(v: Any) -> list[str]:
        kws = v.get("keywords") if isinstance(v, dict) else v
        if not isinstance(kws, list) or not kws or not all(str(k).strip() for k in kws):
            raise FormatError('expected {"keywords": [non-empty strings]}')
        return [str(k).strip() for k in kws]

    req = ModelRequest("expansion.keywords", system,
                       user(f"GOAL: {goal}\nBACKGROUND: {background or '(none)'}"))
    seen: set[str] = set()
    out: list[SearchResult] = []
    for kw in ask_json(backends.model, req, check, retries):
        for r in backends.search.search(kw):
            if r.url not in seen:
                seen.add(r.url)
                out.append(r)
    return out


def format_seeds(seeds: Sequence[SearchResult]) -> str:
    return "\n".join(f"[S{i + 1}] {s.title}: {s.snippet} ({s.url})" for i, s in enumerate(seeds)) or "(none)"


def build_top_down(backends: Backends, goal: str, seeds: Sequence[SearchResult] = (),
                   config: Optional[BuilderConfig] = None) -> ExplorationMap:
    cfg = config or BuilderConfig()
    if not goal.strip():
        raise ValueError("goal is empty")
    system = (
        "Break the research goal down into a hierarchy of topics that is diverse, covers the "
        f"goal well and keeps each level coherent. Use at least {cfg.top_down_min_levels} and at "
        f"most {cfg.max_levels} levels of topics under the root.\n" + _TREE_FORMAT
    )
    prompt = (f"GOAL: {goal}\nBACKGROUND: {cfg.background or '(none)'}\n"
              f"WEB_SEARCH:\n{format_seeds(seeds)}")
    req = ModelRequest("tree.top_down", system, user(prompt))
    try:
        tops = ask_json(backends.model, req,
                        lambda v: parse_tree(v, cfg.top_down_min_levels, cfg.max_levels), cfg.retries)
    except FormatError as exc:
        raise BuildError(f"topic tree rejected: {exc}") from exc
    m = ExplorationMap.with_root(goal, created_at=backends.clock.now().isoformat())
    _attach(m, m.root, tops)
    return m


def topic_level(m: ExplorationMap, node: NodeId) -> int:
    """Root is level 0, its topics level 1, and so on."""
    return len(m.path_to_root(node)) - 1


def insert_seed_guided(backends: Backends, m: ExplorationMap, start: NodeId,
                       seeds: Sequence[SearchResult], l_topic: int = 3, l_concept: int = 4,
                       retries: int = 3) -> NodeId:
    """Descend from ``start``, choosing or creating one child per level.

    The model sees the existing child names, the path from Root and the
    seeds; an answer matching a child (case-insensitively) moves there,
    anything else creates a Topic with that name.  A matched Concept ends
    the descent since concepts carry no topics.
    """
    if m.node(start).kind not in (NodeKind.ROOT, NodeKind.TOPIC):
        raise ValueError(f"start {start} is not on the Topic Tree")
    if not seeds:
        raise ValueError("need at least one seed")
    limit = min(max(l_topic, l_concept), MAX_TOPIC_DEPTH)
    system = (
        "Place new information in a topic hierarchy. Given the current path, its children and "
        "some web results, pick the child that best fits the results, or propose a new short "
        "topic name (at most four words) when none fits. Prefer existing children.\n"
        'Reply with fenced JSON: {"choice": str, "reasoning": str}'
    )

    def check(v: Any) -> str:
        if not isinstance(v, dict) or not str(v.get("choice", "")).strip():
            raise FormatError('expected {"choice": non-empty string}')
        return str(v["choice"]).strip()

    v = start
    while topic_level(m, v) < limit:
        kids = [c for c in m.children(v) if m.node(c).kind in (NodeKind.TOPIC, NodeKind.CONCEPT)]
        path = " > ".join(m.node(n).name for n in m.path_to_root(v))
        names = "\n".join(f"- {m.node(c).name}" for c in kids) or "(no children yet)"
        req = ModelRequest("tree.expand", system,
                           user(f"PATH: {path}\nCHILDREN:\n{names}\nWEB_SEARCH:\n{format_seeds(seeds)}"))
        choice = ask_json(backends.model, req, check, retries)
        match = next((c for c in kids if _surface_key(m.node(c).name) == _surface_key(choice)), None)
        if match is None:
            v = m.add_node(NodeKind.TOPIC, choice, "", {"source": "web_expansion"}, parent=v)
            continue
        v = match
        if m.node(v).kind is NodeKind.CONCEPT:
            break
    return v
