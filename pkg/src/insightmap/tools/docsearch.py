"""Document-search subagent: vector retrieval with self-reflection or decomposition."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from ..backends import Backends, Embedder, FormatError, ModelRequest, ask_json, normalize_rows, user
from ..citations import CitationDB, remap

logger = logging.getLogger(__name__)

TOOL = "DOC_SEARCH"
NO_RESULTS = "No results: the document index is empty."


@dataclass
class Passage:
    text: str
    filename: str
    page: str = ""


class VectorIndex:
    def __init__(self, passages: Sequence[Passage], vectors: np.ndarray):
        if len(passages) != len(vectors):
            raise ValueError("passages and vectors differ in length")
        self.passages = list(passages)
        self.vectors = normalize_rows(np.asarray(vectors, dtype=float)) if len(passages) else np.zeros((0, 0))

    @classmethod
    def build(cls, embedder: Embedder, passages: Sequence[Passage]) -> "VectorIndex":
        passages = list(passages)
        vecs = embedder.embed([p.text for p in passages]) if passages else np.zeros((0, 0))
        return cls(passages, vecs)

    def __len__(self) -> int:
        return len(self.passages)

    def search(self, vector: np.ndarray, k: int) -> list[int]:
        if not self.passages:
            return []
        v = np.asarray(vector, dtype=float)
        v = v / (np.linalg.norm(v) or 1.0)
        sims = self.vectors @ v
        return sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "vectors.npy", self.vectors)
        (path / "passages.json").write_text(json.dumps([asdict(p) for p in self.passages]), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VectorIndex":
        path = Path(path)
        passages = [Passage(**p) for p in json.loads((path / "passages.json").read_text(encoding="utf-8"))]
        return cls(passages, np.load(path / "vectors.npy"))


def _field(name: str, kind: type):
    def check(v: Any):
        if not isinstance(v, dict) or name not in v or not isinstance(v[name], kind):
            raise FormatError(f'expected {{"{name}": {kind.__name__}}}')
        return v[name]

    return check


def _bounded_list(name: str, lo: int, hi: int):
    def check(v: Any) -> list[str]:
        items = _field(name, list)(v)
        items = [str(x).strip() for x in items if str(x).strip()]
        if not lo <= len(items) <= hi:
            raise FormatError(f'"{name}" must hold {lo} to {hi} entries, got {len(items)}')
        return items

    return check


class DocSearchTool:
    name = "DOC_SEARCH"
    description = "Searches the document corpus and answers with passage citations."

    def __init__(self, backends: Backends, index: VectorIndex, citations: CitationDB,
                 top_k: int = 5, max_turns: int = 3, hyde: bool = False, decompose: bool = True,
                 retries: int = 2):
        self.backends = backends
        self.index = index
        self.citations = citations
        self.top_k = top_k
        self.max_turns = max_turns
        self.hyde = hyde
        self.decompose = decompose
        self.retries = retries
        self.rounds = 0  # retrieval rounds of the last reflect loop

    def _ask(self, role: str, system: str, prompt: str, check):
        return ask_json(self.backends.model, ModelRequest(role, system, user(prompt)), check, self.retries)

    # -- retrieval --------------------------------------------------------------

    def retrieve(self, text: str) -> list[int]:
        return self.index.search(self.backends.embedder.embed([text])[0], self.top_k)

    def _format(self, hits: Sequence[int]) -> str:
        return json.dumps([{"position": i + 1, "text": self.index.passages[h].text,
                            "filename": self.index.passages[h].filename, "page": self.index.passages[h].page}
                           for i, h in enumerate(hits)], ensure_ascii=False, indent=1)

    def _register(self, hits: Sequence[int]) -> dict[str, str]:
        mapping = {}
        for pos, h in enumerate(hits, 1):
            p = self.index.passages[h]
            mapping[str(pos)] = self.citations.register(
                TOOL, "document", {"filename": p.filename, "page": p.page}, p.text)
        return mapping

    # -- model steps ------------------------------------------------------------

    def should_decompose(self, query: str) -> bool:
        system = ("Decide whether the query bundles several separable questions (comparisons, "
                  "multiple entities, periods or places) that are better searched one at a time.\n"
                  'Reply with fenced JSON: {"should_decompose": bool, "reasoning": str}')
        try:
            return self._ask("doc.decide", system, f"QUERY: {query}", _field("should_decompose", bool))
        except FormatError:
            return False

    def sub_queries(self, query: str) -> list[str]:
        system = ("Split the query into 2 to 10 focused sub-queries that can each be answered on "
                  'their own and together cover it.\nReply with fenced JSON: {"sub_queries": [str, ...]}')
        return self._ask("doc.decompose", system, f"QUERY: {query}", _bounded_list("sub_queries", 2, 10))

    def hypothetical(self, query: str) -> str:
        system = ("Write a detailed passage, in the style of a report, that would answer the query "
                  'well. It is used only to find similar real passages.\n'
                  'Reply with fenced JSON: {"hypothetical_document": str}')
        return self._ask("doc.hyde", system, f"QUERY: {query}", _field("hypothetical_document", str))

    def reflect(self, query: str, hits: Sequence[int]) -> tuple[str, bool, str]:
        system = ("Review the passages retrieved so far for the query. Say what they establish, "
                  "whether they are enough for a complete answer and, if not, what is missing.\n"
                  'Reply with fenced JSON: {"analysis": str, "is_complete": bool, "missing_information": str}')

        def check(v: Any):
            done = _field("is_complete", bool)(v)
            return str(v.get("analysis", "")), done, str(v.get("missing_information", ""))

        return self._ask("doc.reflect", system, f"QUERY: {query}\nPASSAGES:\n{self._format(hits)}", check)

    def enhance(self, query: str, hits: Sequence[int], gaps: str) -> list[str]:
        system = ("Given a query, what was found and the remaining gaps, write 1 to 3 specific "
                  'search queries to fill the gaps.\nReply with fenced JSON: {"enhanced_queries": [str, ...]}')
        prompt = f"QUERY: {query}\nFOUND:\n{self._format(hits)}\nGAPS: {gaps}"
        return self._ask("doc.enhance", system, prompt, _bounded_list("enhanced_queries", 1, 3))

    def answer(self, query: str, hits: Sequence[int]) -> str:
        """Grounded answer with global citation keys."""
        mapping = self._register(hits)
        system = ("Answer the query faithfully from the retrieved passages only, presenting "
                  "conflicting information side by side. Cite passages by position in square "
                  "brackets, e.g. [1][2]. Do not cite anything for information that was not found.\n"
                  'Passages are JSON objects {position, text, filename, page}.\n'
                  'Reply with fenced JSON: {"answer": str}')
        try:
            text = self._ask("doc.answer", system, f"QUERY: {query}\nPASSAGES:\n{self._format(hits)}",
                             _field("answer", str))
        except FormatError as exc:
            logger.warning("document answer unparseable, returning passages: %s", exc)
            return "\n".join(f"[{mapping[str(i + 1)]}] {self.index.passages[h].text}" for i, h in enumerate(hits))
        return remap(text, mapping)

    def synthesize(self, query: str, parts: Sequence[tuple[str, str]]) -> str:
        system = ("Merge the sub-query answers into one coherent answer to the original query. "
                  "Keep every citation exactly as written, present conflicting views, add nothing "
                  "new and do not mention the sub-queries.\n"
                  'Reply with fenced JSON: {"synthesized_answer": str}')
        body = "\n\n".join(f"SUB-QUERY: {q}\nANSWER: {a}" for q, a in parts)
        try:
            return self._ask("doc.synthesize", system, f"QUERY: {query}\n\n{body}",
                             _field("synthesized_answer", str))
        except FormatError:
            return "\n\n".join(a for _, a in parts)

    # -- entry point ------------------------------------------------------------

    def retrieve_and_answer(self, query: str) -> str:
        return self.answer(query, self.retrieve(query))

    def run(self, query: str, params: Optional[dict[str, str]] = None) -> str:
        if len(self.index) == 0:
            return NO_RESULTS
        if self.decompose and self.should_decompose(query):
            try:
                subs = self.sub_queries(query)
            except FormatError:
                subs = []
            if subs:
                if self.backends.max_workers > 1:
                    with ThreadPoolExecutor(self.backends.max_workers) as pool:
                        answers = list(pool.map(self.retrieve_and_answer, subs))
                else:
                    answers = [self.retrieve_and_answer(q) for q in subs]
                return self.synthesize(query, list(zip(subs, answers)))

        seed = query
        if self.hyde:
            try:
                seed = self.hypothetical(query)
            except FormatError:
                seed = query
        hits = self.retrieve(seed)
        self.rounds = 1
        for _ in range(self.max_turns):
            try:
                _, done, gaps = self.reflect(query, hits)
                if done or self.rounds >= self.max_turns:
                    break
                follow_ups = self.enhance(query, hits, gaps)
            except FormatError as exc:
                logger.warning("reflection failed, answering from retrieved set: %s", exc)
                break
            for q in follow_ups:
                hits += [h for h in self.retrieve(q) if h not in hits]
            self.rounds += 1
        return self.answer(query, hits)
