"""Shared citation database used by every tool.

Keys render as ``[TOOL_N]`` inside text, e.g. ``[WEB_SEARCH_3]``.  Records
persist as append-only JSON lines.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

logger = logging.getLogger(__name__)

EXCERPT_CAP = 4000
KEY_RE = re.compile(r"\[([A-Z][A-Z_]*_[0-9]+)\]")
_KEY_FULL = re.compile(r"^([A-Z][A-Z_]*)_([0-9]+)$")
_POSITION_RE = re.compile(r"\[(\d+)\]")

SOURCE_KINDS = ("document", "web", "table_row")


class CitationNotFound(KeyError):
    pass


@dataclass
class CitationRecord:
    key: str
    source_kind: str
    locator: dict[str, str]
    content: str
    metadata: dict[str, str] = field(default_factory=dict)
    available: bool = True

    @property
    def tool(self) -> str:
        return _KEY_FULL.match(self.key).group(1)


def split_key(key: str) -> tuple[str, int]:
    m = _KEY_FULL.match(key)
    if m is None:
        raise ValueError(f"malformed citation key {key!r}")
    return m.group(1), int(m.group(2))


def keys_in(text: str) -> list[str]:
    """Citation keys in order of first appearance."""
    seen: dict[str, None] = {}
    for k in KEY_RE.findall(text):
        seen.setdefault(k, None)
    return list(seen)


def strip_citations(text: str) -> str:
    text = KEY_RE.sub("", text)
    text = _POSITION_RE.sub("", text)
    return re.sub(r"[ \t]+([.,;:])", r"\1", re.sub(r"[ \t]{2,}", " ", text)).strip()


def remap(text: str, mapping: dict[str, str], pattern: re.Pattern = _POSITION_RE) -> str:
    """Rewrite local citation markers to global keys in a single pass.

    Markers missing from ``mapping`` are dropped so no dangling reference
    survives.
    """

    def sub(m: re.Match) -> str:
        key = mapping.get(m.group(1))
        return f"[{key}]" if key else ""

    return pattern.sub(sub, text)


class CitationDB:
    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._records: dict[str, CitationRecord] = {}
        self._counters: dict[str, int] = {}
        self._dedupe: dict[tuple, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        for n, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = CitationRecord(**json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{self.path}:{n}: bad citation record: {exc}") from exc
            self._index(rec)

    def _index(self, rec: CitationRecord) -> None:
        tool, idx = split_key(rec.key)
        self._records[rec.key] = rec
        self._counters[tool] = max(self._counters.get(tool, 0), idx)
        self._dedupe[self._fingerprint(tool, rec.locator, rec.content)] = rec.key

    @staticmethod
    def _fingerprint(tool: str, locator: dict, content: str) -> tuple:
        return tool, json.dumps(locator, sort_keys=True), content

    def register(self, tool: str, source_kind: str, locator: dict, content: str,
                 metadata: Optional[dict] = None, available: bool = True) -> str:
        """Store a record and return its key; identical records share a key."""
        if not re.fullmatch(r"[A-Z][A-Z_]*", tool):
            raise ValueError(f"tool prefix {tool!r} must be upper-case letters/underscores")
        if source_kind not in SOURCE_KINDS:
            raise ValueError(f"source_kind must be one of {SOURCE_KINDS}")
        locator = {k: str(v) for k, v in locator.items()}
        content = content[:EXCERPT_CAP]
        with self._lock:
            fp = self._fingerprint(tool, locator, content)
            if fp in self._dedupe:
                return self._dedupe[fp]
            idx = self._counters.get(tool, 0) + 1
            rec = CitationRecord(f"{tool}_{idx}", source_kind, locator, content,
                                 {k: str(v) for k, v in (metadata or {}).items()}, available)
            self._index(rec)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")
            return rec.key

    def resolve(self, key: str) -> CitationRecord:
        key = key.strip("[]")
        try:
            return self._records[key]
        except KeyError:
            raise CitationNotFound(f"unknown citation key {key}") from None

    def __contains__(self, key: str) -> bool:
        return key.strip("[]") in self._records

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[CitationRecord]:
        return sorted(self._records.values(), key=lambda r: split_key(r.key))

    def dangling(self, text: str) -> list[str]:
        return [k for k in keys_in(text) if k not in self._records]

    def subset(self, keys: Iterable[str]) -> dict[str, CitationRecord]:
        return {k: self.resolve(k) for k in keys if k in self}

