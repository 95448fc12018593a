"""Model, embedding and search provider contracts plus offline mocks.

Every pipeline step talks to a language model through :class:`ModelBackend`,
to an embedding model through :class:`Embedder` and to the web through
:class:`SearchProvider` / :class:`PageFetcher`.  The scripted mock
(:class:`MockScript` + :class:`ScriptedModel`) and the token-hash embedder
make the whole pipeline runnable and reproducible without network access.
"""

from __future__ import annotations

import datetime as dt
import fnmatch
import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Transport-level failure talking to a provider."""


class MockExhausted(BackendError):
    """No rule of a :class:`MockScript` matched the request."""


class FormatError(ValueError):
    """Backend output could not be parsed into the expected structure."""


class FetchError(BackendError):
    """A web page could not be retrieved."""


# Step names a request may carry.  Scripts route on these.
ROLE_TAGS = frozenset(
    {
        "concept.extract",
        "concept.disambiguate",
        "concept.describe",
        "concept.metadata",
        "concept.potential",
        "tree.build",
        "tree.top_down",
        "tree.expand",
        "expansion.keywords",
        "hypothesis.generate",
        "hypothesis.relevance_isolated",
        "hypothesis.relevance_relative",
        "hypothesis.impact",
        "explorer",
        "verifier.decompose",
        "verifier",
        "sql.generate",
        "sql.patterns",
        "sql.verify",
        "sql.analyze",
        "doc.decide",
        "doc.decompose",
        "doc.hyde",
        "doc.reflect",
        "doc.enhance",
        "doc.answer",
        "doc.synthesize",
        "web.strategy",
        "web.summarize",
        "web.aggregate",
        "report.outline",
        "report.title",
        "report.section",
        "report.chart",
        "report.audit",
        "poster",
        "meta.persona",
        "meta.audience",
        "meta.highlight",
        "meta.entities",
        "meta.clusters",
        "meta.assign",
        "meta.themes",
        "meta.enrich",
        "meta.condense",
        "meta.subject",
        "meta.category",
        "meta.overview",
        "meta.core_themes",
        "meta.implications",
        "meta.recommendations",
        "meta.metrics",
        "eval.claims",
        "eval.judge",
        "eval.quality",
        "eval.distinct",
    }
)


@dataclass
class Message:
    speaker: str  # "user" | "assistant"
    text: str


@dataclass
class ModelRequest:
    role_tag: str
    system: str
    messages: list[Message] = field(default_factory=list)
    temperature: float = 0.0
    max_output: Optional[int] = None

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"unregistered role tag {self.role_tag!r}")

    @property
    def last_text(self) -> str:
        return self.messages[-1].text if self.messages else self.system

    def full_text(self) -> str:
        return "\n".join([self.system, *(m.text for m in self.messages)])


class ModelBackend(Protocol):
    def complete(self, request: ModelRequest) -> str: ...


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass
class SearchResult:
    title: str
    snippet: str
    url: str
    date: Optional[str] = None  # ISO yyyy-mm-dd


class SearchProvider(Protocol):
    def search(self, query: str, time_range: Optional[str] = None) -> list[SearchResult]: ...


class PageFetcher(Protocol):
    def fetch(self, url: str) -> str: ...


class Clock(Protocol):
    def now(self) -> dt.datetime: ...


class SystemClock:
    def now(self) -> dt.datetime:
        return dt.datetime.now(dt.timezone.utc).replace(microsecond=0)


class FrozenClock:
    def __init__(self, iso: str = "2026-01-15T00:00:00+00:00"):
        self._now = dt.datetime.fromisoformat(iso.replace("Z", "+00:00"))

    def now(self) -> dt.datetime:
        return self._now


# ---------------------------------------------------------------------------
# Scripted mock model
# ---------------------------------------------------------------------------

Responder = Union[str, Callable[[ModelRequest], str]]


@dataclass
class MockRule:
    response: Responder
    role: Optional[str] = None  # fnmatch pattern over role_tag
    match: Optional[str] = None  # substring (or regex) over the request text
    regex: bool = False
    scope: str = "all"  # "all" = system + messages, "last" = last message only
    repeat: Optional[int] = None  # None = unlimited

    def matches(self, request: ModelRequest) -> bool:
        if self.role is not None and not fnmatch.fnmatchcase(request.role_tag, self.role):
            return False
        if self.match is None:
            return True
        haystack = request.last_text if self.scope == "last" else request.full_text()
        if self.regex:
            return re.search(self.match, haystack, re.S) is not None
        return self.match in haystack


class MockScript:
    """Ordered rule list; the first live matching rule answers."""

    def __init__(self, rules: Iterable[MockRule] = (), **extras: Any):
        self.rules = list(rules)
        self.extras = extras
        self._used = [0] * len(self.rules)
        self._lock = threading.Lock()

    def add(self, response: Responder, role: Optional[str] = None, match: Optional[str] = None,
            *, regex: bool = False, scope: str = "all", repeat: Optional[int] = None) -> "MockScript":
        self.rules.append(MockRule(response, role, match, regex, scope, repeat))
        self._used.append(0)
        return self

    def respond(self, request: ModelRequest) -> str:
        with self._lock:
            for i, rule in enumerate(self.rules):
                if rule.repeat is not None and self._used[i] >= rule.repeat:
                    continue
                if rule.matches(request):
                    self._used[i] += 1
                    chosen = rule
                    break
            else:
                raise MockExhausted(
                    f"no script rule for role {request.role_tag!r}: {request.last_text[:120]!r}"
                )
        resp = chosen.response
        return resp(request) if callable(resp) else resp

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        rules = [
            MockRule(
                response=r["response"] if isinstance(r["response"], str) else json.dumps(r["response"]),
                role=r.get("role"),
                match=r.get("match"),
                regex=bool(r.get("regex", False)),
                scope=r.get("scope", "all"),
                repeat=r.get("repeat"),
            )
            for r in data.get("rules", [])
        ]
        extras = {k: v for k, v in data.items() if k != "rules"}
        return cls(rules, **extras)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MockScript":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        script = cls.from_dict(data)
        script.extras.setdefault("base_dir", str(path.parent))
        return script


class ScriptedModel:
    """A model handle answering from a shared :class:`MockScript`.

    Every request is kept in ``calls`` so tests can assert on prompt inputs.
    """

    def __init__(self, script: MockScript, name: str = "mock"):
        self.script = script
        self.name = name
        self.calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> str:
        with self._lock:
            self.calls.append(request)
        return self.script.respond(request)


class RetryingModel:
    """Wraps a backend with bounded retries on transport errors."""

    def __init__(self, inner: ModelBackend, attempts: int = 3, backoff: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.inner = inner
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep

    def complete(self, request: ModelRequest) -> str:
        for attempt in range(1, self.attempts + 1):
            try:
                return self.inner.complete(request)
            except MockExhausted:
                raise
            except BackendError as exc:
                if attempt == self.attempts:
                    raise
                logger.warning("backend error on %s (attempt %d): %s", request.role_tag, attempt, exc)
                self._sleep(self.backoff * 2 ** (attempt - 1))
        raise AssertionError("unreachable")


class HttpChatModel:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, base_url: str, model: str, api_key: str = "", timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, request: ModelRequest) -> str:
        import httpx

        messages = [{"role": "system", "content": request.system}]
        messages += [{"role": m.speaker, "content": m.text} for m in request.messages]
        body: dict[str, Any] = {"model": self.model, "messages": messages,
                                "temperature": request.temperature}
        if request.max_output:
            body["max_tokens"] = request.max_output
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = httpx.post(f"{self.base_url}/chat/completions", json=body,
                              headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, KeyError, IndexError) as exc:
            raise BackendError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


class HashEmbedder:
    """Deterministic token-hash embedder.

    Each lowercase token maps to a seeded Gaussian vector derived from a hash
    of the token; a text embeds to the normalized sum.  Texts sharing words
    therefore have positive cosine, which keeps retrieval in mocks meaningful.
    ``overrides`` pins exact vectors for specific texts.
    """

    def __init__(self, dim: int = 256, seed: int = 0,
                 overrides: Optional[dict[str, Sequence[float]]] = None):
        self.dim = dim
        self.seed = seed
        self.overrides = {k: np.asarray(v, dtype=float) for k, v in (overrides or {}).items()}
        self.calls: list[list[str]] = []
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dim)
            self._cache[token] = vec
        return vec

    def _embed_one(self, text: str) -> np.ndarray:
        if text in self.overrides:
            v = self.overrides[text]
            if v.shape != (self.dim,):
                raise ValueError(f"override for {text!r} has shape {v.shape}, expected ({self.dim},)")
            return v
        tokens = _TOKEN.findall(text.lower()) or ["<empty>"]
        return np.sum([self._token_vec(t) for t in tokens], axis=0)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        with self._lock:
            self.calls.append(texts)
            if not texts:
                return np.zeros((0, self.dim))
            return normalize_rows(np.vstack([self._embed_one(t) for t in texts]))


class HttpEmbedder:
    """OpenAI-compatible ``/embeddings`` client."""

    def __init__(self, base_url: str, model: str, dim: int, api_key: str = ""):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key = api_key

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        if not texts:
            return np.zeros((0, self.dim))
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = httpx.post(f"{self.base_url}/embeddings", headers=headers, timeout=120.0,
                              json={"model": self.model, "input": list(texts)})
            resp.raise_for_status()
            rows = [d["embedding"] for d in resp.json()["data"]]
        except (httpx.HTTPError, KeyError) as exc:
            raise BackendError(str(exc)) from exc
        return normalize_rows(np.asarray(rows, dtype=float))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return normalize_rows(np.atleast_2d(a)) @ normalize_rows(np.atleast_2d(b)).T


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

TIME_RANGES = {"past day": 1, "past week": 7, "past month": 30, "past year": 365}


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


class FixtureSearch:
    """Replays stored search results keyed by normalized query."""

    def __init__(self, results: Optional[dict[str, list[dict]]] = None,
                 clock: Optional[Clock] = None):
        self.results = {normalize_query(k): v for k, v in (results or {}).items()}
        self.clock = clock or FrozenClock()
        self.calls: list[tuple[str, Optional[str]]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_dir(cls, path: Union[str, Path], clock: Optional[Clock] = None) -> "FixtureSearch":
        results: dict[str, list[dict]] = {}
        for f in sorted(Path(path).glob("*.json")):
            data = json.loads(f.read_text(encoding="utf-8"))
            results[data["query"]] = data["results"]
        return cls(results, clock)

    def search(self, query: str, time_range: Optional[str] = None) -> list[SearchResult]:
        with self._lock:
            self.calls.append((query, time_range))
        rows = [SearchResult(**r) for r in self.results.get(normalize_query(query), [])]
        days = TIME_RANGES.get((time_range or "").strip().lower())
        if days is None:
            return rows
        cutoff = self.clock.now().date() - dt.timedelta(days=days)
        # undated rows cannot be shown stale, so they are kept
        return [r for r in rows if r.date is None or dt.date.fromisoformat(r.date) >= cutoff]


class FixturePages:
    def __init__(self, pages: Optional[dict[str, str]] = None):
        self.pages = dict(pages or {})

    def fetch(self, url: str) -> str:
        try:
            return self.pages[url]
        except KeyError:
            raise FetchError(f"page unavailable: {url}") from None


# ---------------------------------------------------------------------------
# Structured-output helpers shared by every module
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.S)


def extract_json(text: str) -> Any:
    """Pull the first JSON value out of model output (fenced block preferred)."""
    for block in _FENCE.findall(text):
        try:
            return json.loads(block)
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "[{":
            try:
                value, _ = decoder.raw_decode(text[i:])
                return value
            except json.JSONDecodeError:
                continue
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        raise FormatError("no JSON value found in output") from None


def extract_tag(text: str, tag: str, required: bool = True) -> Optional[str]:
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.S)
    if m is None:
        if required:
            raise FormatError(f"missing <{tag}>...</{tag}>")
        return None
    return m.group(1).strip()


def ask(model: ModelBackend, request: ModelRequest, parse: Callable[[str], Any],
        retries: int = 3) -> Any:
    """Complete and parse, echoing parse errors back to the model.

    Up to ``retries`` re-prompts follow the first attempt; the final
    :class:`FormatError` propagates to the caller.
    """
    messages = list(request.messages)
    for attempt in range(retries + 1):
        req = ModelRequest(request.role_tag, request.system, messages,
                           request.temperature, request.max_output)
        text = model.complete(req)
        try:
            return parse(text)
        except FormatError as exc:
            logger.info("%s output rejected (attempt %d): %s", request.role_tag, attempt + 1, exc)
            if attempt == retries:
                raise
            messages = messages + [
                Message("assistant", text),
                Message("user", f"Your previous output was invalid: {exc}. "
                                "Respond again, following the required format exactly."),
            ]
    raise AssertionError("unreachable")


def ask_json(model: ModelBackend, request: ModelRequest,
             validate: Optional[Callable[[Any], Any]] = None, retries: int = 3) -> Any:
    def parse(text: str) -> Any:
        value = extract_json(text)
        return validate(value) if validate else value

    return ask(model, request, parse, retries)


def user(text: str) -> list[Message]:
    return [Message("user", text)]


# ---------------------------------------------------------------------------
# Bundle + config
# ---------------------------------------------------------------------------


@dataclass
class Backends:
    model: ModelBackend
    verifier_model: ModelBackend
    embedder: Embedder
    search: SearchProvider
    fetcher: PageFetcher
    clock: Clock
    max_workers: int = 1

    def today(self) -> str:
        return self.clock.now().date().isoformat()


def mock_backends(script: MockScript) -> Backends:
    """Build a fully offline bundle from a script and its ``extras``."""
    ex = script.extras
    clock = FrozenClock(ex.get("clock", "2026-01-15T00:00:00+00:00"))
    emb = ex.get("embedding", {})
    search = ex.get("search", {})
    return Backends(
        model=ScriptedModel(script, "explorer"),
        verifier_model=ScriptedModel(script, "verifier"),
        embedder=HashEmbedder(emb.get("dim", 256), emb.get("seed", 0), emb.get("overrides")),
        search=FixtureSearch(search.get("results", {}), clock),
        fetcher=FixturePages(search.get("pages", {})),
        clock=clock,
        max_workers=int(ex.get("max_workers", 1)),
    )


def backends_from_config(cfg: dict) -> Backends:
    """Provider config: ``{models: {default, verifier}, embedding, search, clock}``."""
    models = cfg.get("models", {})

    def build(spec: dict) -> ModelBackend:
        return RetryingModel(HttpChatModel(spec["base_url"], spec["model"], spec.get("api_key", "")),
                             attempts=int(spec.get("attempts", 3)))

    default = models.get("default")
    if default is None:
        raise ValueError("provider config needs models.default")
    verifier = models.get("verifier", default)
    emb = cfg.get("embedding", {})
    embedder: Embedder
    if "base_url" in emb:
        embedder = HttpEmbedder(emb["base_url"], emb["model"], int(emb["dim"]), emb.get("api_key", ""))
    else:
        embedder = HashEmbedder(int(emb.get("dim", 256)), int(emb.get("seed", 0)))
    clock: Clock = FrozenClock(cfg["clock"]) if cfg.get("clock") else SystemClock()
    search_cfg = cfg.get("search", {})
    if "fixture" in search_cfg:
        search = FixtureSearch.from_dir(search_cfg["fixture"], clock)
    else:
        search = FixtureSearch({}, clock)
    return Backends(build(default), build(verifier), embedder, search,
                    FixturePages(search_cfg.get("pages", {})), clock,
                    int(cfg.get("max_workers", 4)))
