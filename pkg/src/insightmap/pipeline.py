"""Run configuration, workspace layout and the end-to-end discovery loop."""

from __future__ import annotations

import glob
import json
import logging
import os
import random
import re
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Union

from . import map_model
from .agent import AgentConfig, ExplorerVerifier, Trace, VerificationError, trace_text
from .backends import (Backends, BackendError, FormatError, MockScript, backends_from_config,
                       mock_backends)
from .citations import CitationDB
from .evaluation.suite import EvalConfig, evaluate_report
from .hypotheses import HypothesisConfig, HypothesisEngine, Weights
from .map_builder import (BuildError, BuilderConfig, build_bottom_up, build_top_down,
                          insert_seed_guided, load_corpus, web_seeds)
from .map_model import ExplorationMap, NodeId, NodeKind, id_key
from .meta import MetaConfig, MetaReporter, render_meta_markdown
from .report import Report, ReportConfig, ReportGenerator, generate_report, render_markdown, \
    render_poster, verbalized_insight
from .selection import SelectionError, select_next
from .tools import ToolRegistry
from .tools.docsearch import DocSearchTool, Passage, VectorIndex
from .tools.sql import SqlTool
from .tools.websearch import WebSearchTool

logger = logging.getLogger(__name__)

# Anything in here ends one loop iteration without aborting the run.
LOOP_ERRORS = (BackendError, FormatError, SelectionError, BuildError, VerificationError)


class ConfigError(ValueError):
    """Invalid run configuration (a usage problem, not a pipeline failure)."""


class WorkspaceBusy(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _weights(raw: Any) -> Weights:
    if raw is None:
        return Weights()
    if not isinstance(raw, dict):
        raise ConfigError("weights must be an object")
    try:
        return Weights(float(raw.get("w_r", raw.get("relevance", 0.5))),
                       float(raw.get("w_i", raw.get("impact", 0.2))),
                       float(raw.get("w_d", raw.get("diversity", 0.3))))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _prob(name: str, value: Any) -> float:
    try:
        p = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number") from None
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {p}")
    return p


@dataclass
class RunConfig:
    goal: str
    corpus: Optional[str] = None
    database: Optional[str] = None
    background: str = ""
    weights: Weights = field(default_factory=Weights)
    max_explorer_turns: int = 12
    max_verifier_turns: int = 6
    max_rounds: int = 3
    max_tries: int = 3
    doc_max_turns: int = 3
    threshold: float = 0.8
    p_expand: float = 0.0
    expansion_keywords: int = 5
    batch_size: int = 5
    guidelines: str = ""
    eval: EvalConfig = field(default_factory=EvalConfig)
    builder: BuilderConfig = field(default_factory=BuilderConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    backend: Optional[dict] = None

    @classmethod
    def from_dict(cls, data: dict, base_dir: Union[str, Path] = ".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        goal = str(data.get("goal", "")).strip()
        if not goal:
            raise ConfigError("config needs a non-empty goal")
        base = Path(base_dir)

        def path(key: str) -> Optional[str]:
            v = data.get(key)
            return None if v in (None, "") else str((base / v) if not Path(v).is_absolute() else Path(v))

        budgets = dict(data.get("budgets", {}))
        ev = dict(data.get("eval", {}))
        builder_raw = dict(data.get("builder", {}))
        if "beta" in ev and "beta" not in builder_raw:
            builder_raw["beta"] = ev["beta"]
        builder_raw.setdefault("background", data.get("background", ""))
        backend = data.get("backend")
        if isinstance(backend, str):
            ref = base / backend
            try:
                backend = json.loads(ref.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"backend config {ref}: {exc}") from exc
        try:
            cfg = cls(
                goal=goal,
                corpus=path("corpus"),
                database=path("database"),
                background=str(data.get("background", "")),
                weights=_weights(data.get("weights")),
                max_explorer_turns=int(budgets.get("max_explorer_turns", 12)),
                max_verifier_turns=int(budgets.get("max_verifier_turns", 6)),
                max_rounds=int(budgets.get("max_rounds", 3)),
                max_tries=int(budgets.get("max_tries", 3)),
                doc_max_turns=int(budgets.get("doc_max_turns", budgets.get("max_turns", 3))),
                threshold=_prob("threshold", data.get("threshold", 0.8)),
                p_expand=_prob("p_expand", data.get("p_expand", 0.0)),
                expansion_keywords=int(data.get("expansion_keywords", 5)),
                batch_size=int(data.get("batch_size", 5)),
                guidelines=str(data.get("guidelines", "")),
                eval=EvalConfig.from_dict(ev),
                builder=BuilderConfig.from_dict(builder_raw),
                meta=MetaConfig(**{k: v for k, v in data.get("meta", {}).items()
                                   if k in MetaConfig.__dataclass_fields__}),
                backend=backend,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        for name in ("max_explorer_turns", "max_verifier_turns", "max_rounds", "max_tries", "doc_max_turns"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data, p.parent)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(self.max_explorer_turns, self.max_verifier_turns, self.max_rounds,
                           self.threshold, self.guidelines)


def make_backends(cfg: RunConfig, mock_script: Optional[Union[str, Path]] = None) -> Backends:
    if mock_script is not None:
        return mock_backends(MockScript.load(mock_script))
    if not cfg.backend:
        raise ConfigError("no backend: pass --mock-script or set `backend` in the config")
    try:
        return backends_from_config(cfg.backend)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"backend config: {exc}") from exc


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------


def slug(text: str, limit: int = 40) -> str:
    s = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return s[:limit].rstrip("-") or "untitled"


class Workspace:
    """Stable on-disk layout; one run owns it at a time through the lock file."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.map_path = self.root / "map.json"
        self.citations_path = self.root / "citations.jsonl"
        self.loops_path = self.root / "loops.jsonl"
        self.traces = self.root / "traces"
        self.reports = self.root / "reports"
        self.evals = self.root / "evals"
        self.meta = self.root / "meta"
        self.lock_path = self.root / ".lock"

    def init(self) -> None:
        for d in (self.root, self.traces, self.reports, self.evals, self.meta):
            d.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def locked(self) -> Iterator[None]:
        self.init()
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise WorkspaceBusy(f"{self.lock_path} exists; another run owns this workspace") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            self.lock_path.unlink(missing_ok=True)

    def load_map(self) -> ExplorationMap:
        return map_model.load(self.map_path.read_bytes())

    def save_map(self, m: ExplorationMap) -> None:
        tmp = self.map_path.with_suffix(".tmp")
        tmp.write_bytes(map_model.save(m))
        tmp.replace(self.map_path)

    def citations(self) -> CitationDB:
        return CitationDB(self.citations_path)

    def loop_records(self) -> list[dict]:
        if not self.loops_path.exists():
            return []
        return [json.loads(line) for line in self.loops_path.read_text(encoding="utf-8").splitlines()
                if line.strip()]

    def record_loop(self, record: dict) -> None:
        with self.loops_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def report_paths(self) -> list[Path]:
        return sorted(self.reports.glob("*/report.json"))


def write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def build_map(cfg: RunConfig, backends: Backends) -> ExplorationMap:
    """Bottom-up from the corpus when one is configured, else top-down from web seeds."""
    if cfg.corpus:
        docs = load_corpus(cfg.corpus, cfg.builder.chunk_size, cfg.builder.chunk_overlap)
        if not docs:
            raise BuildError(f"corpus {cfg.corpus} holds no .txt/.md documents")
        return build_bottom_up(backends, docs, cfg.goal, cfg.builder)
    seeds = web_seeds(backends, cfg.goal, cfg.background, cfg.expansion_keywords, cfg.builder.retries)
    return build_top_down(backends, cfg.goal, seeds, cfg.builder)


def cmd_build_map(cfg: RunConfig, ws: Workspace, backends: Backends) -> ExplorationMap:
    with ws.locked():
        m = build_map(cfg, backends)
        ws.save_map(m)
    logger.info("map with %d nodes written to %s", len(m.nodes), ws.map_path)
    return m


def build_tools(cfg: RunConfig, backends: Backends, citations: CitationDB) -> ToolRegistry:
    reg = ToolRegistry()
    if cfg.database:
        reg.add(SqlTool(backends, cfg.database, citations, max_tries=cfg.max_tries,
                        guidelines=cfg.guidelines))
    if cfg.corpus:
        docs = load_corpus(cfg.corpus, cfg.builder.chunk_size, cfg.builder.chunk_overlap)
        passages = [Passage(d.text, d.metadata.get("filename", d.name), d.metadata.get("page", ""))
                    for d in docs]
        reg.add(DocSearchTool(backends, VectorIndex.build(backends.embedder, passages), citations,
                              max_turns=cfg.doc_max_turns))
    reg.add(WebSearchTool(backends, citations, background=cfg.background))
    return reg


@dataclass
class LoopRecord:
    index: int
    name: str
    status: str  # "report" | "rejected" | "failed"
    expanded: bool = False
    topic: Optional[NodeId] = None
    hypothesis: Optional[NodeId] = None
    insight: Optional[NodeId] = None
    generated: bool = False
    error: str = ""
    scores: dict = field(default_factory=dict)


def _topic_name(m: ExplorationMap, path: list[NodeId]) -> str:
    for nid in reversed(path):
        if m.node(nid).kind in (NodeKind.TOPIC, NodeKind.CONCEPT):
            return m.node(nid).name
    return "root"


class Runner:
    def __init__(self, cfg: RunConfig, ws: Workspace, backends: Backends, seed: int = 0):
        self.cfg = cfg
        self.ws = ws
        self.backends = backends
        self.rng = random.Random(seed)
        self.citations = ws.citations()
        self.engine = HypothesisEngine(backends, HypothesisConfig(
            weights=cfg.weights, batch_size=cfg.batch_size, background=cfg.background))
        self.agent = ExplorerVerifier(backends, build_tools(cfg, backends, self.citations),
                                      self.citations, cfg.agent_config())
        self.reporter = ReportGenerator(backends, self.citations, ReportConfig())

    def maybe_expand(self, m: ExplorationMap) -> bool:
        # the coin is always flipped so the random stream does not depend on p_expand
        if self.rng.random() >= self.cfg.p_expand:
            return False
        seeds = web_seeds(self.backends, m.goal, self.cfg.background, self.cfg.expansion_keywords)
        if not seeds:
            logger.info("web expansion found no seeds")
            return False
        insert_seed_guided(self.backends, m, m.root, seeds, self.cfg.builder.l_topic,
                           self.cfg.builder.l_concept)
        return True

    def loop(self, m: ExplorationMap, index: int) -> LoopRecord:
        rec = LoopRecord(index, f"{index:04d}", "failed")
        try:
            rec.expanded = self.maybe_expand(m)
            sel = select_next(m, self.engine.generate_for)
            rec.topic, rec.hypothesis, rec.generated = sel.frontier, sel.chosen, sel.generated
            rec.name = f"{index:04d}-{slug(_topic_name(m, sel.path))}"
            trace = Trace(self.ws.traces / f"{rec.name}.jsonl")
            insight = self.agent.run(m, sel.chosen, trace)
            if insight is None:
                rec.status = "rejected"
                rec.error = "verifier did not accept an insight within the round budget"
                return rec
            rec.insight = insight.node
            narrative = trace_text(trace)
            verbal = verbalized_insight(narrative, self.citations)
            hyp_text = m.hypothesis(sel.chosen).text
            report, poster = generate_report(self.reporter, verbal, m.goal, hyp_text, insight.statement)
            out = self.ws.reports / rec.name
            out.mkdir(parents=True, exist_ok=True)
            report.save(out / "report.json")
            (out / "report.md").write_text(render_markdown(report), encoding="utf-8")
            write_json(out / "poster.json", asdict(poster))
            (out / "poster.md").write_text(render_poster(poster, report), encoding="utf-8")
            scores = evaluate_report(report, self.citations, self.backends, m.goal, narrative, self.cfg.eval)
            write_json(self.ws.evals / f"{rec.name}.json", scores)
            rec.scores = scores["scaled"]
            rec.status = "report"
        except LOOP_ERRORS as exc:
            logger.error("loop %d failed: %s: %s", index, type(exc).__name__, exc)
            rec.error = f"{type(exc).__name__}: {exc}"
        return rec

    def run(self, n: int) -> list[LoopRecord]:
        if self.ws.map_path.exists():
            m = self.ws.load_map()
        else:
            logger.info("no map in workspace; building one first")
            m = build_map(self.cfg, self.backends)
            self.ws.save_map(m)
        start = len(self.ws.loop_records()) + 1
        records = []
        for i in range(start, start + n):
            rec = self.loop(m, i)
            self.ws.save_map(m)
            self.ws.record_loop(asdict(rec))
            records.append(rec)
            logger.info("loop %d: %s %s", i, rec.status, rec.error)
        return records


def cmd_run(cfg: RunConfig, ws: Workspace, backends: Backends, n: int, seed: int = 0) -> list[LoopRecord]:
    if n < 0:
        raise ConfigError("--n must be non-negative")
    with ws.locked():
        return Runner(cfg, ws, backends, seed).run(n)


def read_history(path: Union[str, Path]) -> str:
    """Exploration narrative from a trace JSONL file or a plain-text file."""
    p = Path(path)
    return trace_text(Trace.load(p)) if p.suffix == ".jsonl" else p.read_text(encoding="utf-8")


def _history_for(ws: Optional[Workspace], report_path: Path) -> str:
    if ws is None:
        return ""
    trace = ws.traces / f"{report_path.parent.name}.jsonl"
    return read_history(trace) if trace.exists() else ""


def cmd_eval(report_paths: list[Path], citations: CitationDB, backends: Optional[Backends],
             eval_cfg: EvalConfig, goal: str = "", ws: Optional[Workspace] = None,
             metrics: tuple[str, ...] = ("all",), history: Optional[str] = None) -> dict[str, dict]:
    """Scores per report path.  Reports are only read.

    ``history`` overrides the exploration narrative otherwise looked up in
    the workspace trace named after the report directory.
    """
    from .evaluation.grounding import grounding_summary

    out: dict[str, dict] = {}
    for p in report_paths:
        report = Report.load(p)
        hist = history if history is not None else _history_for(ws, p)
        if "all" in metrics:
            if backends is None:
                raise ConfigError("judged metrics need a backend")
            out[str(p)] = evaluate_report(report, citations, backends, goal or report.goal, hist, eval_cfg)
        else:
            scores: dict[str, Any] = {}
            if "ng" in metrics:
                scores["numeric_grounding"] = grounding_summary(report, citations, hist)
            judged = [x for x in metrics if x != "ng"]
            if judged:
                raise ConfigError(f"metric selection supports 'ng' or 'all', got {judged}")
            out[str(p)] = scores
    return out


def expand_reports(patterns: list[str]) -> list[Path]:
    found: list[Path] = []
    for pat in patterns:
        p = Path(pat)
        if p.is_dir():
            found.extend(sorted(p.glob("*/report.json")) or sorted(p.glob("*.json")))
        else:
            found.extend(Path(x) for x in sorted(glob.glob(pat)))
    seen: dict[Path, None] = {}
    for f in found:
        seen.setdefault(f, None)
    return list(seen)


def cmd_meta(report_paths: list[Path], backends: Backends, goal: str, config: MetaConfig,
             out_dir: Path) -> list[Path]:
    reports = {}
    for p in report_paths:
        key = p.parent.name if p.name == "report.json" else p.stem
        reports[key] = Report.load(p)
    metas, log = MetaReporter(backends, config).run(reports, goal)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, meta in enumerate(metas, 1):
        base = out_dir / f"{i:02d}-{slug(meta.category or meta.subject)}"
        meta.save(base.with_suffix(".json"))
        base.with_suffix(".md").write_text(render_meta_markdown(meta), encoding="utf-8")
        written.append(base.with_suffix(".json"))
    write_json(out_dir / "log.json", log)
    return written


def inspect_map(m: ExplorationMap) -> str:
    """Deterministic indented listing with insight-potential and exploration scores."""
    lines = [f"goal: {m.goal}"]
    seen: set[NodeId] = set()

    def visit(nid: NodeId, depth: int) -> None:
        node = m.node(nid)
        pad = "  " * depth
        if nid in seen:
            lines.append(f"{pad}{node.kind.value} {nid} {node.name} (see above)")
            return
        seen.add(nid)
        if node.kind in (NodeKind.ROOT, NodeKind.TOPIC, NodeKind.CONCEPT):
            extra = f" [potential={m.insight_potential_score(nid)} explored={m.exploration_score(nid)}]"
        elif node.kind is NodeKind.HYPOTHESIS:
            rec = m.hypothesis(nid)
            score = "unscored" if rec.scores is None else f"overall={rec.scores.overall:.2f}"
            extra = f" [{rec.status} {score} {rec.origin.value}]"
        else:
            extra = ""
        lines.append(f"{pad}{node.kind.value} {nid} {node.name}{extra}")
        for c in sorted(m.children(nid), key=id_key):
            visit(c, depth + 1)

    visit(m.root, 0)
    return "\n".join(lines) + "\n"
