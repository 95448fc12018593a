"""Explorer and verifier agents and the bounded loop that couples them.

The explorer answers every turn in a tagged observe / reasoning / act
layout; the act block holds JSON tool calls or the final insight.  The
verifier sees only the citation-stripped insight, checks it one sub-claim
at a time and scores each 0 or 1.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

from .backends import Backends, BackendError, FormatError, Message, ModelRequest, ask_json, extract_tag, user
from .citations import CitationDB, keys_in, strip_citations
from .map_model import ExplorationMap, NodeId, Origin
from .tools import ToolCall, ToolRegistry

logger = logging.getLogger(__name__)

FINAL_TOOL = "USER_RESPONSE"
MAX_SUBCLAIMS = 5
MAX_BRANCHES = 5


class HypothesisAction(str, Enum):
    REFINE = "REFINE_HYPOTHESIS"
    REVISE = "REVISE_HYPOTHESIS"
    KEEP = "KEEP_HYPOTHESIS"
    VALIDATE_FURTHER = "VALIDATE_FURTHER"
    USER_RESPONSE = "USER_RESPONSE"


class BranchClass(str, Enum):
    NEW = "NEW_HYPOTHESIS"
    VALIDATE_FURTHER = "VALIDATE_FURTHER"
    REFINE = "REFINE_HYPOTHESIS"
    REVISE = "REVISE_HYPOTHESIS"


class VerificationError(RuntimeError):
    pass


@dataclass
class BranchHypothesis:
    kind: BranchClass
    inspiration: str
    text: str


@dataclass
class ExplorerTurn:
    current_hypothesis: str
    observations: str
    classification: HypothesisAction
    follow_up: str
    additional: list[BranchHypothesis]
    reasoning: str
    tool_calls: list[ToolCall] = field(default_factory=list)
    final: Optional[str] = None

    @property
    def is_final(self) -> bool:
        return self.final is not None


@dataclass
class ParseFailure:
    message: str


@dataclass
class SubClaim:
    text: str
    score: Optional[int] = None
    feedback: str = ""


@dataclass
class VerificationResult:
    subclaims: list[SubClaim]
    score: float
    feedback: str


@dataclass
class Insight:
    statement: str
    citations: list[str]
    hypothesis: NodeId
    verification: Optional[VerificationResult] = None
    node: Optional[NodeId] = None


@dataclass
class AgentConfig:
    max_explorer_turns: int = 12
    max_verifier_turns: int = 6
    max_rounds: int = 3
    threshold: float = 0.8
    guidelines: str = ""
    decompose_retries: int = 2

    def __post_init__(self) -> None:
        if self.max_explorer_turns < 1 or self.max_verifier_turns < 1 or self.max_rounds < 1:
            raise ValueError("turn and round budgets must be at least 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def json_objects(text: str) -> list[Any]:
    """Every top-level JSON value in ``text``, in order (lists are flattened)."""
    decoder = json.JSONDecoder()
    out: list[Any] = []
    i = 0
    while i < len(text):
        if text[i] in "[{":
            try:
                value, end = decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                i += 1
                continue
            out.extend(value if isinstance(value, list) else [value])
            i = end
        else:
            i += 1
    return out


def _tool_call(obj: Any) -> ToolCall:
    if not isinstance(obj, dict) or not isinstance(obj.get("TOOL_NAME"), str):
        raise FormatError(f"action {json.dumps(obj)[:80]} lacks a TOOL_NAME string")
    params = {k: str(v) for k, v in obj.items() if k not in ("TOOL_NAME", "QUERY")}
    return ToolCall(obj["TOOL_NAME"], str(obj.get("QUERY", "")), params)


def parse_act(block: str) -> tuple[list[ToolCall], Optional[str]]:
    stripped = re.sub(r"```(?:json)?", "", block)
    calls = [_tool_call(o) for o in json_objects(stripped)]
    if not calls:
        raise FormatError("the <act> block holds no JSON action")
    finals = [c for c in calls if c.tool == FINAL_TOOL]
    if finals:
        if len(calls) > 1:
            raise FormatError("a USER_RESPONSE action must be the only action in <act>")
        message = finals[0].params.get("MESSAGE", "").strip()
        if not message:
            raise FormatError("the USER_RESPONSE action needs a non-empty MESSAGE")
        return [], message
    return calls, None


def _parse_branches(block: Optional[str]) -> list[BranchHypothesis]:
    if not block:
        return []
    out = []
    for body in re.findall(r"<hypothesis>(.*?)</hypothesis>", block, re.S):
        raw = extract_tag(body, "hypothesis_class")
        try:
            kind = BranchClass(raw.strip())
        except ValueError:
            raise FormatError(f"unknown hypothesis_class {raw!r}") from None
        text = extract_tag(body, "hypothesis_text")
        if text:
            out.append(BranchHypothesis(kind, extract_tag(body, "hypothesis_inspiration", required=False) or "", text))
    if len(out) > MAX_BRANCHES:
        raise FormatError(f"at most {MAX_BRANCHES} additional hypotheses, got {len(out)}")
    return out


def parse_explorer_output(text: str) -> Union[ExplorerTurn, ParseFailure]:
    """Strictly parse one explorer turn; problems come back as a value."""
    try:
        out = extract_tag(text, "output")
        observe = extract_tag(out, "observe")
        raw_cls = extract_tag(observe, "current_hypothesis_classification")
        try:
            cls = HypothesisAction(raw_cls.strip())
        except ValueError:
            raise FormatError(f"unknown current_hypothesis_classification {raw_cls!r}; "
                              f"use one of {', '.join(a.value for a in HypothesisAction)}") from None
        turn = ExplorerTurn(
            current_hypothesis=extract_tag(observe, "current_hypothesis"),
            observations=extract_tag(observe, "detailed_observations"),
            classification=cls,
            follow_up=extract_tag(observe, "follow_up_hypothesis", required=False) or "",
            additional=_parse_branches(extract_tag(observe, "additional_hypothesis", required=False)),
            reasoning=extract_tag(out, "reasoning"),
        )
        turn.tool_calls, turn.final = parse_act(extract_tag(out, "act"))
    except FormatError as exc:
        return ParseFailure(str(exc))
    if (cls is HypothesisAction.USER_RESPONSE) != turn.is_final:
        return ParseFailure("classification USER_RESPONSE must go with a final USER_RESPONSE action and "
                            "only with it")
    return turn


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


class Trace:
    """Ordered event log, optionally mirrored to a JSON-lines file."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.events: list[dict] = []
        self._lock = threading.Lock()

    def add(self, event: str, **data: Any) -> None:
        record = {"event": event, **data}
        with self._lock:
            self.events.append(record)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False, default=_jsonable) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Trace":
        t = cls()
        t.events = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return t

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]


def _jsonable(o: Any) -> Any:
    if isinstance(o, Enum):
        return o.value
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o).__name__)


def trace_text(trace: Trace) -> str:
    """Readable narrative of an exploration, used as input for reporting."""
    lines = []
    for e in trace.events:
        kind = e["event"]
        if kind == "start":
            lines.append(f"GOAL: {e['goal']}\nHYPOTHESIS: {e['hypothesis']}")
        elif kind == "explorer_turn":
            lines.append(f"\n[round {e['round']} turn {e['turn']}] {e['classification']}\n"
                         f"Observations: {e['observations']}\nReasoning: {e['reasoning']}")
        elif kind == "tool_result":
            lines.append(f"{e['tool']}({e['query']}) ->\n{e['response']}")
        elif kind == "verification":
            lines.append(f"Verifier score {e['score']:.2f}: {e['feedback']}")
        elif kind == "accepted":
            lines.append(f"\nFINAL INSIGHT: {e['statement']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


@dataclass
class ExplorerResult:
    insight: Optional[str]
    turns: int
    history: list[Message]
    aborted: Optional[str] = None


class ExplorerVerifier:
    def __init__(self, backends: Backends, tools: ToolRegistry, citations: CitationDB,
                 config: Optional[AgentConfig] = None, map_lock: Optional[threading.Lock] = None):
        self.backends = backends
        self.tools = tools
        self.citations = citations
        self.config = config or AgentConfig()
        self.map_lock = map_lock or threading.Lock()

    # -- explorer -------------------------------------------------------------

    def explorer_system(self, goal: str, hypothesis: str) -> str:
        return (
            "You investigate one hypothesis with the tools below and turn it into a single, "
            "well-supported insight or recommendation.\n"
            f"GOAL: {goal}\nHYPOTHESIS: {hypothesis}\nTODAY: {self.backends.today()}\n"
            f"TOOLS:\n{self.tools.describe()}\nGUIDELINES: {self.config.guidelines or '(none)'}\n\n"
            "Each turn: observe what the latest results changed, classify the hypothesis as one of "
            f"{', '.join(a.value for a in HypothesisAction)}, optionally propose up to "
            f"{MAX_BRANCHES} further hypotheses tagged {', '.join(b.value for b in BranchClass)}, "
            "reason about what to check next and act. Keep citation keys such as [WEB_SEARCH_1] from "
            "tool results next to the facts they support. Only finish once the claim is supported "
            "from several angles.\n"
            "Reply exactly as:\n"
            "<output><observe><current_hypothesis>..</current_hypothesis>"
            "<detailed_observations>..</detailed_observations>"
            "<current_hypothesis_classification>..</current_hypothesis_classification>"
            "<follow_up_hypothesis>..</follow_up_hypothesis>"
            "<additional_hypothesis><hypothesis><hypothesis_class>..</hypothesis_class>"
            "<hypothesis_inspiration>..</hypothesis_inspiration><hypothesis_text>..</hypothesis_text>"
            "</hypothesis></additional_hypothesis></observe>"
            "<reasoning>..</reasoning><act>..</act></output>\n"
            "<act> holds one or more tool calls as JSON, or only the final action "
            f'{{"TOOL_NAME": "{FINAL_TOOL}", "MESSAGE": "<the insight with its citations>"}}.'
        )

    def _run_tools(self, calls: list[ToolCall], trace: Trace, round_no: int, turn: int) -> str:
        def one(call: ToolCall) -> str:
            err = self.tools.check(call)
            if err:
                trace.add("tool_error", round=round_no, turn=turn, tool=call.tool, query=call.query, error=err)
                return f"ERROR in call to {call.tool!r}: {err}. The call was not executed."
            try:
                response = self.tools.run(call)
            except (FormatError, ValueError) as exc:
                response = f"ERROR from {call.tool}: {exc}"
            trace.add("tool_result", round=round_no, turn=turn, tool=call.tool, query=call.query,
                      response=response)
            return response

        if self.backends.max_workers > 1 and len(calls) > 1:
            with ThreadPoolExecutor(self.backends.max_workers) as pool:
                responses = list(pool.map(one, calls))
        else:
            responses = [one(c) for c in calls]
        return "\n\n".join(f"RESULT {i} ({c.tool}: {c.query}):\n{r}"
                           for i, (c, r) in enumerate(zip(calls, responses), 1))

    def _commit_branches(self, m: ExplorationMap, hyp: NodeId, branches: list[BranchHypothesis],
                         trace: Trace) -> list[NodeId]:
        added = []
        with self.map_lock:
            parent = m.parent(hyp)
            if parent is None:
                return added
            existing = {r.text.casefold() for r in m.hypotheses(parent)}
            for b in branches:
                if b.text.casefold() in existing:
                    continue
                nid = m.add_hypothesis(parent, b.text, Origin.EXPLORER_BRANCH)
                m.node(nid).attributes["branch_class"] = b.kind.value
                existing.add(b.text.casefold())
                added.append(nid)
                trace.add("branch_hypothesis", node=nid, text=b.text, kind=b.kind.value)
        return added

    def run_explorer(self, m: ExplorationMap, hyp: NodeId, trace: Trace,
                     history: Optional[list[Message]] = None, round_no: int = 1) -> ExplorerResult:
        record = m.hypothesis(hyp)
        system = self.explorer_system(m.goal, record.text)
        history = list(history) if history else user("Begin exploring the hypothesis.")
        for turn in range(1, self.config.max_explorer_turns + 1):
            try:
                text = self.backends.model.complete(ModelRequest("explorer", system, history))
            except BackendError as exc:
                logger.error("explorer transport failure: %s", exc)
                trace.add("aborted", round=round_no, turn=turn, error=str(exc))
                return ExplorerResult(None, turn - 1, history, str(exc))
            history = history + [Message("assistant", text)]
            parsed = parse_explorer_output(text)
            if isinstance(parsed, ParseFailure):
                trace.add("parse_error", round=round_no, turn=turn, error=parsed.message, raw=text)
                history.append(Message("user", f"Your output could not be parsed: {parsed.message}. "
                                               "Reply again in the required format."))
                continue
            trace.add("explorer_turn", round=round_no, turn=turn, classification=parsed.classification.value,
                      current_hypothesis=parsed.current_hypothesis, observations=parsed.observations,
                      follow_up=parsed.follow_up, reasoning=parsed.reasoning,
                      tool_calls=[asdict(c) for c in parsed.tool_calls], final=parsed.final)
            if parsed.additional:
                self._commit_branches(m, hyp, parsed.additional, trace)
            if parsed.is_final:
                missing = self.citations.dangling(parsed.final)
                if missing:
                    trace.add("parse_error", round=round_no, turn=turn, error=f"unknown citation keys {missing}")
                    history.append(Message("user", "The insight cites keys that no tool returned: "
                                                   f"{', '.join(missing)}. Cite only keys from tool results."))
                    continue
                return ExplorerResult(parsed.final, turn, history)
            history.append(Message("user", self._run_tools(parsed.tool_calls, trace, round_no, turn)))
        return ExplorerResult(None, self.config.max_explorer_turns, history)

    # -- verifier -------------------------------------------------------------

    def decompose_subclaims(self, statement: str) -> list[SubClaim]:
        system = (
            f"Split the insight into at most {MAX_SUBCLAIMS} atomic sub-claims. Each must be concrete, "
            "checkable on its own against data, keep the insight's substance and add nothing new.\n"
            'Reply with fenced JSON: {"sub_claims": [str, ...]}'
        )

        def check(v: Any) -> list[SubClaim]:
            items = v.get("sub_claims") if isinstance(v, dict) else None
            if not isinstance(items, list):
                raise FormatError('expected {"sub_claims": [...]}')
            claims = [str(c).strip() for c in items if str(c).strip()]
            if not 1 <= len(claims) <= MAX_SUBCLAIMS:
                raise FormatError(f"need 1 to {MAX_SUBCLAIMS} sub-claims, got {len(claims)}")
            return [SubClaim(c) for c in claims]

        req = ModelRequest("verifier.decompose", system, user(f"INSIGHT: {statement}"))
        try:
            return ask_json(self.backends.verifier_model, req, check, self.config.decompose_retries)
        except FormatError as exc:
            raise VerificationError(f"sub-claim decomposition failed: {exc}") from exc

    def _parse_verifier(self, text: str) -> Union[ToolCall, tuple[int, str]]:
        objs = json_objects(re.sub(r"```(?:json)?", "", text))
        if len(objs) != 1:
            raise FormatError(f"emit exactly one action per turn, got {len(objs)}")
        call = _tool_call(objs[0])
        if call.tool != FINAL_TOOL:
            return call
        score = objs[0].get("SCORE")
        if score not in (0, 1) or isinstance(score, bool):
            raise FormatError("SCORE must be 0 or 1")
        return int(score), str(objs[0].get("MESSAGE", ""))

    def verify_subclaim(self, statement: str, claim: SubClaim, trace: Optional[Trace] = None) -> SubClaim:
        system = (
            "Check one sub-claim of an insight against the data using the tools. You have no access "
            "to how the insight was produced; gather evidence yourself.\n"
            f"INSIGHT: {statement}\nSUB-CLAIM: {claim.text}\nTODAY: {self.backends.today()}\n"
            f"TOOLS:\n{self.tools.describe()}\nGUIDELINES: {self.config.guidelines or '(none)'}\n"
            "Each turn emit exactly one JSON action: a tool call, or the verdict "
            f'{{"TOOL_NAME": "{FINAL_TOOL}", "SCORE": 0 or 1, "MESSAGE": "<what you checked and why>"}}. '
            "SCORE is 1 only when the evidence directly supports the sub-claim."
        )
        history = user(f"Verify the sub-claim: {claim.text}")
        for turn in range(1, self.config.max_verifier_turns + 1):
            text = self.backends.verifier_model.complete(ModelRequest("verifier", system, history))
            history = history + [Message("assistant", text)]
            try:
                action = self._parse_verifier(text)
            except FormatError as exc:
                history.append(Message("user", f"Invalid action: {exc}."))
                continue
            if isinstance(action, tuple):
                return SubClaim(claim.text, action[0], action[1])
            err = self.tools.check(action)
            if err:
                history.append(Message("user", f"ERROR: {err}. The call was not executed."))
                continue
            try:
                response = self.tools.run(action)
            except (FormatError, ValueError) as exc:
                response = f"ERROR from {action.tool}: {exc}"
            if trace:
                trace.add("verifier_tool", claim=claim.text, tool=action.tool, query=action.query)
            history.append(Message("user", f"RESULT ({action.tool}: {action.query}):\n{response}"))
        return SubClaim(claim.text, 0, f"no verdict within {self.config.max_verifier_turns} turns")

    def verify_insight(self, statement: str, trace: Optional[Trace] = None) -> VerificationResult:
        clean = strip_citations(statement)
        claims = self.decompose_subclaims(clean)
        if self.backends.max_workers > 1 and len(claims) > 1:
            with ThreadPoolExecutor(self.backends.max_workers) as pool:
                scored = list(pool.map(lambda c: self.verify_subclaim(clean, c, trace), claims))
        else:
            scored = [self.verify_subclaim(clean, c, trace) for c in claims]
        score = sum(c.score for c in scored) / len(scored)
        feedback = "\n".join(f"- ({c.score}) {c.text}: {c.feedback}" for c in scored)
        return VerificationResult(scored, score, feedback)

    # -- outer loop -----------------------------------------------------------

    def run(self, m: ExplorationMap, hyp: NodeId, trace: Optional[Trace] = None) -> Optional[Insight]:
        trace = trace or Trace()
        record = m.hypothesis(hyp)
        if record.explored:
            raise ValueError(f"hypothesis {hyp} is already explored")
        trace.add("start", goal=m.goal, hypothesis=record.text, node=hyp)
        history: Optional[list[Message]] = None
        cfg = self.config
        for round_no in range(1, cfg.max_rounds + 1):
            result = self.run_explorer(m, hyp, trace, history, round_no)
            history = result.history
            if result.aborted:
                break
            if result.insight is None:
                trace.add("no_insight", round=round_no)
                history = history + [Message("user", "The turn budget ran out without a final insight. "
                                                     "Continue and submit one when the evidence allows.")]
                continue
            try:
                verdict = self.verify_insight(result.insight, trace)
            except VerificationError as exc:
                trace.add("verification_failed", round=round_no, error=str(exc))
                history = history + [Message("user", "The insight could not be broken into checkable claims. "
                                                     "Restate it with concrete, checkable facts.")]
                continue
            trace.add("verification", round=round_no, score=verdict.score, feedback=verdict.feedback,
                      subclaims=[asdict(c) for c in verdict.subclaims], statement=result.insight)
            if verdict.score >= cfg.threshold:
                insight = Insight(result.insight, keys_in(result.insight), hyp, verdict)
                with self.map_lock:
                    insight.node = m.add_insight(hyp, result.insight, {
                        "verification_score": repr(verdict.score),
                        "citations": " ".join(insight.citations),
                        "round": str(round_no),
                    })
                trace.add("accepted", round=round_no, statement=result.insight, node=insight.node,
                          score=verdict.score, citations=insight.citations)
                return insight
            history = history + [Message("user", f"The verifier scored the insight {verdict.score:.2f}, "
                                                 f"below the required {cfg.threshold:.2f}. Feedback:\n"
                                                 f"{verdict.feedback}\nRevise the insight accordingly.")]
        trace.add("rejected", rounds=cfg.max_rounds)
        return None
