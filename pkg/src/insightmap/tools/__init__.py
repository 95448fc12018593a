"""Tool subagents behind a one-call-in, one-response-out interface."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Protocol

logger = logging.getLogger(__name__)


@dataclass
class ToolCall:
    tool: str
    query: str
    params: dict[str, str] = field(default_factory=dict)


class Tool(Protocol):
    name: str
    description: str

    def run(self, query: str, params: Optional[dict[str, str]] = None) -> str: ...


class ToolRegistry:
    def __init__(self, tools: Optional[list[Tool]] = None):
        self.tools: dict[str, Tool] = {}
        for t in tools or []:
            self.add(t)

    def add(self, tool: Tool) -> None:
        if tool.name in self.tools:
            raise ValueError(f"tool {tool.name} registered twice")
        self.tools[tool.name] = tool

    @property
    def names(self) -> list[str]:
        return sorted(self.tools)

    def describe(self) -> str:
        lines = [f"- {name}: {self.tools[name].description}" for name in self.names]
        lines.append('Call a tool with {"TOOL_NAME": <name>, "QUERY": <natural-language question>}.')
        return "\n".join(lines)

    def check(self, call: ToolCall) -> Optional[str]:
        """Validation error text, or None if the call can run."""
        if call.tool not in self.tools:
            return f"unknown tool {call.tool!r}; available: {', '.join(self.names)}"
        if not call.query.strip():
            return f"tool {call.tool} needs a non-empty QUERY"
        return None

    def run(self, call: ToolCall) -> str:
        err = self.check(call)
        if err:
            raise ValueError(err)
        return self.tools[call.tool].run(call.query, call.params)
