import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from insightmap.map_model import ExplorationMap, NodeKind, Origin  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def random_map(rng: random.Random, max_nodes: int = 100, concepts: bool = True) -> ExplorationMap:
    """Random well-formed Topic Tree with hypotheses and insights.

    Topic depth stays within four levels; concepts hang off leaf topics.
    """
    m = ExplorationMap.with_root("random goal")
    root = m.root
    topics = [(root, 0)]
    target = rng.randint(3, max_nodes)
    while len(m.nodes) < target:
        parent, depth = rng.choice(topics)
        roll = rng.random()
        if roll < 0.35 and depth < 4:
            tid = m.add_node(NodeKind.TOPIC, f"t{len(m.nodes)}", parent=parent)
            topics.append((tid, depth + 1))
        elif parent == root:
            continue
        elif roll < 0.5 and concepts:
            cid = m.add_node(NodeKind.CONCEPT, f"c{len(m.nodes)}", parent=parent)
            if rng.random() < 0.6:
                h = m.add_hypothesis(cid, f"h{len(m.nodes)}", Origin.CONCEPT_LAYER)
                if rng.random() < 0.4:
                    m.add_insight(h, "insight")
        else:
            h = m.add_hypothesis(parent, f"h{len(m.nodes)}", Origin.GENERATION_BATCH)
            if rng.random() < 0.4:
                m.add_insight(h, "insight")
    return m


@pytest.fixture
def six_node_map():
    """Root -> A -> {H1, H2, H3 -> I}; H3 is explored."""
    m = ExplorationMap.with_root("goal")
    a = m.add_node(NodeKind.TOPIC, "A", parent=m.root)
    h1 = m.add_hypothesis(a, "first", Origin.GENERATION_BATCH)
    h2 = m.add_hypothesis(a, "second", Origin.GENERATION_BATCH)
    h3 = m.add_hypothesis(a, "third", Origin.GENERATION_BATCH)
    m.add_insight(h3, "an insight")
    return m, {"A": a, "H1": h1, "H2": h2, "H3": h3}


# One line per acceptance criterion, printed after the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
