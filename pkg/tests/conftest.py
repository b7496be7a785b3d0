from __future__ import annotations

import networkx as nx
import pytest

from iconasim.topo import CompositeWeights, Link, Path, Topology, link_key, load_topology


def to_nx(topo: Topology, only_up: bool = True) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(topo.nodes)
    for key, link in topo.links.items():
        if only_up and not link.up:
            continue
        g.add_edge(*key, delay=link.delay_ms)
    return g


def make_topo(n: int, edges: list[tuple[int, int, float]]) -> Topology:
    return Topology(n, [Link(a, b, d) for a, b, d in edges])


VERDICTS = pytest.StashKey[list]()


def record_verdict(config: pytest.Config, line: str) -> None:
    config.stash.setdefault(VERDICTS, []).append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def brute_force_backup(topo: Topology, primary: Path, weights: CompositeWeights) -> float | None:
    """Cheapest composite score over every simple path avoiding the primary's links."""
    banned = set(primary.links)
    best = None
    for q in nx.all_simple_paths(to_nx(topo), primary.src, primary.dst):
        keys = [link_key(u, v) for u, v in zip(q, q[1:])]
        if banned & set(keys):
            continue
        score = sum(weights.score(topo.links[k]) for k in keys)
        best = score if best is None else min(best, score)
    return best


@pytest.fixture(scope="session")
def geant() -> Topology:
    return load_topology("geant")
