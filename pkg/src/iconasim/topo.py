"""Topology model, generators, cluster partitioning and path mathematics.

Nodes are dense integers ``0..N-1``. Links are undirected and stored once,
keyed by ``(min(a, b), max(a, b))``. Every path routine here is a pure
function of the topology it is handed; link status is read from that object,
so a cluster's believed view is just another ``Topology``.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath
from typing import Callable, Iterable, Mapping

LinkKey = tuple[int, int]

DEFAULT_CAPACITY_GBPS = 10.0
_EPS = 1e-9


class TopologyError(ValueError):
    """Invalid topology, file, or partition request."""


class LinkStatus(enum.Enum):
    UP = "up"
    DOWN = "down"


def link_key(a: int, b: int) -> LinkKey:
    return (a, b) if a < b else (b, a)


@dataclass
class Link:
    a: int
    b: int
    delay_ms: float
    capacity_gbps: float = DEFAULT_CAPACITY_GBPS
    status: LinkStatus = LinkStatus.UP
    flow_count: int = 0
    reserved_gbps: float = 0.0

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise TopologyError(f"self-loop on node {self.a}")
        if not self.delay_ms > 0:
            raise TopologyError(f"link {self.a}-{self.b}: delay must be positive")
        if not self.capacity_gbps > 0:
            raise TopologyError(f"link {self.a}-{self.b}: capacity must be positive")
        if self.a > self.b:
            self.a, self.b = self.b, self.a

    @property
    def key(self) -> LinkKey:
        return (self.a, self.b)

    @property
    def up(self) -> bool:
        return self.status is LinkStatus.UP

    @property
    def available_gbps(self) -> float:
        return self.capacity_gbps - self.reserved_gbps

    def other(self, node: int) -> int:
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise ValueError(f"node {node} not on link {self.key}")


class Topology:
    """Undirected graph of switches and links.

    ``grid_shape`` is set by :func:`build_grid` so that grid-aware partitioning
    can recover row/column coordinates (node id = row * cols + col).
    """

    def __init__(
        self,
        n_nodes: int,
        links: Iterable[Link],
        names: Mapping[int, str] | None = None,
        grid_shape: tuple[int, int] | None = None,
    ) -> None:
        self.nodes: list[int] = list(range(n_nodes))
        self.names: dict[int, str] = dict(names or {})
        self.grid_shape = grid_shape
        self.links: dict[LinkKey, Link] = {}
        self._adj: dict[int, list[tuple[int, LinkKey]]] = {n: [] for n in self.nodes}
        for link in links:
            self._add(link)
        for n in self.nodes:
            self._adj[n].sort()

    def _add(self, link: Link) -> None:
        for end in (link.a, link.b):
            if end not in self._adj:
                raise TopologyError(f"link {link.key} references unknown node {end}")
        if link.key in self.links:
            raise TopologyError(f"parallel link {link.key}")
        self.links[link.key] = link
        self._adj[link.a].append((link.b, link.key))
        self._adj[link.b].append((link.a, link.key))

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"Topology(nodes={len(self.nodes)}, links={len(self.links)})"

    def link(self, a: int, b: int) -> Link:
        return self.links[link_key(a, b)]

    def has_link(self, a: int, b: int) -> bool:
        return link_key(a, b) in self.links

    def neighbors(self, node: int) -> list[tuple[int, LinkKey]]:
        """``(neighbor, link_key)`` pairs sorted by neighbor id."""
        return self._adj[node]

    def degree(self, node: int) -> int:
        return len(self._adj[node])

    def copy(self) -> "Topology":
        return self.subgraph(self.nodes)

    def subgraph(self, nodes: Iterable[int]) -> "Topology":
        """Induced subgraph with fresh ``Link`` copies; node ids are preserved.

        The result keeps the full id range so ids stay valid, but nodes outside
        ``nodes`` are isolated.
        """
        keep = set(nodes)
        links = [
            Link(l.a, l.b, l.delay_ms, l.capacity_gbps, l.status, l.flow_count, l.reserved_gbps)
            for key, l in self.links.items()
            if l.a in keep and l.b in keep
        ]
        sub = Topology(len(self.nodes), links, self.names, self.grid_shape)
        return sub

    def components(self, nodes: Iterable[int] | None = None, only_up: bool = False) -> list[set[int]]:
        pool = set(self.nodes if nodes is None else nodes)
        seen: set[int] = set()
        comps = []
        for start in sorted(pool):
            if start in seen:
                continue
            comp = {start}
            stack = [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                for v, key in self._adj[u]:
                    if v in pool and v not in seen and (not only_up or self.links[key].up):
                        seen.add(v)
                        comp.add(v)
                        stack.append(v)
            comps.append(comp)
        return comps

    def is_connected(self, nodes: Iterable[int] | None = None) -> bool:
        return len(self.components(nodes)) <= 1


# --------------------------------------------------------------------------
# generators and loading


def build_grid(rows: int, cols: int, link_delay_ms: float, capacity_gbps: float = DEFAULT_CAPACITY_GBPS) -> Topology:
    if rows < 2 or cols < 2:
        raise TopologyError(f"grid dimensions must be >= 2, got {rows}x{cols}")
    links = []
    for r in range(rows):
        for c in range(cols):
            n = r * cols + c
            if c + 1 < cols:
                links.append(Link(n, n + 1, link_delay_ms, capacity_gbps))
            if r + 1 < rows:
                links.append(Link(n, n + cols, link_delay_ms, capacity_gbps))
    return Topology(rows * cols, links, grid_shape=(rows, cols))


def parse_topology(text: str, source: str = "<string>") -> Topology:
    """Parse the line-oriented ``node``/``link`` format.

    Node ids must form the dense range ``0..N-1``; links may only reference
    declared nodes. Errors carry ``source:line``.
    """
    names: dict[int, str] = {}
    raw_links: list[tuple[int, Link]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        where = f"{source}:{lineno}"
        try:
            if parts[0] == "node":
                if len(parts) not in (2, 3):
                    raise TopologyError("expected: node <id> [name]")
                nid = int(parts[1])
                if nid in names:
                    raise TopologyError(f"duplicate node {nid}")
                names[nid] = parts[2] if len(parts) == 3 else str(nid)
            elif parts[0] == "link":
                if len(parts) != 5:
                    raise TopologyError("expected: link <a> <b> <delay_ms> <capacity_gbps>")
                a, b = int(parts[1]), int(parts[2])
                delay, cap = float(parts[3]), float(parts[4])
                if not math.isfinite(delay) or not math.isfinite(cap):
                    raise TopologyError("non-finite link attribute")
                raw_links.append((lineno, Link(a, b, delay, cap)))
            else:
                raise TopologyError(f"unknown record {parts[0]!r}")
        except (TopologyError, ValueError) as exc:
            raise TopologyError(f"{where}: {exc}") from None

    n = len(names)
    if sorted(names) != list(range(n)):
        raise TopologyError(f"{source}: node ids must be dense 0..{n - 1}")
    topo = Topology(n, [], names)
    for lineno, link in raw_links:
        try:
            topo._add(link)
        except TopologyError as exc:
            raise TopologyError(f"{source}:{lineno}: {exc}") from None
    for node in topo.nodes:
        topo._adj[node].sort()
    if n == 0:
        raise TopologyError(f"{source}: no nodes")
    if not topo.is_connected():
        raise TopologyError(f"{source}: topology is disconnected")
    return topo


def load_topology(path: str | FsPath) -> Topology:
    """Load a topology file. The name ``geant`` resolves to the bundled fixture."""
    if str(path) in ("geant", "geant.topo"):
        text = resources.files("iconasim.data").joinpath("geant.topo").read_text()
        return parse_topology(text, "geant.topo")
    p = FsPath(path)
    return parse_topology(p.read_text(), str(p))


# --------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class Path:
    nodes: tuple[int, ...]
    delay_ms: float

    @property
    def src(self) -> int:
        return self.nodes[0]

    @property
    def dst(self) -> int:
        return self.nodes[-1]

    @property
    def links(self) -> tuple[LinkKey, ...]:
        return tuple(link_key(u, v) for u, v in zip(self.nodes, self.nodes[1:]))

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_nodes(cls, topo: Topology, nodes: Iterable[int]) -> "Path":
        seq = tuple(nodes)
        if not seq:
            raise ValueError("empty path")
        delay = 0.0
        for u, v in zip(seq, seq[1:]):
            delay += topo.link(u, v).delay_ms
        return cls(seq, delay)

    def is_simple(self) -> bool:
        return len(set(self.nodes)) == len(self.nodes)

    def reversed(self) -> "Path":
        return Path(self.nodes[::-1], self.delay_ms)


WeightFn = Callable[[Link], float]


def delay_weight(link: Link) -> float:
    return link.delay_ms


def _dijkstra(
    topo: Topology,
    src: int,
    weight: WeightFn,
    excluded_links: frozenset | set = frozenset(),
    excluded_nodes: frozenset | set = frozenset(),
    target: int | None = None,
    ignore_status: bool = False,
) -> dict[int, tuple[float, tuple[int, ...]]]:
    """Label-setting search keyed on ``(cost, node sequence)``.

    Weights are strictly positive, so among equal-cost candidates the
    lexicographically smallest node sequence is popped first; this gives the
    deterministic tie-break without a second pass.
    """
    best: dict[int, tuple[float, tuple[int, ...]]] = {}
    heap: list[tuple[float, tuple[int, ...], float]] = [(0.0, (src,), 0.0)]
    while heap:
        key, seq, cost = heapq.heappop(heap)
        u = seq[-1]
        if u in best:
            continue
        best[u] = (cost, seq)
        if u == target:
            break
        for v, lk in topo.neighbors(u):
            if v in best or v in excluded_nodes or lk in excluded_links:
                continue
            link = topo.links[lk]
            if not ignore_status and not link.up:
                continue
            w = weight(link)
            if not math.isfinite(w):
                continue
            c = cost + w
            heapq.heappush(heap, (round(c, 9), seq + (v,), c))
    return best


def shortest_path(
    topo: Topology,
    src: int,
    dst: int,
    excluded: Iterable[LinkKey] = (),
    weight: WeightFn | None = None,
    excluded_nodes: Iterable[int] = (),
    ignore_status: bool = False,
) -> Path | None:
    """Minimum-weight simple path avoiding ``excluded`` and Down links.

    ``weight`` defaults to link delay. The returned ``Path.delay_ms`` is always
    the delay sum, whatever metric chose the path.
    """
    if src == dst:
        return Path((src,), 0.0)
    best = _dijkstra(topo, src, weight or delay_weight, frozenset(excluded), frozenset(excluded_nodes), dst,
                     ignore_status)
    if dst not in best:
        return None
    return Path.from_nodes(topo, best[dst][1])


def shortest_path_tree(topo: Topology, src: int, ignore_status: bool = False) -> dict[int, Path]:
    """Delay-shortest paths from ``src`` to every reachable node."""
    best = _dijkstra(topo, src, delay_weight, ignore_status=ignore_status)
    return {n: Path(seq, cost) for n, (cost, seq) in best.items()}


def distances_from(
    topo: Topology, sources: Iterable[int], nodes: Iterable[int] | None = None
) -> dict[int, float]:
    """Multi-source delay distances over nominal links (status ignored).

    When ``nodes`` is given the search stays inside that node set.
    """
    allowed = None if nodes is None else set(nodes)
    dist: dict[int, float] = {}
    heap = [(0.0, s) for s in sorted(set(sources))]
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if u in dist:
            continue
        dist[u] = d
        for v, lk in topo.neighbors(u):
            if v in dist or (allowed is not None and v not in allowed):
                continue
            heapq.heappush(heap, (d + topo.links[lk].delay_ms, v))
    return dist


@dataclass(frozen=True)
class CompositeWeights:
    """Per-link backup score: ``delay*d + bandwidth/avail_gbps + flows*count``."""

    delay: float = 1.0
    bandwidth: float = 1.0
    flows: float = 0.01

    def score(self, link: Link) -> float:
        avail = link.available_gbps
        if avail <= 0:
            return math.inf
        return self.delay * link.delay_ms + self.bandwidth / avail + self.flows * link.flow_count

    def path_score(self, topo: Topology, path: Path) -> float:
        return sum(self.score(topo.links[k]) for k in path.links)


def disjoint_backup_path(
    topo: Topology, primary: Path, weights: CompositeWeights | None = None
) -> Path | None:
    """Cheapest path between the primary's endpoints sharing no link with it."""
    weights = weights or CompositeWeights()
    if primary.src == primary.dst:
        return None
    return shortest_path(topo, primary.src, primary.dst, excluded=primary.links, weight=weights.score)


def is_bridge(topo: Topology, key: LinkKey, nodes: Iterable[int] | None = None) -> bool:
    """True if removing ``key`` disconnects its endpoints (within ``nodes``)."""
    a, b = key
    allowed = set(topo.nodes if nodes is None else nodes)
    seen = {a}
    stack = [a]
    while stack:
        u = stack.pop()
        for v, lk in topo.neighbors(u):
            if lk == key or v in seen or v not in allowed:
                continue
            if v == b:
                return False
            seen.add(v)
            stack.append(v)
    return True


# --------------------------------------------------------------------------
# clusters and controller placement


class PartitionMode(enum.Enum):
    GRID_QUADRANT = "grid"
    EXPLICIT = "explicit"
    GREEDY_REGION_GROW = "greedy"


@dataclass
class ClusterPlan:
    k: int
    assignment: dict[int, int]
    attachments: dict[int, frozenset[int]]
    access_delay_ms: float = 0.0
    _delays: dict[int, dict[int, float]] = field(default_factory=dict, repr=False, compare=False)

    def members(self, cluster: int) -> list[int]:
        return sorted(n for n, c in self.assignment.items() if c == cluster)

    def cluster_of(self, node: int) -> int:
        return self.assignment[node]

    @property
    def clusters(self) -> list[int]:
        return list(range(self.k))

    def is_inter(self, key: LinkKey) -> bool:
        return self.assignment[key[0]] != self.assignment[key[1]]

    def internal_links(self, topo: Topology, cluster: int) -> list[LinkKey]:
        return [k for k in topo.links if self.assignment[k[0]] == cluster == self.assignment[k[1]]]

    def inter_links(self, topo: Topology) -> list[LinkKey]:
        return [k for k in topo.links if self.is_inter(k)]

    def control_delays(self, topo: Topology) -> dict[int, float]:
        """Switch -> one-way control delay (cached per topology object)."""
        cached = self._delays.get(id(topo))
        if cached is None:
            cached = {}
            for c in self.clusters:
                dist = distances_from(topo, self.attachments[c])
                for n in self.members(c):
                    cached[n] = self.access_delay_ms + dist[n]
            self._delays[id(topo)] = cached
        return cached

    def with_access_delay(self, access_delay_ms: float) -> "ClusterPlan":
        return ClusterPlan(self.k, dict(self.assignment), dict(self.attachments), access_delay_ms)


def place_controller(topo: Topology, region: Iterable[int]) -> frozenset[int]:
    """All region nodes of minimal eccentricity inside the region subgraph."""
    nodes = sorted(set(region))
    if not nodes:
        raise TopologyError("empty region")
    ecc = {}
    for n in nodes:
        dist = distances_from(topo, [n], nodes)
        if len(dist) != len(nodes):
            raise TopologyError("region is not connected")
        ecc[n] = max(dist.values())
    low = min(ecc.values())
    return frozenset(n for n in nodes if ecc[n] <= low + _EPS)


def control_delay(plan: ClusterPlan, topo: Topology, switch: int) -> float:
    return plan.control_delays(topo)[switch]


def _bands(size: int, parts: int) -> list[int]:
    """Band index for each coordinate, splitting ``size`` into ``parts`` near-equal runs."""
    out = []
    for i in range(size):
        out.append(min(parts - 1, i * parts // size))
    return out


_GRID_LAYOUT = {1: (1, 1), 2: (1, 2), 4: (2, 2), 8: (2, 4)}


def _grid_assignment(topo: Topology, k: int) -> dict[int, int]:
    if topo.grid_shape is None:
        raise TopologyError("GridQuadrant partitioning needs a grid topology")
    if k not in _GRID_LAYOUT:
        raise TopologyError(f"GridQuadrant supports k in {sorted(_GRID_LAYOUT)}, got {k}")
    rows, cols = topo.grid_shape
    br, bc = _GRID_LAYOUT[k]
    if br > rows or bc > cols:
        raise TopologyError(f"grid {rows}x{cols} too small for k={k}")
    rb, cb = _bands(rows, br), _bands(cols, bc)
    return {r * cols + c: rb[r] * bc + cb[c] for r in range(rows) for c in range(cols)}


def _region_connected(topo: Topology, nodes: set[int]) -> bool:
    return bool(nodes) and topo.is_connected(nodes)


def _grow_regions(topo: Topology, seeds: list[int], dist: dict[int, dict[int, float]]) -> dict[int, int]:
    assignment = {s: i for i, s in enumerate(seeds)}
    regions = [{s} for s in seeds]
    k = len(seeds)
    while len(assignment) < len(topo.nodes):
        for cid in sorted(range(k), key=lambda c: (len(regions[c]), c)):
            cands = {v for u in regions[cid] for v, _ in topo.neighbors(u) if v not in assignment}
            if cands:
                v = min(cands, key=lambda v: (dist[seeds[cid]][v], v))
                assignment[v] = cid
                regions[cid].add(v)
                break
        else:
            raise TopologyError("greedy growth stalled; topology disconnected?")

    # pull boundary nodes into the smallest region while donors stay connected
    for _ in range(4 * len(topo.nodes)):
        sizes = [len(r) for r in regions]
        small = min(range(k), key=lambda c: (sizes[c], c))
        if max(sizes) <= 2 * sizes[small]:
            break
        best = None
        for u in regions[small]:
            for v, _ in topo.neighbors(u):
                donor = assignment[v]
                if donor == small or sizes[donor] <= sizes[small] + 1:
                    continue
                if not _region_connected(topo, regions[donor] - {v}):
                    continue
                cand = (-sizes[donor], dist[seeds[small]][v], v)
                if best is None or cand < best[0]:
                    best = (cand, v, donor)
        if best is None:
            break
        _, v, donor = best
        regions[donor].discard(v)
        regions[small].add(v)
        assignment[v] = small
    return assignment


def _greedy_assignment(topo: Topology, k: int) -> dict[int, int]:
    """Region growing from farthest-point seeds, multi-start.

    Every node is tried as the first seed; the remaining seeds are added
    farthest-point. Among the grown partitions, the one with the best balance
    (max/min size), then the smallest summed controller eccentricity, wins.
    """
    dist = {n: distances_from(topo, [n]) for n in topo.nodes}
    best = None
    seen = set()
    for first in topo.nodes:
        seeds = [first]
        while len(seeds) < k:
            far = max(
                (n for n in topo.nodes if n not in seeds),
                key=lambda n: (min(dist[s][n] for s in seeds), -n),
            )
            seeds.append(far)
        key = tuple(sorted(seeds))
        if key in seen:
            continue
        seen.add(key)
        assign = _grow_regions(topo, seeds, dist)
        sizes = [list(assign.values()).count(c) for c in range(k)]
        ecc = 0.0
        for c in range(k):
            region = [n for n, cc in assign.items() if cc == c]
            ecc += min(max(dist[n][m] for m in region) for n in region)
        score = (round(max(sizes) / min(sizes), 9), round(ecc, 6), key)
        if best is None or score < best[0]:
            best = (score, assign)
    # renumber clusters by their smallest node id for stable ids
    assign = best[1]
    order = sorted(range(k), key=lambda c: min(n for n, cc in assign.items() if cc == c))
    remap = {old: new for new, old in enumerate(order)}
    return {n: remap[c] for n, c in assign.items()}


def partition(
    topo: Topology,
    k: int,
    mode: PartitionMode | str = PartitionMode.GREEDY_REGION_GROW,
    assignment: Mapping[int, int] | None = None,
    access_delay_ms: float | None = None,
) -> ClusterPlan:
    """Split ``topo`` into ``k`` connected regions and place their controllers.

    ``access_delay_ms`` defaults to the nominal link delay on grids and to 0
    elsewhere.
    """
    mode = PartitionMode(mode)
    if not 1 <= k <= len(topo.nodes):
        raise TopologyError(f"infeasible cluster count {k} for {len(topo.nodes)} nodes")
    if k == 1:
        assign = {n: 0 for n in topo.nodes}
    elif mode is PartitionMode.GRID_QUADRANT:
        assign = _grid_assignment(topo, k)
    elif mode is PartitionMode.EXPLICIT:
        if assignment is None:
            raise TopologyError("Explicit partitioning requires an assignment")
        assign = {int(n): int(c) for n, c in assignment.items()}
        if set(assign) != set(topo.nodes):
            raise TopologyError("Explicit assignment must cover every node exactly once")
        if set(assign.values()) != set(range(k)):
            raise TopologyError(f"Explicit assignment must use cluster ids 0..{k - 1}")
    else:
        assign = _greedy_assignment(topo, k)

    attachments = {}
    for c in range(k):
        region = {n for n, cc in assign.items() if cc == c}
        if not _region_connected(topo, region):
            raise TopologyError(f"cluster {c} is not connected")
        attachments[c] = place_controller(topo, region)

    if access_delay_ms is None:
        if topo.grid_shape is not None:
            access_delay_ms = next(iter(topo.links.values())).delay_ms
        else:
            access_delay_ms = 0.0
    return ClusterPlan(k, assign, attachments, access_delay_ms)
