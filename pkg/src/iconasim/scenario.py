"""Scenario configuration and the reroute / startup experiments.

A run is one (k, repetition) pair. Every stochastic choice of a run draws
from one generator seeded by ``(seed, rep)``, in this order: the
``paths_total`` end-point pairs, then the failed link, then any redraws
needed to hit the requested load on it. Reconnect jitter uses the plane's
own stream derived from the same pair, so every k sees the same draws.
"""

from __future__ import annotations

import enum
import json
import logging
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath
from typing import Any, Sequence

from .ctrl import ComputeModel, ControlConfig, ControlPlane
from .icona import IconaLayer
from .metrics import LatencySample
from .simcore import FailureAction, FailurePlan
from .topo import (
    ClusterPlan, CompositeWeights, LinkKey, Topology, TopologyError, build_grid, is_bridge,
    link_key, load_topology, partition, shortest_path_tree,
)

log = logging.getLogger(__name__)

DATA_DIR = FsPath(__file__).resolve().parent / "data"
SELECTORS = ("auto", "intra", "inter")
REDRAW_BOUND = 50  # endpoint redraws per slot before forcing a path through the link


class ScenarioError(RuntimeError):
    """The configuration cannot be realised."""


class InvariantViolation(AssertionError):
    """A model invariant failed at quiescence."""


class ExperimentKind(enum.Enum):
    REROUTE_GRID = "reroute-grid"
    REROUTE_GEANT = "reroute-geant"
    STARTUP = "startup"
    MICRO = "micro"


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    kind: str = "reroute-geant"
    topology: dict[str, Any] = field(default_factory=lambda: {"file": "geant"})
    clusters: list[int] = field(default_factory=lambda: [1])
    partition: str = "greedy"
    assignment: dict[str, int] | None = None
    total_instances: int | None = 8
    instances_per_cluster: int | None = None
    paths_total: int = 1000
    paths_on_failed_link: int = 100
    failed_link: Any = "intra"
    repetitions: int = 20
    seed: int = 1
    t_fail_ms: float = 1000.0
    workers: int = 1
    # model constants
    access_delay_ms: float | None = None
    c0_ms: float = 0.1
    c1_ms: float = 0.005
    handshake_ms: float = 50.0
    failover_detect_ms: float = 200.0
    lldp_period_ms: float = 1000.0
    install_timeout_ms: float = 5000.0
    reconnect_jitter_ms: float = 100.0
    intra_bus_delay_ms: float = 0.5
    reserve_timeout_ms: float = 3000.0
    tm_period_ms: float = 5000.0
    tm_periodic: bool = True
    max_retries: int = 10
    bm_holddown_ms: float = 1000.0
    bil_mode: str = "divergence"
    weights: dict[str, float] = field(default_factory=dict)
    base_dir: str | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        try:
            ExperimentKind(self.kind)
        except ValueError:
            raise ScenarioError(f"unknown experiment kind {self.kind!r}") from None
        if isinstance(self.clusters, int):
            self.clusters = [self.clusters]
        if not self.clusters or any(int(k) < 1 for k in self.clusters):
            raise ScenarioError(f"bad cluster counts {self.clusters}")
        self.clusters = [int(k) for k in self.clusters]
        if self.repetitions < 1:
            raise ScenarioError("repetitions must be at least 1")
        if not 0 <= self.paths_on_failed_link <= self.paths_total:
            raise ScenarioError("need 0 <= paths_on_failed_link <= paths_total")
        if not isinstance(self.failed_link, str):
            if len(self.failed_link) != 2:
                raise ScenarioError(f"explicit failed link must be a pair, got {self.failed_link}")
            self.failed_link = [int(x) for x in self.failed_link]
        elif self.failed_link not in SELECTORS:
            raise ScenarioError(f"unknown failed_link selector {self.failed_link!r}")
        if self.instances_per_cluster is None:
            if self.total_instances is None:
                raise ScenarioError("set total_instances or instances_per_cluster")
            for k in self.clusters:
                if self.total_instances % k:
                    raise ScenarioError(f"{self.total_instances} instances do not split over {k} clusters")
        try:
            self.control_config()
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str | None = None) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ScenarioError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data, base_dir=base_dir)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | FsPath) -> "ScenarioConfig":
        path = FsPath(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ScenarioError(f"{path}: expected a JSON object")
        return cls.from_dict(data, str(path.parent))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def instances_for(self, k: int) -> int:
        if self.instances_per_cluster is not None:
            return self.instances_per_cluster
        assert self.total_instances is not None
        return self.total_instances // k

    def control_config(self) -> ControlConfig:
        return ControlConfig(
            compute=ComputeModel(self.c0_ms, self.c1_ms),
            handshake_ms=self.handshake_ms,
            failover_detect_ms=self.failover_detect_ms,
            lldp_period_ms=self.lldp_period_ms,
            install_timeout_ms=self.install_timeout_ms,
            reconnect_jitter_ms=self.reconnect_jitter_ms,
            intra_bus_delay_ms=self.intra_bus_delay_ms,
            reserve_timeout_ms=self.reserve_timeout_ms,
            tm_period_ms=self.tm_period_ms,
            max_retries=self.max_retries,
            bm_holddown_ms=self.bm_holddown_ms,
            weights=CompositeWeights(**self.weights),
            bil_mode=self.bil_mode,
            tm_periodic=self.tm_periodic,
        )

    def build_topology(self) -> Topology:
        spec = self.topology
        try:
            if "grid" in spec:
                rows, cols = spec["grid"]
                return build_grid(int(rows), int(cols), float(spec.get("delay_ms", 5.0)))
            if "file" in spec:
                name = spec["file"]
                if name == "geant":
                    return load_topology(DATA_DIR / "geant.topo")
                path = FsPath(name)
                if not path.is_absolute() and self.base_dir is not None:
                    path = FsPath(self.base_dir) / path
                return load_topology(path)
        except (TopologyError, OSError, ValueError, TypeError) as exc:
            raise ScenarioError(f"bad topology {spec}: {exc}") from None
        raise ScenarioError(f"topology needs 'grid' or 'file', got {spec}")

    def build_plan(self, topo: Topology, k: int) -> ClusterPlan:
        assignment = None
        if self.assignment is not None:
            assignment = {int(n): int(c) for n, c in self.assignment.items()}
        try:
            return partition(topo, k, self.partition, assignment, self.access_delay_ms)
        except (TopologyError, ValueError) as exc:
            raise ScenarioError(f"cannot partition into {k} clusters: {exc}") from None


def plane_label(k: int) -> str:
    return "ONOS" if k == 1 else f"ICONA-{k}"


# --------------------------------------------------------------------------
# workload


class PathCache:
    """Nominal shortest paths between every node pair, computed lazily per source."""

    def __init__(self, topo: Topology) -> None:
        self.topo = topo
        self._trees: dict[int, dict[int, tuple[int, ...]]] = {}

    def path(self, src: int, dst: int) -> tuple[int, ...]:
        tree = self._trees.get(src)
        if tree is None:
            tree = {n: p.nodes for n, p in shortest_path_tree(self.topo, src, ignore_status=True).items()}
            self._trees[src] = tree
        return tree[dst]


def path_links(nodes: Sequence[int]) -> list[LinkKey]:
    return [link_key(a, b) for a, b in zip(nodes, nodes[1:])]


def eligible_links(topo: Topology, plan: ClusterPlan, selector: str) -> list[LinkKey]:
    """Links whose failure leaves an alternative: intra links that are not bridges
    of their cluster, inter links that are not bridges of the whole graph."""
    out = []
    for key in sorted(topo.links):
        inter = plan.is_inter(key)
        if selector == "intra" and inter or selector == "inter" and not inter:
            continue
        region = None if inter else plan.members(plan.cluster_of(key[0]))
        if not is_bridge(topo, key, region):
            out.append(key)
    return out


@dataclass
class Workload:
    failed_link: LinkKey
    selector: str
    services: list[tuple[int, int, tuple[int, ...]]]
    forced: int = 0

    def crossing(self) -> int:
        return sum(1 for *_, nodes in self.services if self.failed_link in path_links(nodes))


def draw_pairs(rng: random.Random, nodes: Sequence[int], count: int) -> list[tuple[int, int]]:
    return [tuple(rng.sample(nodes, 2)) for _ in range(count)]  # type: ignore[misc]


def build_workload(cfg: ScenarioConfig, topo: Topology, plan: ClusterPlan, rng: random.Random,
                   cache: PathCache) -> Workload:
    nodes = sorted(topo.nodes)
    pairs = draw_pairs(rng, nodes, cfg.paths_total)
    paths = [cache.path(s, d) for s, d in pairs]
    target = cfg.paths_on_failed_link

    selector = cfg.failed_link
    if isinstance(selector, list):
        key = link_key(*selector)
        if key not in topo.links:
            raise ScenarioError(f"explicit failed link {selector} is not in the topology")
        selector = "inter" if plan.is_inter(key) else "intra"
        candidates = [key]
    else:
        candidates = eligible_links(topo, plan, selector)
        if not candidates and selector == "intra":
            log.info("k=%d has no protected intra-cluster link, falling back to an inter-cluster one", plan.k)
            selector = "inter"
            candidates = eligible_links(topo, plan, "inter")
        if not candidates:
            raise ScenarioError(f"no {selector} link survives a failure with an alternative path (k={plan.k})")

    load = {k: 0 for k in candidates}
    for p in paths:
        for lk in path_links(p):
            if lk in load:
                load[lk] += 1
    heavy = [k for k in candidates if load[k] >= target]
    if heavy:
        failed = heavy[rng.randrange(len(heavy))]
    else:
        failed = max(candidates, key=lambda k: (load[k], [-x for x in k]))
    if selector == "auto":
        selector = "inter" if plan.is_inter(failed) else "intra"

    def crosses(p: tuple[int, ...]) -> bool:
        return failed in path_links(p)

    crossing = [i for i, p in enumerate(paths) if crosses(p)]
    forced = 0
    if len(crossing) > target:
        for i in crossing[target:]:
            for _ in range(REDRAW_BOUND):
                s, d = rng.sample(nodes, 2)
                if not crosses(cache.path(s, d)):
                    pairs[i], paths[i] = (s, d), cache.path(s, d)
                    break
            else:
                raise ScenarioError(f"cannot route around {failed} after {REDRAW_BOUND} draws")
    elif len(crossing) < target:
        others = [i for i in range(len(paths)) if not crosses(paths[i])]
        need = target - len(crossing)
        for i in others[len(others) - need:]:
            for _ in range(REDRAW_BOUND):
                s, d = rng.sample(nodes, 2)
                if crosses(cache.path(s, d)):
                    pairs[i], paths[i] = (s, d), cache.path(s, d)
                    break
            else:
                pairs[i], paths[i] = _forced_path(rng, nodes, cache, failed)
                forced += 1
    services = [(s, d, p) for (s, d), p in zip(pairs, paths)]
    work = Workload(failed, selector, services, forced)
    if work.crossing() != target:
        raise ScenarioError(f"realised {work.crossing()} paths on {failed}, wanted {target}")
    return work


def _forced_path(rng: random.Random, nodes: Sequence[int], cache: PathCache,
                 key: LinkKey) -> tuple[tuple[int, int], tuple[int, ...]]:
    """A simple path deliberately routed through ``key``."""
    for _ in range(REDRAW_BOUND * 10):
        s, d = rng.sample(nodes, 2)
        a, b = key if rng.random() < 0.5 else key[::-1]
        p = cache.path(s, a) + cache.path(b, d)
        if len(set(p)) == len(p):
            return (s, d), p
    raise ScenarioError(f"cannot force a simple path through {key}")


# --------------------------------------------------------------------------
# runs


@dataclass
class RunDetail:
    k: int
    rep: int
    failed_link: LinkKey | None = None
    selector: str = ""
    early_inter_messages: int = 0
    forced_paths: int = 0
    failed_services: int = 0
    violations: list[str] = field(default_factory=list)


@dataclass
class RunOutput:
    sample: LatencySample
    detail: RunDetail
    trace: list[str]


@dataclass
class Results:
    config: ScenarioConfig
    samples: list[LatencySample]
    details: list[RunDetail]
    traces: list[tuple[int, int, list[str]]]

    @property
    def violations(self) -> list[str]:
        return [f"k={d.k} rep={d.rep}: {v}" for d in self.details for v in d.violations]

    def trace_text(self) -> str:
        out = []
        for k, rep, lines in self.traces:
            out.append(f"# {self.config.name} {plane_label(k)} rep={rep}")
            out.extend(lines)
        return "\n".join(out) + "\n"


def _plane_seed(seed: int, rep: int) -> int:
    return seed * 1_000_003 + rep


def check_invariants(plane: ControlPlane, layer: IconaLayer | None) -> list[str]:
    bad = []
    stale = plane.primary_entries_on_down_links()
    if stale:
        bad.append(f"{len(stale)} primary entries on down links")
    truth = {k: link.flow_count for k, link in plane.topo.links.items()}
    if truth != plane.recount_flows():
        bad.append("link flow counts disagree with a full recount")
    if any(m is None for m in plane.masters().values()):
        bad.append("a switch has no master")
    if layer is not None and plane.plan.k > 1 and not layer.stores_converged():
        bad.append("cluster stores diverged")
    return bad


def run_reroute_once(cfg: ScenarioConfig, topo: Topology, plan: ClusterPlan, k: int, rep: int,
                     trace: bool = False, cache: PathCache | None = None) -> RunOutput:
    cache = cache or PathCache(topo)
    rng = random.Random(_plane_seed(cfg.seed, rep))
    work = build_workload(cfg, topo, plan, rng, cache)
    plane = ControlPlane(topo, plan, cfg.control_config(), cfg.instances_for(k),
                         seed=_plane_seed(cfg.seed, rep), trace=trace)
    layer = IconaLayer(plane)
    for i, (s, d, nodes) in enumerate(work.services):
        layer.provision(f"ep{s}", f"ep{d}", nodes, f"pw{i}")
    layer.sync_stores()
    for cid in plan.clusters:
        layer.bm_precompute(cid)
    if k > 1 and cfg.tm_periodic:
        layer.start_tm()
    plane.inject(FailurePlan().add(cfg.t_fail_ms, FailureAction.LINK_DOWN, work.failed_link))
    plane.run()

    detail = RunDetail(k, rep, work.failed_link, work.selector, forced_paths=work.forced)
    recs = [r for r in plane.samples if r.link == work.failed_link and r.t_fail == cfg.t_fail_ms]
    if not recs:
        raise ScenarioError(f"no restoration sample for {work.failed_link} (k={k}, rep={rep})")
    last = max(recs, key=lambda r: (r.sample.total_ms, r.cluster))
    restored = max(r.restored_at for r in recs)
    detail.early_inter_messages = len(plane.bus.messages_between(cfg.t_fail_ms, restored))
    detail.failed_services = sum(len(r.failed_services) for r in recs)
    detail.violations = check_invariants(plane, layer)
    sample = last.sample.relabel(cfg.name, plane_label(k), rep)
    return RunOutput(sample, detail, list(plane.engine.trace or []))


def run_startup_once(cfg: ScenarioConfig, topo: Topology, plan: ClusterPlan, k: int, rep: int,
                     trace: bool = False, cache: PathCache | None = None) -> RunOutput:
    """Provision, cut every control channel at t=0, reconnect, and time convergence.

    The sample maps the phases of the last cluster to converge onto the CSV
    columns: reconnect+handshake, LLDP round, audit, and an empty delete leg.
    """
    cache = cache or PathCache(topo)
    rng = random.Random(_plane_seed(cfg.seed, rep))
    plane = ControlPlane(topo, plan, cfg.control_config(), cfg.instances_for(k),
                         seed=_plane_seed(cfg.seed, rep), trace=trace)
    for i, (s, d) in enumerate(draw_pairs(rng, sorted(topo.nodes), cfg.paths_total)):
        plane.provision_path(f"pw{i}", cache.path(s, d))
    plane.inject(FailurePlan()
                 .add(0.0, FailureAction.FULL_CONTROL_DISCONNECT)
                 .add(0.0, FailureAction.CONTROL_RECONNECT))
    plane.run()

    detail = RunDetail(k, rep)
    conv = plane.convergence_time()
    if conv is None:
        raise ScenarioError(f"control plane never converged (k={k}, rep={rep})")
    last = max(plane.clusters, key=lambda cl: (cl.converged_at, cl.id))
    t0 = plane.reconnect_started
    sample = LatencySample(
        cfg.name, plane_label(k), rep,
        traversal_ms=last.connected_at - t0,
        computation_ms=last.discovered_at - last.connected_at,
        install_ms=last.converged_at - last.discovered_at,
        delete_ms=0.0,
    )
    detail.violations = check_invariants(plane, None)
    if any(cl.stats["view_mismatch"] for cl in plane.clusters):
        detail.violations.append("a cluster view disagrees with ground truth after convergence")
    return RunOutput(sample, detail, list(plane.engine.trace or []))


def _run_job(args: tuple[dict[str, Any], str | None, int, int, bool]) -> RunOutput:
    data, base_dir, k, rep, trace = args
    cfg = ScenarioConfig.from_dict(data, base_dir)
    topo = cfg.build_topology()
    plan = cfg.build_plan(topo, k)
    once = run_startup_once if cfg.kind == ExperimentKind.STARTUP.value else run_reroute_once
    return once(cfg, topo, plan, k, rep, trace)


def run(cfg: ScenarioConfig, trace: bool = False, workers: int | None = None) -> Results:
    """Every (k, rep) of ``cfg``; output order is (k as listed, rep) whatever the worker count."""
    if cfg.kind == ExperimentKind.MICRO.value:
        raise ScenarioError("micro scenarios run through run_micro(name)")
    workers = cfg.workers if workers is None else workers
    jobs = [(k, rep) for k in cfg.clusters for rep in range(cfg.repetitions)]
    if workers > 1:
        args = [(cfg.to_dict(), cfg.base_dir, k, rep, trace) for k, rep in jobs]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_job, args))
    else:
        topo = cfg.build_topology()
        cache = PathCache(topo)
        once = run_startup_once if cfg.kind == ExperimentKind.STARTUP.value else run_reroute_once
        plans = {k: cfg.build_plan(topo, k) for k in cfg.clusters}
        outputs = [once(cfg, topo, plans[k], k, rep, trace, cache) for k, rep in jobs]
    return Results(
        cfg,
        [o.sample for o in outputs],
        [o.detail for o in outputs],
        [(k, rep, o.trace) for (k, rep), o in zip(jobs, outputs)] if trace else [],
    )


def run_reroute(cfg: ScenarioConfig, trace: bool = False, workers: int | None = None) -> Results:
    if cfg.kind not in (ExperimentKind.REROUTE_GRID.value, ExperimentKind.REROUTE_GEANT.value):
        raise ScenarioError(f"{cfg.name} is a {cfg.kind} scenario, not a reroute one")
    return run(cfg, trace, workers)


def run_startup(cfg: ScenarioConfig, trace: bool = False, workers: int | None = None) -> Results:
    if cfg.kind != ExperimentKind.STARTUP.value:
        raise ScenarioError(f"{cfg.name} is a {cfg.kind} scenario, not a startup one")
    return run(cfg, trace, workers)


def grid_sweep(sizes: Sequence[int], clusters: Sequence[int], reps: int = 20, seed: int = 1,
               paths_total: int = 1000, paths_on_failed_link: int = 100,
               workers: int = 1, **overrides: Any) -> Results:
    """Reroute runs on square grids with quadrant-style partitions."""
    samples: list[LatencySample] = []
    details: list[RunDetail] = []
    first: ScenarioConfig | None = None
    for n in sizes:
        cfg = ScenarioConfig(
            name=f"grid{n}x{n}", kind=ExperimentKind.REROUTE_GRID.value,
            topology={"grid": [n, n], "delay_ms": 5.0}, clusters=list(clusters), partition="grid",
            paths_total=paths_total, paths_on_failed_link=paths_on_failed_link,
            repetitions=reps, seed=seed, workers=workers, **overrides,
        )
        first = first or cfg
        res = run(cfg)
        samples += res.samples
        details += res.details
    assert first is not None
    return Results(first, samples, details, [])
