"""Closed-form phase models and the fitting of model constants.

Reroute: with one-way control delay ``cd(s) = A + d(s)`` the four phases of
an intra-cluster reroute of ``n`` paths are

    traversal   = min(cd(u), cd(v))                    first PortStatus
    computation = n * (c0 + c1 * |cluster links|)
    install     = 2 * max cd over switches of the new fragments
    delete      = 2 * max cd over switches of the old fragments

so the mean total is linear in ``A`` and in the compute costs. The fit keeps
the default ``c1/c0`` ratio, solves for ``A`` on the k=1 scenario only, and
when that would need ``A < 0`` pins ``A = 0`` and scales compute down
instead (to zero at worst, leaving a residual that is reported).

Startup: a cluster converges at
``max(jitter + 2 cd + handshake) + lldp_period + c0 * services``, and the
plane at the latest cluster; solving for ``handshake`` is a single subtraction.
``fit_startup`` additionally fits the audit cost against a second,
multi-cluster target.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

from .ctrl import split_fragments
from .scenario import (
    PathCache, ScenarioConfig, Workload, _plane_seed, build_workload, draw_pairs, path_links,
)
from .simcore import seeded_rng
from .topo import ClusterPlan, Topology, shortest_path


@dataclass(frozen=True)
class PhaseTerms:
    """Decomposition of one reroute sample into A-free parts."""

    traversal: float
    install: float
    delete: float
    paths: int
    cluster_links: int

    def total(self, access: float, c0: float, c1: float) -> float:
        if self.paths == 0:
            return self.traversal + access
        return (self.traversal + self.install + self.delete + 5 * access
                + self.paths * (c0 + c1 * self.cluster_links))


def reroute_terms(topo: Topology, plan: ClusterPlan, work: Workload) -> PhaseTerms:
    """Closed-form phases (with access delay 0) for an intra-cluster failure."""
    u, v = work.failed_link
    if plan.is_inter(work.failed_link):
        raise ValueError("the closed form covers intra-cluster failures only")
    cid = plan.cluster_of(u)
    members = set(plan.members(cid))
    base = plan.with_access_delay(0.0).control_delays(topo)
    region = topo.subgraph(members)
    old_nodes: set[int] = set()
    new_nodes: set[int] = set()
    n = 0
    for _, _, nodes in work.services:
        if work.failed_link not in path_links(nodes):
            continue
        for c, a, b in split_fragments(nodes, plan.cluster_of):
            frag = nodes[a:b]
            if c != cid or work.failed_link not in path_links(frag):
                continue
            outside = set(nodes[:a]) | set(nodes[b:])
            alt = shortest_path(region, frag[0], frag[-1], excluded={work.failed_link},
                                excluded_nodes=outside)
            if alt is None:
                continue
            n += 1
            old_nodes.update(frag)
            new_nodes.update(alt.nodes)
    traversal = min(base[u], base[v])
    if n == 0:
        return PhaseTerms(traversal, 0.0, 0.0, 0, len(plan.internal_links(topo, cid)))
    return PhaseTerms(
        traversal,
        2 * max(base[s] for s in new_nodes),
        2 * max(base[s] for s in old_nodes),
        n,
        len(plan.internal_links(topo, cid)),
    )


@dataclass(frozen=True)
class RerouteFit:
    c0_ms: float
    c1_ms: float
    access_delay_ms: float
    predicted_ms: float
    target_ms: float

    @property
    def residual_ms(self) -> float:
        return self.predicted_ms - self.target_ms

    @property
    def exact(self) -> bool:
        return abs(self.residual_ms) < 1e-6


def rep_terms(cfg: ScenarioConfig, k: int = 1) -> list[PhaseTerms]:
    topo = cfg.build_topology()
    plan = cfg.build_plan(topo, k)
    cache = PathCache(topo)
    out = []
    for rep in range(cfg.repetitions):
        rng = random.Random(_plane_seed(cfg.seed, rep))
        out.append(reroute_terms(topo, plan, build_workload(cfg, topo, plan, rng, cache)))
    return out


def predict_reroute(cfg: ScenarioConfig, k: int = 1) -> float:
    """Mean total over the configured repetitions from the closed form alone."""
    access = cfg.build_plan(cfg.build_topology(), k).access_delay_ms
    terms = rep_terms(cfg, k)
    return math.fsum(t.total(access, cfg.c0_ms, cfg.c1_ms) for t in terms) / len(terms)


def fit_reroute(cfg: ScenarioConfig, target_ms: float) -> RerouteFit:
    """Fit (c0, c1, access delay) so the k=1 mean total hits ``target_ms``."""
    terms = rep_terms(cfg, 1)
    m = len(terms)
    fixed = math.fsum(t.total(0.0, 0.0, 0.0) for t in terms) / m
    compute = math.fsum(t.total(0.0, cfg.c0_ms, cfg.c1_ms) for t in terms) / m - fixed
    slope = math.fsum(5.0 if t.paths else 1.0 for t in terms) / m
    c0, c1 = cfg.c0_ms, cfg.c1_ms
    access = (target_ms - fixed - compute) / slope
    if access < 0:
        access = 0.0
        scale = max(0.0, (target_ms - fixed) / compute) if compute > 0 else 0.0
        c0, c1 = c0 * scale, c1 * scale
    predicted = math.fsum(t.total(access, c0, c1) for t in terms) / m
    return RerouteFit(round(c0, 6), round(c1, 6), round(access, 6), predicted, target_ms)


# --------------------------------------------------------------------------
# startup


def startup_closed_form(cfg: ScenarioConfig, topo: Topology, plan: ClusterPlan, rep: int,
                        cache: PathCache | None = None) -> float:
    cache = cache or PathCache(topo)
    rng = random.Random(_plane_seed(cfg.seed, rep))
    services: dict[int, set[int]] = {c: set() for c in plan.clusters}
    for i, (s, d) in enumerate(draw_pairs(rng, sorted(topo.nodes), cfg.paths_total)):
        for c, _, _ in split_fragments(cache.path(s, d), plan.cluster_of):
            services[c].add(i)
    jit_rng = seeded_rng(_plane_seed(cfg.seed, rep), 7)
    jitter = {n: jit_rng.uniform(0.0, cfg.reconnect_jitter_ms) for n in sorted(topo.nodes)}
    cd = plan.control_delays(topo)
    conv = []
    for c in plan.clusters:
        connected = max(jitter[n] + 2 * cd[n] + cfg.handshake_ms for n in plan.members(c))
        conv.append(connected + cfg.lldp_period_ms + cfg.c0_ms * len(services[c]))
    return max(conv)


def predict_startup(cfg: ScenarioConfig, k: int = 1) -> float:
    topo = cfg.build_topology()
    plan = cfg.build_plan(topo, k)
    cache = PathCache(topo)
    vals = [startup_closed_form(cfg, topo, plan, rep, cache) for rep in range(cfg.repetitions)]
    return math.fsum(vals) / len(vals)


def fit_handshake(cfg: ScenarioConfig, target_ms: float) -> float:
    """Handshake constant that puts the k=1 mean convergence on ``target_ms``."""
    base = predict_startup(replace(cfg, handshake_ms=0.0), 1)
    value = target_ms - base
    if value < 0:
        raise ValueError(f"target {target_ms} ms is below the handshake-free time {base:.3f} ms")
    return round(value, 3)


@dataclass(frozen=True)
class StartupFit:
    handshake_ms: float
    c0_ms: float
    predicted: dict[int, float]
    sse: float


def fit_startup(cfg: ScenarioConfig, k1_target_ms: float, multi_target_ms: float,
                ks: tuple[int, ...] = (2, 4, 8), c0_max: float | None = None,
                steps: int = 10) -> StartupFit:
    """Two-point fit of (handshake, per-service audit cost).

    ``handshake`` pins the k=1 mean exactly; the audit cost is then the value
    in ``[0, c0_max]`` minimising the squared error of the multi-cluster means
    against ``multi_target_ms``. A grid search suffices because the model is
    piecewise linear in the audit cost.
    """
    hi = c0_max if c0_max is not None else max(2 * cfg.c0_ms, 0.1)
    best: StartupFit | None = None
    for i in range(steps + 1):
        c0 = hi * i / steps
        trial = replace(cfg, c0_ms=c0)
        h = fit_handshake(trial, k1_target_ms)
        trial = replace(trial, handshake_ms=h)
        pred = {k: predict_startup(trial, k) for k in (1, *ks)}
        sse = math.fsum((pred[k] - multi_target_ms) ** 2 for k in ks)
        if best is None or sse < best.sse - 1e-9:
            best = StartupFit(h, round(c0, 6), pred, sse)
    assert best is not None
    return best
