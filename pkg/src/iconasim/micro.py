"""Scripted protocol scenarios and the exhaustive two-phase enumerator.

The micro topology is a 2x6 grid cut into three column pairs, two instances
per cluster, with one pseudo-wire from ep0 (top-left) to ep5 (top-right), so
every attempt involves all three clusters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

from .ctrl import ControlConfig, ControlPlane, FlowRole, install_path
from .icona import IconaLayer, ServiceState
from .simcore import FailureAction, FailurePlan
from .topo import ClusterPlan, Link, Path, Topology, build_grid, link_key, partition

OUTCOMES = ("nack", "fail", "ok")  # per cluster and attempt: refuse, ack then fail install, ack and install
FAILOVERS = ("none", "mid-reserve", "after-commit")
SERVICE = "pw0"


class MicroError(KeyError):
    pass


def micro_topology() -> tuple[Topology, ClusterPlan]:
    topo = build_grid(2, 6, 5.0)
    plan = partition(topo, 3, "explicit", {n: (n % 6) // 2 for n in topo.nodes})
    return topo, plan


def micro_plane(config: ControlConfig | None = None, trace: bool = True) -> tuple[ControlPlane, IconaLayer]:
    topo, plan = micro_topology()
    plane = ControlPlane(topo, plan, config or ControlConfig(max_retries=1), instances=2, trace=trace)
    layer = IconaLayer(plane)
    layer.sync_stores()
    for cid in plan.clusters:
        layer.bm_precompute(cid)
    return plane, layer


# --------------------------------------------------------------------------
# two-phase enumeration


Script = tuple[tuple[str, ...], ...]  # script[attempt-1][cluster]


@dataclass(frozen=True)
class Expected:
    state: ServiceState
    attempts: int


def oracle_2pc(script: Script, failover: str) -> Expected:
    """Abstract state machine: which attempt (if any) ends Installed."""
    for a, outcome in enumerate(script, start=1):
        if a == 1 and failover == "mid-reserve":
            continue  # the new master never sees remote votes and times the attempt out
        if "nack" in outcome or "fail" in outcome:
            continue
        return Expected(ServiceState.INSTALLED, a)
    return Expected(ServiceState.FAILED, len(script))


@dataclass
class CaseResult:
    script: Script
    failover: str
    state: ServiceState | None
    attempts: int
    installed_at: set[int]
    problems: list[str] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)


def run_2pc_case(script: Script, failover: str = "none", trace: bool = False) -> CaseResult:
    attempts = len(script)
    plane, layer = micro_plane(ControlConfig(max_retries=attempts - 1), trace=trace)

    def fault(phase: str, sid: str, attempt: int, cid: int) -> bool:
        if attempt > attempts:
            return False
        outcome = script[attempt - 1][cid]
        return (phase == "reserve" and outcome == "nack") or (phase == "install" and outcome == "fail")

    layer.fault = fault
    if failover == "mid-reserve":
        layer.crash_on[("ReserveSent", 1)] = "c0.0"
    elif failover == "after-commit":
        layer.crash_on[("CommitSent", 1)] = "c0.0"
    elif failover != "none":
        raise MicroError(f"unknown failover {failover!r}")
    layer.sm_install("ep0", "ep5", service=SERVICE)
    plane.run()

    rec = layer.state[0].services.get(SERVICE)
    res = CaseResult(script, failover, rec.state if rec else None, rec.attempt if rec else 0,
                     layer.installed_clusters(SERVICE), trace=list(plane.engine.trace or []))
    res.problems = quiescent_problems(plane, layer)
    return res


def quiescent_problems(plane: ControlPlane, layer: IconaLayer) -> list[str]:
    """Atomicity and bookkeeping checks that must hold once the run is idle."""
    out = []
    for sid, rec in layer.state[0].services.items():
        if not layer.atomic(sid):
            out.append(f"{sid} installed at a strict subset {sorted(layer.installed_clusters(sid))}")
        on_switch = {sw.node for sw in plane.switches.values()
                     for e in sw.entries() if e.service == sid and e.role is FlowRole.PRIMARY}
        if rec.state is ServiceState.INSTALLED:
            if on_switch != set(rec.global_path):
                out.append(f"{sid} entries on {sorted(on_switch)} but path is {rec.global_path}")
        elif on_switch:
            out.append(f"{sid} is {rec.state.value} yet has entries on {sorted(on_switch)}")
    if not layer.stores_converged():
        out.append("stores diverged")
    truth = {k: link.flow_count for k, link in plane.topo.links.items()}
    if truth != plane.recount_flows():
        out.append("flow counts disagree with recount")
    if any(link.reserved_gbps for link in plane.topo.links.values()):
        out.append("bandwidth still held")
    if any(cl.ops for cl in plane.clusters):
        out.append("operations still pending")
    return out


def forwarding_walk(plane: ControlPlane, service: str, src: int) -> tuple[int, ...] | None:
    """Follow ``service`` hop by hop from ``src`` through the flow tables.

    At each switch the newest primary entry matching the ingress port wins;
    standby backup entries match when no primary one does. Returns ``None``
    on a loop, a missing entry, or a Down link.
    """
    seq = [src]
    node, ingress = src, None
    while True:
        sw = plane.switches[node]
        entries = [e for e in sw.entries() if e.in_link == ingress]
        primary = sorted((e for e in entries if e.service == service), key=lambda e: -e.version)
        standby = [e for e in entries if e.role is FlowRole.BACKUP_STANDBY]
        pick = (primary or standby or [None])[0]
        if pick is None:
            return None
        if pick.out_link is None:
            return tuple(seq)
        link = plane.topo.links[pick.out_link]
        if not link.up:
            return None
        node, ingress = link.other(node), pick.out_link
        if node in seq:
            return None
        seq.append(node)


def all_scripts(attempts: int = 2, clusters: int = 3) -> Iterator[Script]:
    per_attempt = list(itertools.product(OUTCOMES, repeat=clusters))
    for combo in itertools.product(per_attempt, repeat=attempts):
        yield combo


def enumerate_2pc(attempts: int = 2, failovers: Sequence[str] = FAILOVERS) -> list[CaseResult]:
    """Run every scripted interleaving; return the cases that disagree with the oracle or break atomicity."""
    bad = []
    for script in all_scripts(attempts):
        for fo in failovers:
            res = run_2pc_case(script, fo)
            exp = oracle_2pc(script, fo)
            if (res.state, res.attempts) != (exp.state, exp.attempts):
                res.problems.append(f"expected {exp.state.value}@{exp.attempts}, got "
                                    f"{res.state.value if res.state else None}@{res.attempts}")
            if res.problems:
                bad.append(res)
    return bad


def count_cases(attempts: int = 2, failovers: Sequence[str] = FAILOVERS) -> int:
    return len(OUTCOMES) ** (3 * attempts) * len(failovers)


# --------------------------------------------------------------------------
# named scenarios


@dataclass
class MicroResult:
    name: str
    passed: bool
    trace: list[str]
    notes: list[str] = field(default_factory=list)


def _case(script: Script, failover: str, want: Expected, extra: Callable[[CaseResult], list[str]] | None = None
          ) -> Callable[[str], MicroResult]:
    def go(name: str) -> MicroResult:
        res = run_2pc_case(script, failover, trace=True)
        notes = list(res.problems)
        if (res.state, res.attempts) != (want.state, want.attempts):
            notes.append(f"expected {want.state.value} after {want.attempts} attempts, got "
                         f"{res.state.value if res.state else None} after {res.attempts}")
        if extra is not None:
            notes += extra(res)
        return MicroResult(name, not notes, res.trace, notes)
    return go


def _no_commit_before_votes(res: CaseResult) -> list[str]:
    """A Commit for an attempt may only follow a Reserve ack from every cluster."""
    acks: dict[int, set[str]] = {}
    for line in res.trace:
        parts = line.split()
        kind = parts[1]
        attempt = int(parts[-1].split("=")[1]) if parts[-1].startswith("attempt=") else 0
        if kind == "AckRecv":
            acks.setdefault(attempt, set()).add(parts[2])
        if kind == "CommitSent" and len(acks.get(attempt, ())) < 3:
            return [f"commit for attempt {attempt} after only {sorted(acks.get(attempt, ()))} acks"]
    return []


def _il_local(name: str) -> MicroResult:
    plane, layer = micro_plane()
    nodes = (0, 1, 2, 3, 4, 5)
    layer.provision("ep0", "ep5", nodes, SERVICE)
    layer.sync_stores()
    for cid in plane.plan.clusters:
        layer.bm_precompute(cid)
    key = link_key(1, 2)
    t_fail = 100.0
    plane.inject(FailurePlan().add(t_fail, FailureAction.LINK_DOWN, key))
    plane.run()
    notes = []
    recs = [r for r in layer.il_samples if r.link == key]
    if len(recs) != 2:
        notes.append(f"expected both edge clusters to restore, got {len(recs)}")
    restored = max((r.restored_at for r in recs), default=t_fail)
    early = plane.bus.messages_between(t_fail, restored)
    if early:
        notes.append(f"{len(early)} inter-cluster messages before restoration")
    if plane.primary_entries_on_down_links():
        notes.append("primary entries still use the failed link")
    rec = layer.state[0].services[SERVICE]
    if key in rec.ils_used or rec.state is not ServiceState.INSTALLED:
        notes.append(f"record not moved to the backup: {rec.trace()}")
    walk = forwarding_walk(plane, SERVICE, nodes[0])
    if walk is None or walk[-1] != nodes[-1]:
        notes.append(f"forwarding from {nodes[0]} does not reach {nodes[-1]}: {walk}")
    elif walk != rec.global_path:
        notes.append(f"forwarding walk {walk} differs from the stored path {rec.global_path}")
    if not layer.stores_converged():
        notes.append("stores diverged")
    if {k: link.flow_count for k, link in plane.topo.links.items()} != plane.recount_flows():
        notes.append("flow counts disagree with recount")
    trace = list(plane.engine.trace or []) + [f"# early inter-cluster messages: {len(early)}"]
    return MicroResult(name, not notes, trace, notes)


def _lldp_il(name: str) -> MicroResult:
    topo = Topology(2, [Link(0, 1, 5.0)])
    plan = partition(topo, 2, "explicit", {0: 0, 1: 1})
    plane = ControlPlane(topo, plan, trace=True)
    for cl in plane.clusters:
        cl.view.clear()
        cl.lldp_round()
    plane.run()
    key = link_key(0, 1)
    notes = [f"cluster {cl.id} did not classify {key} as inter-cluster"
             for cl in plane.clusters if cl.view.il_candidates.get(key) is not True]
    return MicroResult(name, not notes, list(plane.engine.trace or []), notes)


@dataclass(frozen=True)
class Slowdown:
    two_phase_ms: float
    native_ms: float

    @property
    def factor(self) -> float:
        return self.two_phase_ms / self.native_ms


def install_slowdown(nodes: Sequence[int] = (0, 1, 2, 3, 4, 5)) -> Slowdown:
    """Time one pseudo-wire through the two-phase protocol and as a single-cluster install."""
    plane, layer = micro_plane(trace=False)
    t0 = plane.engine.now
    sid = layer.sm_install(f"ep{nodes[0]}", f"ep{nodes[-1]}", service=SERVICE)
    plane.run()
    if sid not in layer.completed_at:
        raise MicroError(f"two-phase install of {nodes} did not complete")
    topo, _ = micro_topology()
    flat = ControlPlane(topo, partition(topo, 1), ControlConfig(), instances=2)
    op = install_path(flat.clusters[0], SERVICE, Path.from_nodes(topo, nodes))
    flat.run()
    return Slowdown(layer.completed_at[sid] - t0, op.elapsed)


def _twophase_factor(name: str) -> MicroResult:
    s = install_slowdown()
    trace = [f"# two-phase install {s.two_phase_ms:.3f} ms",
             f"# single-cluster install {s.native_ms:.3f} ms",
             f"# factor {s.factor:.2f}"]
    return MicroResult(name, s.native_ms > 0 and s.two_phase_ms > s.native_ms, trace)


def _startup_single(name: str) -> MicroResult:
    topo = Topology(1, [])
    plan = partition(topo, 1)
    cfg = ControlConfig(reconnect_jitter_ms=0.0)
    plane = ControlPlane(topo, plan, cfg, trace=True)
    plane.inject(FailurePlan().add(0.0, FailureAction.FULL_CONTROL_DISCONNECT)
                 .add(0.0, FailureAction.CONTROL_RECONNECT))
    plane.run()
    want = 2 * plane.control_delay(0) + cfg.handshake_ms + cfg.lldp_period_ms
    got = plane.convergence_time()
    notes = [] if got == want else [f"convergence {got} != handshake + one LLDP period = {want}"]
    return MicroResult(name, not notes, list(plane.engine.trace or []), notes)


OK3 = ("ok", "ok", "ok")

MICRO: dict[str, Callable[[str], MicroResult]] = {
    "twophase-ok": _case((OK3, OK3), "none", Expected(ServiceState.INSTALLED, 1), _no_commit_before_votes),
    "twophase-nack": _case((("ok", "nack", "ok"), OK3), "none", Expected(ServiceState.INSTALLED, 2),
                           _no_commit_before_votes),
    "twophase-install-fail": _case((("ok", "ok", "fail"), OK3), "none", Expected(ServiceState.INSTALLED, 2)),
    "twophase-exhausted": _case((("nack", "ok", "ok"), ("ok", "ok", "fail")), "none",
                                Expected(ServiceState.FAILED, 2)),
    "failover-mid-reserve": _case((OK3, OK3), "mid-reserve", Expected(ServiceState.INSTALLED, 2)),
    "failover-after-commit": _case((OK3, OK3), "after-commit", Expected(ServiceState.INSTALLED, 1)),
    "il-local": _il_local,
    "twophase-factor": _twophase_factor,
    "lldp-il": _lldp_il,
    "startup-single": _startup_single,
}


def run_micro(name: str) -> MicroResult:
    try:
        fn = MICRO[name]
    except KeyError:
        raise MicroError(f"unknown micro scenario {name!r}; known: {', '.join(sorted(MICRO))}") from None
    return fn(name)
