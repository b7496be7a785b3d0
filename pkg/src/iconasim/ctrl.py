"""ONOS-like cluster emulation.

A :class:`ControlPlane` wires together the engine, the switches, one
:class:`Cluster` per region and its controller instances. All devices of a
cluster are mastered by the cluster master (lowest alive index). The master
owns the local segment store, reacts to PortStatus with the reroute pipeline,
runs LLDP rounds and handles reconnection after a control-plane outage.

Upper layers (the ICONA managers) attach through :class:`PlaneListener`.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .metrics import LatencySample
from .simcore import (
    INTER,
    Bus,
    BusTopic,
    ConfigError,
    ControlChannel,
    Delivery,
    Engine,
    FailureAction,
    FailurePlan,
    Message,
    MsgKind,
    SimEvent,
    seeded_rng,
)
from .topo import (
    ClusterPlan,
    CompositeWeights,
    LinkKey,
    LinkStatus,
    Path,
    Topology,
    distances_from,
    link_key,
    shortest_path,
)

log = logging.getLogger(__name__)


class FlowRole(enum.Enum):
    PRIMARY = "Primary"
    BACKUP_STANDBY = "BackupStandby"


@dataclass(frozen=True, slots=True)
class FlowEntry:
    switch: int
    service: str
    in_link: LinkKey | None
    out_link: LinkKey | None
    role: FlowRole = FlowRole.PRIMARY
    version: int = 0

    def __post_init__(self) -> None:
        for lk in (self.in_link, self.out_link):
            if lk is not None and self.switch not in lk:
                raise ValueError(f"link {lk} is not incident to switch {self.switch}")

    def trace(self) -> str:
        return f"{self.service}@s{self.switch}#{self.version}"


def path_entries(
    nodes: Sequence[int],
    positions: Iterable[int],
    service: str,
    version: int,
    role: FlowRole = FlowRole.PRIMARY,
) -> list[FlowEntry]:
    """Entries for ``nodes[i]`` at each position, wired to the neighbours in ``nodes``."""
    last = len(nodes) - 1
    out = []
    for i in positions:
        n = nodes[i]
        in_link = link_key(nodes[i - 1], n) if i > 0 else None
        out_link = link_key(n, nodes[i + 1]) if i < last else None
        out.append(FlowEntry(n, service, in_link, out_link, role, version))
    return out


def split_fragments(nodes: Sequence[int], cluster_of: Callable[[int], int]) -> list[tuple[int, int, int]]:
    """Maximal same-cluster runs of a node sequence as ``(cluster, start, end)``, end exclusive."""
    owners = list(map(cluster_of, nodes))
    out: list[tuple[int, int, int]] = []
    start = 0
    for i in range(1, len(owners)):
        if owners[i] != owners[start]:
            out.append((owners[start], start, i))
            start = i
    if owners:
        out.append((owners[start], start, len(owners)))
    return out


def loop_erase(nodes: Sequence[int]) -> tuple[int, ...]:
    """Drop cycles from a walk, keeping the first visit of each node."""
    out: list[int] = []
    pos: dict[int, int] = {}
    for n in nodes:
        if n in pos:
            for m in out[pos[n] + 1:]:
                del pos[m]
            del out[pos[n] + 1:]
        else:
            pos[n] = len(out)
            out.append(n)
    return tuple(out)


@dataclass(frozen=True)
class ComputeModel:
    c0_ms: float = 0.1
    c1_ms: float = 0.005

    def __post_init__(self) -> None:
        if self.c0_ms < 0 or self.c1_ms < 0:
            raise ValueError("compute costs must be non-negative")

    def per_path(self, cluster_links: int) -> float:
        return self.c0_ms + self.c1_ms * cluster_links


@dataclass
class ControlConfig:
    """Every model constant, with defaults."""

    compute: ComputeModel = field(default_factory=ComputeModel)
    handshake_ms: float = 50.0
    failover_detect_ms: float = 200.0
    lldp_period_ms: float = 1000.0
    install_timeout_ms: float = 5000.0
    reconnect_jitter_ms: float = 100.0
    intra_bus_delay_ms: float = 0.5
    reserve_timeout_ms: float = 3000.0
    tm_period_ms: float = 5000.0
    max_retries: int = 10
    bm_holddown_ms: float = 1000.0
    weights: CompositeWeights = field(default_factory=CompositeWeights)
    bil_mode: str = "divergence"  # or "full"
    tm_periodic: bool = True

    def __post_init__(self) -> None:
        if self.bil_mode not in ("divergence", "full"):
            raise ValueError(f"unknown bil_mode {self.bil_mode!r}")
        for name in ("handshake_ms", "failover_detect_ms", "install_timeout_ms",
                     "reconnect_jitter_ms", "intra_bus_delay_ms", "reserve_timeout_ms",
                     "bm_holddown_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lldp_period_ms <= 0 or self.tm_period_ms <= 0:
            raise ValueError("periods must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


# --------------------------------------------------------------------------
# actors


class Switch:
    def __init__(self, node: int, plane: "ControlPlane") -> None:
        self.node = node
        self.name = f"s{node}"
        self.alive = True
        self.plane = plane
        self.table: dict[str, dict[int, FlowEntry]] = {}

    def install(self, entry: FlowEntry) -> None:
        self.table.setdefault(entry.service, {})[entry.version] = entry

    def remove(self, service: str, upto_version: int) -> int:
        """Delete entries of ``service`` with version <= ``upto_version``."""
        versions = self.table.get(service)
        if not versions:
            return 0
        stale = [v for v in versions if v <= upto_version]
        for v in stale:
            del versions[v]
        if not versions:
            del self.table[service]
        return len(stale)

    def entries(self) -> Iterable[FlowEntry]:
        for versions in self.table.values():
            yield from versions.values()

    def on_message(self, msg: Message) -> None:
        kind = msg.kind
        if kind is MsgKind.FLOW_MOD:
            self.install(msg.body["entry"])
            self._ack(msg.body["xid"])
        elif kind is MsgKind.FLOW_DEL:
            self.remove(msg.body["service"], msg.body["cookie"])
            self._ack(msg.body["xid"])
        elif kind is MsgKind.LLDP_PROBE:
            self._forward_probe(msg)
        elif kind is MsgKind.HELLO:
            self.plane.cluster_of_switch(self.node).on_switch_connected(self.node)

    def _ack(self, xid: int) -> None:
        self.plane.channel.send_to_controller(
            self.node, Message(MsgKind.FLOW_ACK, self.name, "", {"xid": xid, "switch": self.node})
        )

    def _forward_probe(self, msg: Message) -> None:
        link = self.plane.topo.links[msg.body["port"]]
        if not link.up:
            return
        nbr = link.other(self.node)
        body = dict(msg.body)

        def arrive(_: Any) -> None:
            self.plane.channel.send_to_controller(nbr, Message(MsgKind.LLDP_PROBE, f"s{nbr}", "", body))

        self.plane.engine.after(link.delay_ms, arrive, target=f"s{nbr}")


class ControllerInstance:
    CONTROL_KINDS = frozenset({MsgKind.PORT_STATUS, MsgKind.FLOW_ACK, MsgKind.LLDP_PROBE, MsgKind.HELLO})

    def __init__(self, cluster: "Cluster", index: int) -> None:
        self.cluster = cluster
        self.index = index
        self.name = f"c{cluster.id}.{index}"
        self.alive = True
        self.app: Any = None

    @property
    def is_master(self) -> bool:
        return self.cluster.master is self

    def on_message(self, msg: Message) -> None:
        if msg.kind in self.CONTROL_KINDS:
            self.cluster.on_control(self, msg)
        elif self.app is not None:
            self.app.on_message(msg)

    def __repr__(self) -> str:
        return f"<{self.name}{'' if self.alive else ' down'}>"


# --------------------------------------------------------------------------
# view and pending operations


class TopologyView:
    """A cluster's belief about its internal links plus IL candidates."""

    def __init__(self, topo: Topology, members: Iterable[int]) -> None:
        self.graph = topo.subgraph(members)
        self.status: dict[LinkKey, bool] = {}
        self.last_seen: dict[LinkKey, float] = {}
        self.il_candidates: dict[LinkKey, bool] = {}
        self._round_seen: set[LinkKey] | None = None

    def sync(self, topo: Topology, t: float, inter_links: Iterable[LinkKey] = ()) -> None:
        for key in self.graph.links:
            self.mark(key, topo.links[key].up, t)
        for key in inter_links:
            self.mark(key, topo.links[key].up, t)

    def clear(self) -> None:
        self.status.clear()
        for link in self.graph.links.values():
            link.status = LinkStatus.DOWN

    def mark(self, key: LinkKey, up: bool, t: float) -> None:
        if key in self.graph.links:
            self.status[key] = up
            self.graph.links[key].status = LinkStatus.UP if up else LinkStatus.DOWN
            if self._round_seen is not None and up:
                self._round_seen.add(key)
        else:
            self.il_candidates[key] = up
        if up:
            self.last_seen[key] = t

    def believes_up(self, key: LinkKey) -> bool:
        if key in self.graph.links:
            return self.status.get(key, False)
        return self.il_candidates.get(key, False)

    def begin_round(self) -> None:
        self._round_seen = set()

    def end_round(self, t: float) -> None:
        seen = self._round_seen or set()
        self._round_seen = None
        for key in self.graph.links:
            if key not in seen:
                self.mark(key, False, t)

    def matches(self, topo: Topology) -> bool:
        return all(self.status.get(k, False) == topo.links[k].up for k in self.graph.links)


@dataclass
class Op:
    """A batch of switch operations completing at the last ack."""

    started: float
    pending: set[int]
    on_done: Callable[["Op"], None] | None = None
    done_at: float | None = None
    timed_out: bool = False
    timer: SimEvent | None = None

    @property
    def elapsed(self) -> float | None:
        return None if self.done_at is None else self.done_at - self.started


@dataclass
class RerouteChange:
    service: str
    old_nodes: tuple[int, ...]
    new_nodes: tuple[int, ...]
    old_fragment: Path
    new_fragment: Path
    old_version: int
    new_version: int


@dataclass
class SampleRecord:
    kind: str  # "reroute" | "il"
    cluster: int
    link: LinkKey
    t_fail: float
    sample: LatencySample
    restored_at: float
    failed_services: tuple[str, ...] = ()


class PlaneListener:
    """Hooks for layers above the per-cluster controller. All default to no-ops."""

    def on_master_elected(self, cluster: "Cluster") -> None: ...

    def on_il_status(self, cluster: "Cluster", key: LinkKey, up: bool, t_fail: float) -> bool:
        """Return True when the IL event was handled above the controller."""
        return False

    def on_il_discovered(self, cluster: "Cluster", key: LinkKey) -> None: ...

    def on_rerouted(self, cluster: "Cluster", changes: list[RerouteChange], record: SampleRecord) -> None: ...


# --------------------------------------------------------------------------
# cluster


class Cluster:
    def __init__(self, cid: int, members: Sequence[int], plane: "ControlPlane", n_instances: int) -> None:
        if n_instances < 1:
            raise ValueError("each cluster needs at least one instance")
        self.id = cid
        self.plane = plane
        self.members = sorted(members)
        self.member_set = frozenset(self.members)
        self.instances = [ControllerInstance(self, i) for i in range(n_instances)]
        self.master: ControllerInstance | None = None
        self.view = TopologyView(plane.topo, self.members)
        self.internal_links = plane.plan.internal_links(plane.topo, cid)
        self.segments: dict[tuple[str, int], Path] = {}
        self.segment_version: dict[str, int] = {}
        self.ops: dict[int, Op] = {}
        self.busy_until = 0.0
        self.deferred: list[Callable[[], None]] = []
        self.election: SimEvent | None = None
        self.connected: set[int] = set(self.members)
        self.converged_at: float | None = None
        self.connected_at: float | None = None
        self.discovered_at: float | None = None
        self.stats: Counter[str] = Counter()

    def __repr__(self) -> str:
        return f"<Cluster {self.id} n={len(self.members)} master={self.master}>"

    @property
    def engine(self) -> Engine:
        return self.plane.engine

    # -- mastership

    def elect_master(self) -> ControllerInstance | None:
        self.election = None
        alive = [i for i in self.instances if i.alive]
        if not alive:
            self.master = None
            self.stats["offline"] += 1
            return None
        self.master = alive[0]
        self.engine.record("Elect", self.master.name, f"cluster{self.id}")
        self.plane.listener.on_master_elected(self)
        self.plane.channel.flush_pending()
        deferred, self.deferred = self.deferred, []
        for fn in deferred:
            fn()
        return self.master

    def instance_down(self, inst: ControllerInstance) -> None:
        inst.alive = False
        if inst is self.master:
            self.master = None
            if any(i.alive for i in self.instances):
                self.election = self.engine.after(self.plane.config.failover_detect_ms,
                                                  lambda _: self.elect_master(), target=f"cluster{self.id}")

    def instance_up(self, inst: ControllerInstance) -> None:
        inst.alive = True
        if self.master is None and self.election is None:
            self.elect_master()

    def when_master(self, fn: Callable[[], None]) -> None:
        """Run ``fn`` now if a master exists, otherwise right after the next election."""
        if self.master is not None:
            fn()
        else:
            self.deferred.append(fn)

    # -- control-channel dispatch

    def on_control(self, inst: ControllerInstance, msg: Message) -> None:
        kind = msg.kind
        if kind is MsgKind.FLOW_ACK:
            self.on_ack(msg.body["xid"])
        elif kind is MsgKind.PORT_STATUS:
            self.on_port_status(msg.body["link"], msg.body["up"], msg.body.get("at", self.engine.now))
        elif kind is MsgKind.LLDP_PROBE:
            self.on_probe(msg)
        elif kind is MsgKind.HELLO:
            switch = msg.body["switch"]
            cfg = self.plane.config

            def reply(_: Any) -> None:
                m = self.master
                if m is not None:
                    self.plane.channel.send_to_switch(
                        m, switch, Message(MsgKind.HELLO, m.name, f"s{switch}", {"switch": switch}))

            self.engine.after(cfg.handshake_ms, reply, target=inst.name)

    def on_port_status(self, key: LinkKey, up: bool, t_fail: float) -> None:
        if self.plane.plan.is_inter(key):
            if self.view.il_candidates.get(key) == up:
                return
            self.view.mark(key, up, self.engine.now)
            self.plane.listener.on_il_status(self, key, up, t_fail)
            return
        if self.view.status.get(key) == up:
            return  # the other endpoint already reported this
        self.view.mark(key, up, self.engine.now)
        if not up:
            handle_link_down(self, key, t_fail)

    # -- operations

    def dispatch(self, msgs: list[tuple[int, MsgKind, dict[str, Any]]], on_done: Callable[[Op], None] | None) -> Op:
        """Send a batch of FlowMod/FlowDel messages; the op completes at the last ack."""
        plane = self.plane
        op = Op(self.engine.now, set(), on_done)
        sender = self.master or self.instances[0]
        sends = []
        for switch, kind, body in msgs:
            xid = plane.next_xid()
            body = dict(body, xid=xid)
            op.pending.add(xid)
            self.ops[xid] = op
            sends.append((switch, Message(kind, sender.name, f"s{switch}", body)))
        if not op.pending:
            self._finish(op)
            return op
        op.timer = self.engine.after(plane.config.install_timeout_ms, lambda _: self._timeout(op),
                                     target=f"cluster{self.id}")
        for switch, m in sends:
            plane.channel.send_to_switch(sender, switch, m)
        return op

    def on_ack(self, xid: int) -> None:
        op = self.ops.pop(xid, None)
        if op is None or op.done_at is not None:
            return
        op.pending.discard(xid)
        if not op.pending:
            self.engine.cancel(op.timer)
            self._finish(op)

    def _timeout(self, op: Op) -> None:
        if op.done_at is not None:
            return
        op.timed_out = True
        self.stats["install_timeout"] += 1
        for xid in op.pending:
            self.ops.pop(xid, None)
        self._finish(op)

    def _finish(self, op: Op) -> None:
        op.done_at = self.engine.now
        if op.on_done is not None:
            op.on_done(op)

    # -- discovery

    def on_probe(self, msg: Message) -> None:
        key = msg.body["port"]
        if msg.body["origin_cluster"] == self.id:
            self.view.mark(key, True, self.engine.now)
        else:
            known = key in self.view.il_candidates
            self.view.mark(key, True, self.engine.now)
            if not known:
                self.plane.listener.on_il_discovered(self, key)

    def lldp_round(self, on_complete: Callable[[], None] | None = None, background: bool = False) -> None:
        """Probe every port of every switch; the view is finalized one period later."""
        m = self.master
        if m is None:
            return
        self.view.begin_round()
        topo = self.plane.topo
        for s in self.members:
            for _, key in topo.neighbors(s):
                body = {"origin": s, "origin_cluster": self.id, "port": key}
                self.plane.channel.send_to_switch(m, s, Message(MsgKind.LLDP_PROBE, m.name, f"s{s}", body))

        def done(_: Any) -> None:
            self.view.end_round(self.engine.now)
            if on_complete is not None:
                on_complete()

        self.engine.after(self.plane.config.lldp_period_ms, done, target=f"cluster{self.id}", background=background)

    def start_discovery(self) -> None:
        def tick(_: Any) -> None:
            if self.master is not None and not self.plane.channel.disconnected:
                self.lldp_round(background=True)
            self.engine.after(self.plane.config.lldp_period_ms, tick, target=f"cluster{self.id}", background=True)

        tick(None)

    # -- reconnection

    def on_switch_connected(self, switch: int) -> None:
        if switch in self.connected:
            return
        self.connected.add(switch)
        self.engine.record("Connected", f"s{switch}", f"cluster{self.id}")
        if self.connected == self.member_set:
            self.connected_at = self.engine.now
            self.when_master(lambda: self.lldp_round(on_complete=self._audit))

    def _audit(self) -> None:
        self.discovered_at = self.engine.now
        n_services = len({svc for svc, _ in self.segments})
        cost = self.plane.config.compute.c0_ms * n_services

        def done(_: Any) -> None:
            if not self.view.matches(self.plane.topo):
                self.stats["view_mismatch"] += 1
            self.converged_at = self.engine.now
            self.engine.record("Converged", f"cluster{self.id}", "-", f"services={n_services}")

        self.engine.after(cost, done, target=f"cluster{self.id}")

    # -- segments

    def local_services(self) -> set[str]:
        return {svc for svc, _ in self.segments}

    def fragments_of(self, service: str) -> list[Path]:
        return [p for (svc, _), p in sorted(self.segments.items()) if svc == service]


# --------------------------------------------------------------------------
# switch programming


def install_path(
    cluster: Cluster,
    service: str,
    path: Path,
    on_done: Callable[[Op], None] | None = None,
    context: Sequence[int] | None = None,
    count: bool = True,
) -> Op:
    """Send FlowMods for every switch of ``path`` in parallel.

    ``context`` is the full node sequence the path is a fragment of, so border
    entries get the right in/out links. Link flow counts of the path increase
    once every ack has returned.
    """
    plane = cluster.plane
    nodes = tuple(context) if context is not None else path.nodes
    start = _index_of(nodes, path.nodes)
    version = plane.next_version()
    entries = path_entries(nodes, range(start, start + len(path.nodes)), service, version)
    if len(path.nodes) == 1 and context is None:
        entries = []  # src == dst: nothing to program
    msgs = [(e.switch, MsgKind.FLOW_MOD, {"entry": e}) for e in entries]

    def done(op: Op) -> None:
        if count and not op.timed_out:
            plane.bump_links(path.links, +1)
        cluster.segment_version[service] = version
        if on_done is not None:
            on_done(op)

    return cluster.dispatch(msgs, done)


def delete_path(
    cluster: Cluster,
    service: str,
    path: Path,
    upto_version: int,
    on_done: Callable[[Op], None] | None = None,
    count: bool = True,
    fragment: bool = False,
) -> Op:
    """Mirror of :func:`install_path`: FlowDel to every switch, counts decrease at the last ack.

    A one-node path is a no-op unless ``fragment`` says it is a piece of a longer path.
    """
    plane = cluster.plane
    switches = path.nodes if (len(path.nodes) > 1 or fragment) else ()
    msgs = [(s, MsgKind.FLOW_DEL, {"service": service, "cookie": upto_version}) for s in switches]

    def done(op: Op) -> None:
        if count and not op.timed_out:
            plane.bump_links(path.links, -1)
        if on_done is not None:
            on_done(op)

    return cluster.dispatch(msgs, done)


def _index_of(seq: Sequence[int], sub: Sequence[int]) -> int:
    first = sub[0]
    for i, n in enumerate(seq):
        if n == first and tuple(seq[i:i + len(sub)]) == tuple(sub):
            return i
    raise ValueError(f"{sub} is not a fragment of {seq}")


# --------------------------------------------------------------------------
# reroute pipeline


def handle_link_down(cluster: Cluster, key: LinkKey, t_fail: float) -> None:
    """Reroute every local segment crossing ``key``; the sample lands in ``plane.samples``.

    Phases: traversal until the first PortStatus reached the master, serialized
    per-path computation, parallel install to the last ack, then parallel
    delete of the old entries to the last ack.
    """
    plane = cluster.plane
    engine = cluster.engine
    now = engine.now
    affected = sorted(sk for sk, p in cluster.segments.items() if key in p.links)
    per_path = plane.config.compute.per_path(len(cluster.internal_links))
    start = max(now, cluster.busy_until)
    compute_done = start + per_path * len(affected)
    cluster.busy_until = compute_done
    job = _RerouteJob(cluster, key, t_fail, now, affected)
    engine.schedule(compute_done, lambda _: job.dispatch(), target=f"cluster{cluster.id}")


class _RerouteJob:
    def __init__(self, cluster: Cluster, key: LinkKey, t_fail: float, t_detect: float,
                 affected: list[tuple[str, int]]) -> None:
        self.cluster = cluster
        self.key = key
        self.t_fail = t_fail
        self.t_detect = t_detect
        self.affected = affected
        self.changes: list[RerouteChange] = []
        self.failed: list[str] = []

    def dispatch(self) -> None:
        c = self.cluster
        plane = c.plane
        self.t_computed = c.engine.now
        msgs: list[tuple[int, MsgKind, dict[str, Any]]] = []
        graph = c.view.graph
        for sk in self.affected:
            service, _ = sk
            old = c.segments[sk]
            full = plane.service_nodes.get(service)
            if full is None:
                continue  # not committed end to end yet
            idx = _index_of(full, old.nodes)
            outside = set(full[:idx]) | set(full[idx + len(old.nodes):])
            new = shortest_path(graph, old.src, old.dst, excluded_nodes=outside)
            if new is None:
                self.failed.append(service)
                continue
            new_full = full[:idx] + new.nodes + full[idx + len(old.nodes):]
            version = plane.next_version()
            old_version = c.segment_version.get(service, 0)
            for e in path_entries(new_full, range(idx, idx + len(new.nodes)), service, version):
                msgs.append((e.switch, MsgKind.FLOW_MOD, {"entry": e}))
            self.changes.append(RerouteChange(service, full, new_full, old, new, old_version, version))
        if self.failed:
            c.stats["reroute_failed"] += len(self.failed)
            plane.stats["services_failed"] += len(self.failed)
            log.warning("cluster %d: no alternative path for %s", c.id, self.failed)
        c.dispatch(msgs, self._installed)

    def _installed(self, op: Op) -> None:
        c = self.cluster
        plane = c.plane
        self.t_installed = c.engine.now
        msgs = []
        for ch in self.changes:
            c.segments.pop((ch.service, ch.old_fragment.src), None)
            c.segments[(ch.service, ch.new_fragment.src)] = ch.new_fragment
            c.segment_version[ch.service] = ch.new_version
            plane.service_nodes[ch.service] = ch.new_nodes
            plane.bump_links(ch.new_fragment.links, +1)
            for s in ch.old_fragment.nodes:
                msgs.append((s, MsgKind.FLOW_DEL, {"service": ch.service, "cookie": ch.new_version - 1}))
        for service in self.failed:
            for sk in [sk for sk in c.segments if sk[0] == service]:
                del c.segments[sk]
        c.dispatch(msgs, self._deleted)

    def _deleted(self, op: Op) -> None:
        c = self.cluster
        plane = c.plane
        for ch in self.changes:
            plane.bump_links(ch.old_fragment.links, -1)
        now = c.engine.now
        sample = LatencySample(
            "", "", 0,
            traversal_ms=self.t_detect - self.t_fail,
            computation_ms=self.t_computed - self.t_detect,
            install_ms=self.t_installed - self.t_computed,
            delete_ms=now - self.t_installed,
            paths_rerouted=len(self.changes),
        )
        rec = SampleRecord("reroute", c.id, self.key, self.t_fail, sample, self.t_installed, tuple(self.failed))
        plane.samples.append(rec)
        c.engine.record("Rerouted", f"cluster{c.id}", "-", f"link={self.key[0]}-{self.key[1]} paths={len(self.changes)}")
        plane.listener.on_rerouted(c, self.changes, rec)


# --------------------------------------------------------------------------
# the assembled plane


class ControlPlane:
    """Engine, switches, clusters, control channel and bus for one run."""

    def __init__(
        self,
        topo: Topology,
        plan: ClusterPlan,
        config: ControlConfig | None = None,
        instances: int | Sequence[int] = 1,
        seed: int = 0,
        trace: bool = False,
        max_events: int = 10_000_000,
    ) -> None:
        self.topo = topo.copy()
        self.plan = plan
        self.config = config or ControlConfig()
        self.seed = seed
        self.engine = Engine(seed, max_events=max_events, trace=trace)
        self.delivery = Delivery(self.engine)
        self.listener: PlaneListener = PlaneListener()
        self.stats: Counter[str] = Counter()
        self.samples: list[SampleRecord] = []
        self.service_nodes: dict[str, tuple[int, ...]] = {}
        self._xid = 0
        self._version = 0

        counts = [instances] * plan.k if isinstance(instances, int) else list(instances)
        if len(counts) != plan.k:
            raise ValueError(f"need an instance count per cluster, got {counts} for k={plan.k}")
        self.switches = {n: Switch(n, self) for n in self.topo.nodes}
        self.clusters = [Cluster(c, plan.members(c), self, counts[c]) for c in plan.clusters]
        self.instances = {i.name: i for cl in self.clusters for i in cl.instances}
        self._cd = plan.control_delays(self.topo)
        self.channel = ControlChannel(
            self.delivery, self.control_delay, self.switches, self._master_of)  # type: ignore[arg-type]
        self._inter = self._inter_delays()
        self.bus = Bus(self.delivery, lambda name: self.instances[name].cluster.id,
                       lambda a, b: self._inter[(a, b)], self.config.intra_bus_delay_ms)
        for cl in self.clusters:
            for inst in cl.instances:
                self.bus.subscribe(BusTopic.intra(cl.id), inst)
                self.bus.subscribe(INTER, inst)
            cl.elect_master()
            touching = [k for k in plan.inter_links(self.topo) if k[0] in cl.member_set or k[1] in cl.member_set]
            cl.view.sync(self.topo, 0.0, touching)

    # -- helpers

    def control_delay(self, switch: int) -> float:
        return self._cd[switch]

    def _master_of(self, switch: int) -> ControllerInstance | None:
        return self.cluster_of_switch(switch).master

    def cluster_of_switch(self, switch: int) -> Cluster:
        return self.clusters[self.plan.cluster_of(switch)]

    def _inter_delays(self) -> dict[tuple[int, int], float]:
        out = {}
        access = self.plan.access_delay_ms
        for a in self.plan.clusters:
            dist = distances_from(self.topo, self.plan.attachments[a])
            for b in self.plan.clusters:
                if a != b:
                    out[(a, b)] = min(dist[n] for n in self.plan.attachments[b]) + 2 * access
        return out

    def inter_delay(self, a: int, b: int) -> float:
        return self._inter[(a, b)]

    def next_xid(self) -> int:
        self._xid += 1
        return self._xid

    def next_version(self) -> int:
        self._version += 1
        return self._version

    def bump_links(self, links: Iterable[LinkKey], delta: int) -> None:
        for k in links:
            link = self.topo.links[k]
            link.flow_count += delta
            if link.flow_count < 0:
                raise AssertionError(f"negative flow count on {k}")

    def run(self, until: float | None = None) -> float:
        return self.engine.run(until)

    # -- fast provisioning (setup phase, not measured)

    def provision_path(self, service: str, nodes: Sequence[int],
                       frags: Sequence[tuple[int, int, int]] | None = None) -> None:
        """Write a pseudo-wire's flows, segments and counters directly.

        ``frags`` may carry the path's ``split_fragments`` if the caller already has them.
        """
        nodes = tuple(nodes)
        version = self.next_version()
        keys = [link_key(u, v) for u, v in zip(nodes, nodes[1:])]
        hops = [None, *keys, None]
        for i, n in enumerate(nodes):
            self.switches[n].install(FlowEntry(n, service, hops[i], hops[i + 1], FlowRole.PRIMARY, version))
        links = self.topo.links
        if frags is None:
            frags = split_fragments(nodes, self.plan.cluster_of)
        for cid, a, b in frags:
            cl = self.clusters[cid]
            delay = sum(links[k].delay_ms for k in keys[a:b - 1])
            cl.segments[(service, nodes[a])] = Path(nodes[a:b], delay)
            cl.segment_version[service] = version
        self.service_nodes[service] = nodes
        self.bump_links(keys, +1)

    def drop_service_segments(self, service: str) -> None:
        for cl in self.clusters:
            for sk in [sk for sk in cl.segments if sk[0] == service]:
                del cl.segments[sk]
        self.service_nodes.pop(service, None)

    # -- failures

    def inject(self, plan: FailurePlan) -> None:
        for e in plan:
            self._validate(e.action, e.target)
        for e in plan:
            self.engine.schedule(e.t_ms, lambda entry: self._apply(entry.action, entry.target), e,
                                 target="failure")

    def _validate(self, action: FailureAction, target: Any) -> None:
        if action in (FailureAction.LINK_DOWN, FailureAction.LINK_UP):
            if target is None or link_key(*target) not in self.topo.links:
                raise ConfigError(f"unknown link {target}")
        elif action in (FailureAction.INSTANCE_DOWN, FailureAction.INSTANCE_UP):
            if target not in self.instances:
                raise ConfigError(f"unknown instance {target}")

    def _apply(self, action: FailureAction, target: Any) -> None:
        self.engine.record(action.value, "plan", "-", "" if target is None else str(target).replace(" ", ""))
        if action in (FailureAction.LINK_DOWN, FailureAction.LINK_UP):
            self.set_link(link_key(*target), action is FailureAction.LINK_UP)
        elif action is FailureAction.INSTANCE_DOWN:
            inst = self.instances[target]
            inst.cluster.instance_down(inst)
        elif action is FailureAction.INSTANCE_UP:
            inst = self.instances[target]
            inst.cluster.instance_up(inst)
        elif action is FailureAction.FULL_CONTROL_DISCONNECT:
            self.disconnect_all()
        elif action is FailureAction.CONTROL_RECONNECT:
            self.reconnect_all()

    def set_link(self, key: LinkKey, up: bool) -> None:
        link = self.topo.links[key]
        status = LinkStatus.UP if up else LinkStatus.DOWN
        if link.status is status:
            return
        link.status = status
        t = self.engine.now
        for s in key:
            body = {"switch": s, "link": key, "up": up, "at": t}
            self.channel.send_to_controller(s, Message(MsgKind.PORT_STATUS, f"s{s}", "", body))

    def disconnect_all(self) -> None:
        self.channel.disconnected = True
        for cl in self.clusters:
            cl.connected = set()
            cl.converged_at = cl.connected_at = cl.discovered_at = None
            cl.view.clear()

    def reconnect_all(self) -> None:
        """Every switch reconnects after a seeded jitter and handshakes with its master."""
        self.channel.disconnected = False
        self.reconnect_started = self.engine.now
        rng = seeded_rng(self.seed, 7)
        jitter = {n: rng.uniform(0.0, self.config.reconnect_jitter_ms) for n in sorted(self.switches)}
        for n in sorted(self.switches):
            def hello(node: int) -> None:
                self.channel.send_to_controller(
                    node, Message(MsgKind.HELLO, f"s{node}", "", {"switch": node}))
            self.engine.after(jitter[n], hello, n, target=f"s{n}")

    def convergence_time(self) -> float | None:
        times = [cl.converged_at for cl in self.clusters]
        if any(t is None for t in times):
            return None
        return max(times) - self.reconnect_started  # type: ignore[type-var]

    # -- invariants

    def primary_entries_on_down_links(self) -> list[FlowEntry]:
        down = {k for k, link in self.topo.links.items() if not link.up}
        bad: list[FlowEntry] = []
        if not down:
            return bad
        for sw in self.switches.values():
            for e in sw.entries():
                if e.role is FlowRole.PRIMARY and (e.in_link in down or e.out_link in down):
                    bad.append(e)
        return bad

    def recount_flows(self, services: Iterable[str] | None = None) -> dict[LinkKey, int]:
        counts = {k: 0 for k in self.topo.links}
        names = self.service_nodes if services is None else services
        for svc in names:
            for k in Path(self.service_nodes[svc], 0.0).links:
                counts[k] += 1
        return counts

    def masters(self) -> dict[int, str | None]:
        return {n: (m.name if (m := self._master_of(n)) else None) for n in self.switches}
