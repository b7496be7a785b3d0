"""Inter-cluster managers running on top of each cluster master.

* Topology Manager: advertises inter-cluster links (IlAd) and end points (EpAd).
* Service Manager: installs cross-cluster pseudo-wires with a reserve/commit
  exchange, releasing and retrying on refusal.
* Backup Manager: keeps a link-disjoint backup per inter-cluster link and swaps
  traffic onto it locally when the link fails.

Each cluster's stores live in a :class:`ClusterState` shared by its instances,
which stands in for the replicated in-memory map the instances keep in sync.
Volatile two-phase bookkeeping lives in the master's :class:`IconaApp` and is
lost when that instance dies; the next master resumes from the stored record.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

from .ctrl import (
    Cluster,
    ControlPlane,
    ControllerInstance,
    FlowEntry,
    FlowRole,
    Op,
    PlaneListener,
    RerouteChange,
    SampleRecord,
    delete_path,
    install_path,
    loop_erase,
    split_fragments,
)
from .metrics import LatencySample
from .simcore import INTER, BusTopic, Message, MsgKind, SimEvent
from .topo import LinkKey, Path, Topology, disjoint_backup_path, link_key, shortest_path, shortest_path_tree

log = logging.getLogger(__name__)


class ServiceState(enum.Enum):
    RESERVED = "Reserved"
    INSTALLING = "Installing"
    INSTALLED = "Installed"
    RELEASING = "Releasing"
    RELEASED = "Released"
    FAILED = "Failed"


S = ServiceState
_TRANSITIONS: dict[ServiceState | None, frozenset[ServiceState]] = {
    None: frozenset({S.RESERVED, S.INSTALLING, S.FAILED}),
    S.RESERVED: frozenset({S.INSTALLING, S.RELEASED}),
    S.INSTALLING: frozenset({S.INSTALLED, S.RELEASING}),
    S.INSTALLED: frozenset({S.RELEASING}),
    S.RELEASING: frozenset({S.RELEASED}),
    S.RELEASED: frozenset({S.RESERVED, S.INSTALLING, S.FAILED}),
    S.FAILED: frozenset(),
}


class TransitionError(ValueError):
    pass


class ServiceError(ValueError):
    """Unknown end point or service id."""


@dataclass(frozen=True)
class EndPoint:
    id: str
    node: int


@dataclass(frozen=True)
class ServiceRecord:
    id: str
    src: EndPoint
    dst: EndPoint
    state: ServiceState
    initiator: int
    global_path: tuple[int, ...] = ()
    segments: tuple[tuple[int, tuple[int, ...]], ...] = ()
    ils_used: tuple[LinkKey, ...] = ()
    bandwidth_gbps: float = 0.0
    attempt: int = 0
    revision: int = 0
    reason: str = ""

    @classmethod
    def new(cls, id: str, src: EndPoint, dst: EndPoint, state: ServiceState, initiator: int,
            **kw: Any) -> "ServiceRecord":
        check_transition(None, state)
        return cls(id, src, dst, state, initiator, **kw)

    def evolve(self, **changes: Any) -> "ServiceRecord":
        state = changes.get("state", self.state)
        if state is not self.state:
            check_transition(self.state, state)
        return replace(self, revision=self.revision + 1, **changes)

    def with_path(self, nodes: Sequence[int], cluster_of: Callable[[int], int]) -> "ServiceRecord":
        segs, ils = segment_path(nodes, cluster_of)
        return self.evolve(global_path=tuple(nodes), segments=segs, ils_used=ils)

    def reconstruct(self) -> tuple[int, ...]:
        out: list[int] = []
        for _, nodes in self.segments:
            out.extend(nodes)
        return tuple(out)

    @property
    def clusters(self) -> list[int]:
        seen: list[int] = []
        for c, _ in self.segments:
            if c not in seen:
                seen.append(c)
        return seen

    def trace(self) -> str:
        return f"{self.id}:{self.state.value}:a{self.attempt}:r{self.revision}"


def check_transition(old: ServiceState | None, new: ServiceState) -> None:
    if new not in _TRANSITIONS[old]:
        raise TransitionError(f"illegal service transition {old} -> {new}")


def segment_path(nodes: Sequence[int], cluster_of: Callable[[int], int]):
    """Per-cluster fragments of a path and the inter-cluster links between them."""
    return segments_from(nodes, split_fragments(nodes, cluster_of))


def segments_from(nodes: Sequence[int], frags: Sequence[tuple[int, int, int]]):
    segs = tuple((c, tuple(nodes[a:b])) for c, a, b in frags)
    ils = tuple(link_key(nodes[b - 1], nodes[b]) for _, _, b in frags[:-1])
    return segs, ils


@dataclass(frozen=True)
class InterClusterLink:
    link: LinkKey
    clusters: tuple[int, int]
    delay_ms: float
    available_gbps: float
    flow_count: int
    up: bool = True

    def trace(self) -> str:
        return f"{self.link[0]}-{self.link[1]}"


@dataclass(frozen=True)
class EndPointAd:
    ep: EndPoint
    owner: int
    metrics_to_ils: tuple[tuple[LinkKey, float, float], ...]  # (il, delay_ms, bandwidth_gbps)


@dataclass
class BackupLink:
    for_il: LinkKey
    path: Path
    state: str = "Standby"  # or "Active"

    def __post_init__(self) -> None:
        if self.for_il in self.path.links:
            raise ValueError("backup path reuses its own inter-cluster link")


@dataclass
class LocalTxn:
    """A participant's hold on its part of a pseudo-wire."""

    service: str
    attempt: int
    initiator: int
    fragments: list[tuple[int, ...]]
    nodes: tuple[int, ...]
    bandwidth_gbps: float
    phase: str = "reserved"  # reserved | installing | installed | releasing | released
    expiry: SimEvent | None = None
    release_pending: bool = False
    held: list[LinkKey] = field(default_factory=list)
    version: int = 0


@dataclass
class TxnMeta:
    """Replicated per-service two-phase bookkeeping kept by the initiator cluster."""

    attempt: int
    started: float
    excluded: set[LinkKey] = field(default_factory=set)


@dataclass
class ClusterState:
    services: dict[str, ServiceRecord] = field(default_factory=dict)
    ils: dict[LinkKey, InterClusterLink] = field(default_factory=dict)
    eps: dict[str, EndPointAd] = field(default_factory=dict)
    backups: dict[LinkKey, BackupLink] = field(default_factory=dict)
    local: dict[str, LocalTxn] = field(default_factory=dict)
    meta: dict[str, TxnMeta] = field(default_factory=dict)
    restoring: int = 0
    ads_dirty: bool = False
    ads_scheduled: bool = False


@dataclass
class Txn:
    service: str
    attempt: int
    clusters: list[int]
    acks: set[int] = field(default_factory=set)
    installed: set[int] = field(default_factory=set)
    decided: str | None = None
    timer: SimEvent | None = None


# protocol kinds addressed to one cluster
_ADDRESSED = frozenset({
    MsgKind.RESERVE, MsgKind.RESERVE_ACK, MsgKind.RESERVE_NACK, MsgKind.COMMIT,
    MsgKind.INSTALLED, MsgKind.INSTALL_FAILED, MsgKind.RELEASE,
})

FaultScript = Callable[[str, str, int, int], bool]  # (phase, service, attempt, cluster) -> fail?


class IconaApp:
    """The managers inside one controller instance; only the master acts."""

    def __init__(self, layer: "IconaLayer", inst: ControllerInstance) -> None:
        self.layer = layer
        self.inst = inst
        self.txns: dict[str, Txn] = {}
        inst.app = self

    @property
    def cluster(self) -> Cluster:
        return self.inst.cluster

    def on_message(self, msg: Message) -> None:
        cl = self.cluster
        if self.inst.is_master:
            self.layer.handle(cl.id, msg)
        elif cl.master is None and self.inst is next((i for i in cl.instances if i.alive), None):
            # no master right now: queue once per cluster until the election
            cl.deferred.append(lambda: self.layer.handle(cl.id, msg))


class IconaLayer(PlaneListener):
    """TM, SM and BM for every cluster of a :class:`ControlPlane`."""

    def __init__(
        self,
        plane: ControlPlane,
        endpoints: Iterable[EndPoint] | None = None,
        fault: FaultScript | None = None,
    ) -> None:
        self.plane = plane
        self.engine = plane.engine
        self.config = plane.config
        plane.listener = self
        self.state = {cl.id: ClusterState() for cl in plane.clusters}
        self.apps = {name: IconaApp(self, inst) for name, inst in plane.instances.items()}
        eps = list(endpoints) if endpoints is not None else [EndPoint(f"ep{n}", n) for n in sorted(plane.topo.nodes)]
        self.endpoints = {ep.id: ep for ep in eps}
        for ep in eps:
            if ep.node not in plane.topo.nodes:
                raise ServiceError(f"end point {ep.id} on unknown node {ep.node}")
        self.fault = fault
        self.crash_on: dict[tuple[str, int], str] = {}
        self.protocol_log: list[tuple[float, str, str, int, int]] = []
        self.il_samples: list[SampleRecord] = []
        self.completed_at: dict[str, float] = {}
        self.stats: Counter[str] = Counter()
        self._next_service = 0
        self._ad_timers_started = False

    # -- helpers

    def cluster(self, cid: int) -> Cluster:
        return self.plane.clusters[cid]

    def master_app(self, cid: int) -> IconaApp | None:
        m = self.cluster(cid).master
        return None if m is None else self.apps[m.name]

    def cluster_of(self, node: int) -> int:
        return self.plane.plan.assignment[node]

    def _log(self, what: str, service: str, attempt: int, cluster: int) -> None:
        self.protocol_log.append((self.engine.now, what, service, attempt, cluster))
        self.engine.record(what, f"cluster{cluster}", "-", f"service={service} attempt={attempt}")
        victim = self.crash_on.pop((what, attempt), None)
        if victim is not None:
            inst = self.plane.instances[victim]
            self.engine.record("InstanceDown", "script", victim)
            inst.cluster.instance_down(inst)

    def publish(self, cid: int, kind: MsgKind, body: dict[str, Any], topic: BusTopic = INTER) -> None:
        m = self.cluster(cid).master
        if m is None:
            self.stats["publish_without_master"] += 1
            return
        self.plane.bus.publish(topic, Message(kind, m.name, str(topic), body), m)

    def store(self, cid: int, rec: ServiceRecord, replicate: bool = False) -> None:
        self.state[cid].services[rec.id] = rec
        if replicate:
            self.publish(cid, MsgKind.SERVICE_UPDATE, {"service": rec.id, "event": "replica", "record": rec},
                         BusTopic.intra(cid))

    def broadcast_record(self, cid: int, rec: ServiceRecord, event: str) -> None:
        self.store(cid, rec)
        self.publish(cid, MsgKind.SERVICE_UPDATE, {"service": rec.id, "event": event, "record": rec})

    # -- message dispatch (called for the cluster's master)

    def handle(self, cid: int, msg: Message) -> None:
        body = msg.body
        kind = msg.kind
        if kind in _ADDRESSED:
            target = body["to"] if kind in (MsgKind.RESERVE_ACK, MsgKind.RESERVE_NACK, MsgKind.INSTALLED,
                                             MsgKind.INSTALL_FAILED) else body["cluster"]
            if target != cid:
                return
        if kind is MsgKind.RESERVE:
            self.p_reserve(cid, body)
        elif kind is MsgKind.COMMIT:
            self.p_commit(cid, body)
        elif kind is MsgKind.RELEASE:
            self.p_release(cid, body)
        elif kind in (MsgKind.RESERVE_ACK, MsgKind.RESERVE_NACK, MsgKind.INSTALLED, MsgKind.INSTALL_FAILED):
            self.i_reply(cid, kind, body)
        elif kind is MsgKind.SERVICE_UPDATE:
            if body["event"] != "replica":
                self._apply_update(cid, body["record"])
        elif kind is MsgKind.IL_AD:
            self._apply_il_ad(cid, body)
        elif kind is MsgKind.EP_AD:
            self.state[cid].eps[body["ep"].id] = EndPointAd(body["ep"], body["owner"], body["metrics"])
        elif kind is MsgKind.BIL_REROUTED:
            self._apply_bil(cid, body["il"], tuple(body["bil"]), body["services"])
        elif kind is MsgKind.LINK_DOWN_NOTICE:
            self._on_link_down_notice(cid, body["link"])

    def _apply_update(self, cid: int, rec: ServiceRecord) -> None:
        cur = self.state[cid].services.get(rec.id)
        if cur is None or (rec.attempt, rec.revision) >= (cur.attempt, cur.revision) or rec.state is S.FAILED:
            self.state[cid].services[rec.id] = rec

    # ======================================================================
    # Topology Manager

    def local_ils(self, cid: int) -> list[LinkKey]:
        cl = self.cluster(cid)
        return sorted(cl.view.il_candidates)

    def il_record(self, key: LinkKey) -> InterClusterLink:
        link = self.plane.topo.links[key]
        ca, cb = self.cluster_of(key[0]), self.cluster_of(key[1])
        return InterClusterLink(key, (ca, cb), link.delay_ms, link.available_gbps, link.flow_count, link.up)

    def ep_ad(self, cid: int, ep: EndPoint) -> EndPointAd:
        cl = self.cluster(cid)
        metrics = []
        tree = shortest_path_tree(cl.view.graph, ep.node)
        for il in self.local_ils(cid):
            border = il[0] if il[0] in cl.member_set else il[1]
            p = tree.get(border)
            if p is None:
                continue
            bw = min((self.plane.topo.links[k].available_gbps for k in p.links), default=float("inf"))
            metrics.append((il, round(p.delay_ms, 6), bw))
        return EndPointAd(ep, cid, tuple(metrics))

    def tm_advertise(self, cid: int) -> None:
        """Publish IlAd for each attached IL and EpAd for each local EP."""
        st = self.state[cid]
        cl = self.cluster(cid)
        if cl.master is None:
            return
        if st.restoring:
            st.ads_dirty = True
            return
        st.ads_dirty = False
        for key in self.local_ils(cid):
            il = self.il_record(key)
            st.ils[key] = il
            self.publish(cid, MsgKind.IL_AD, {
                "il": il, "clusters": list(il.clusters), "delay_ms": il.delay_ms,
                "available_gbps": il.available_gbps, "flow_count": il.flow_count, "up": il.up,
            })
        for ep in self._local_eps(cid):
            ad = self.ep_ad(cid, ep)
            st.eps[ep.id] = ad
            self.publish(cid, MsgKind.EP_AD, {"ep": ep, "node": ep.node, "owner": cid, "metrics": ad.metrics_to_ils})

    def _local_eps(self, cid: int) -> list[EndPoint]:
        members = self.cluster(cid).member_set
        return [ep for ep in self.endpoints.values() if ep.node in members]

    def _apply_il_ad(self, cid: int, body: dict[str, Any]) -> None:
        il: InterClusterLink = body["il"]
        st = self.state[cid]
        old = st.ils.get(il.link)
        st.ils[il.link] = il
        if old != il and il.link in self.cluster(cid).view.il_candidates:
            self.bm_precompute(cid)

    def mark_ads_dirty(self, cids: Iterable[int]) -> None:
        for cid in set(cids):
            st = self.state[cid]
            st.ads_dirty = True
            if st.ads_scheduled or st.restoring:
                continue
            st.ads_scheduled = True

            def flush(c: int) -> None:
                self.state[c].ads_scheduled = False
                if self.state[c].ads_dirty:
                    self.tm_advertise(c)

            self.engine.after(0.0, flush, cid, target=f"tm{cid}")

    def start_tm(self) -> None:
        """Periodic advertisement timers (excluded from quiescence)."""
        if self._ad_timers_started:
            return
        self._ad_timers_started = True
        for cl in self.plane.clusters:
            def tick(cid: int) -> None:
                self.tm_advertise(cid)
                self.engine.after(self.config.tm_period_ms, tick, cid, target=f"tm{cid}", background=True)

            self.engine.after(0.0, tick, cl.id, target=f"tm{cl.id}", background=True)

    def on_il_discovered(self, cluster: Cluster, key: LinkKey) -> None:
        self.mark_ads_dirty([cluster.id])

    def sync_stores(self) -> None:
        """Fill every store from ground truth, as after a completed advertisement round."""
        ils = {k: self.il_record(k) for k in self.plane.plan.inter_links(self.plane.topo)}
        for cl in self.plane.clusters:
            st = self.state[cl.id]
            st.ils = dict(ils)
        ads = {}
        for cl in self.plane.clusters:
            for ep in self._local_eps(cl.id):
                ads[ep.id] = self.ep_ad(cl.id, ep)
        for st in self.state.values():
            st.eps = dict(ads)

    # ======================================================================
    # Service Manager: initiator side

    def new_service_id(self) -> str:
        sid = f"pw{self._next_service}"
        self._next_service += 1
        return sid

    def provision(self, src: str, dst: str, nodes: Sequence[int], service: str | None = None) -> ServiceRecord:
        """Setup fast path: an Installed pseudo-wire written straight into every store."""
        sid = service or self.new_service_id()
        a, b = self._ep(src), self._ep(dst)
        if nodes[0] != a.node or nodes[-1] != b.node:
            raise ServiceError(f"path {nodes} does not join {src} and {dst}")
        frags = split_fragments(nodes, self.cluster_of)
        segs, ils = segments_from(nodes, frags)
        # same record the new -> with_path -> Installed chain would give, built in one step
        rec = ServiceRecord(sid, a, b, S.INSTALLED, self.cluster_of(a.node), tuple(nodes), segs, ils,
                            revision=2)
        self.plane.provision_path(sid, nodes, frags)
        for st in self.state.values():
            st.services[sid] = rec
        return rec

    def _ep(self, ep_id: str) -> EndPoint:
        try:
            return self.endpoints[ep_id]
        except KeyError:
            raise ServiceError(f"unknown end point {ep_id}") from None

    def sm_install(self, src: str, dst: str, bandwidth_gbps: float = 0.0, service: str | None = None) -> str:
        """Start installing a pseudo-wire; the outcome is in the stores once the run quiesces."""
        if bandwidth_gbps < 0:
            raise ValueError("bandwidth must be non-negative")
        a, b = self._ep(src), self._ep(dst)
        sid = service or self.new_service_id()
        cid = self.cluster_of(a.node)

        def start() -> None:
            st = self.state[cid]
            st.meta[sid] = TxnMeta(0, self.engine.now)
            rec = ServiceRecord(sid, a, b, S.RELEASED, cid, bandwidth_gbps=bandwidth_gbps)
            self._attempt(cid, rec, None)

        self.cluster(cid).when_master(start)
        return sid

    def global_path(self, cid: int, src: int, dst: int, excluded: Iterable[LinkKey]) -> Path | None:
        """Best path on the initiator's stitched view: own view, IL store, remote links assumed up."""
        cl = self.cluster(cid)
        st = self.state[cid]
        skip = set(excluded)
        skip.update(k for k, up in cl.view.status.items() if not up)
        skip.update(k for k, il in st.ils.items() if not il.up)
        skip.update(k for k, up in cl.view.il_candidates.items() if not up)
        return shortest_path(self.plane.topo, src, dst, excluded=skip, ignore_status=True)

    def _attempt(self, cid: int, prev: ServiceRecord, old_state: ServiceState | None) -> None:
        """Run the next attempt for ``prev`` (whose state is Released or new)."""
        st = self.state[cid]
        meta = st.meta[prev.id]
        attempt = prev.attempt + 1
        if attempt > self.config.max_retries + 1:
            self._fail(cid, prev, "retries exhausted")
            return
        meta.attempt = attempt
        meta.started = self.engine.now
        path = self.global_path(cid, prev.src.node, prev.dst.node, meta.excluded)
        if path is None:
            self._fail(cid, prev, "no path")
            return
        rec = prev
        fresh = prev.id not in st.services
        segs, ils = segment_path(path.nodes, self.cluster_of)
        clusters = []
        for c, _ in segs:
            if c not in clusters:
                clusters.append(c)
        if fresh:
            state0 = S.INSTALLING if clusters == [cid] else S.RESERVED
            rec = ServiceRecord.new(prev.id, prev.src, prev.dst, state0, cid, bandwidth_gbps=prev.bandwidth_gbps)
            rec = replace(rec, attempt=attempt, global_path=path.nodes, segments=segs, ils_used=ils)
        else:
            rec = rec.evolve(state=S.RESERVED, attempt=attempt, global_path=path.nodes, segments=segs, ils_used=ils)
        app = self.master_app(cid)
        assert app is not None
        txn = Txn(rec.id, attempt, clusters)
        app.txns[rec.id] = txn
        if clusters == [cid]:
            # single cluster: install directly, no reservation round
            if rec.state is S.RESERVED:
                rec = rec.evolve(state=S.INSTALLING)
            self.store(cid, rec, replicate=True)
            txn.decided = "commit"
            self._log("LocalInstall", rec.id, attempt, cid)
            self._send_commit(cid, rec, cid)
            return
        self.store(cid, rec, replicate=True)
        txn.timer = self.engine.after(self.config.reserve_timeout_ms, lambda _: self._reserve_timeout(cid, rec.id, attempt),
                                      target=f"sm{cid}")
        for c in clusters:
            frags = [list(n) for cc, n in segs if cc == c]
            body = {"service": rec.id, "attempt": attempt, "cluster": c, "segments": frags,
                    "bandwidth_gbps": rec.bandwidth_gbps, "initiator": cid, "path": list(path.nodes)}
            self._log("ReserveSent", rec.id, attempt, c)
            self._to_cluster(cid, c, MsgKind.RESERVE, body)

    def _to_cluster(self, sender: int, target: int, kind: MsgKind, body: dict[str, Any]) -> None:
        """Inter-topic message addressed to ``target``; handled in place when local."""
        if target == sender:
            self.engine.after(0.0, lambda _: self._local(target, kind, body), target=f"sm{target}")
        else:
            self.publish(sender, kind, body)

    def _local(self, cid: int, kind: MsgKind, body: dict[str, Any]) -> None:
        cl = self.cluster(cid)
        msg = Message(kind, f"cluster{cid}", f"cluster{cid}", body)
        cl.when_master(lambda: self.handle(cid, msg))

    def _send_commit(self, cid: int, rec: ServiceRecord, target: int) -> None:
        body = {"service": rec.id, "attempt": rec.attempt, "cluster": target, "initiator": cid,
                "segments": [list(n) for c, n in rec.segments if c == target], "path": list(rec.global_path),
                "bandwidth_gbps": rec.bandwidth_gbps}
        self._log("CommitSent", rec.id, rec.attempt, target)
        self._to_cluster(cid, target, MsgKind.COMMIT, body)

    def _send_release(self, cid: int, rec: ServiceRecord) -> None:
        for c in rec.clusters:
            self._log("ReleaseSent", rec.id, rec.attempt, c)
            self._to_cluster(cid, c, MsgKind.RELEASE, {"service": rec.id, "attempt": rec.attempt, "cluster": c})

    def i_reply(self, cid: int, kind: MsgKind, body: dict[str, Any]) -> None:
        app = self.master_app(cid)
        if app is None:
            return
        sid, attempt, sender = body["service"], body["attempt"], body["cluster"]
        txn = app.txns.get(sid)
        rec = self.state[cid].services.get(sid)
        if txn is None or rec is None or txn.attempt != attempt:
            self.stats["stale_reply"] += 1
            return
        if kind is MsgKind.RESERVE_ACK:
            self._log("AckRecv", sid, attempt, sender)
            if txn.decided is None:
                txn.acks.add(sender)
                if txn.acks.issuperset(txn.clusters):
                    txn.decided = "commit"
                    self.engine.cancel(txn.timer)
                    rec = rec.evolve(state=S.INSTALLING)
                    self.store(cid, rec, replicate=True)
                    for c in txn.clusters:
                        self._send_commit(cid, rec, c)
        elif kind is MsgKind.RESERVE_NACK:
            self._log("NackRecv", sid, attempt, sender)
            if txn.decided is None:
                bottleneck = body["bottleneck"]
                if bottleneck is not None:
                    self.state[cid].meta[sid].excluded.add(link_key(*bottleneck))
                self._abort(cid, app, txn, rec, f"nack from cluster {sender}: {body['reason']}")
        elif kind is MsgKind.INSTALLED:
            self._log("InstalledRecv", sid, attempt, sender)
            if txn.decided == "commit":
                txn.installed.add(sender)
                if txn.installed.issuperset(txn.clusters):
                    self._complete(cid, app, txn, rec)
        elif kind is MsgKind.INSTALL_FAILED:
            self._log("InstallFailedRecv", sid, attempt, sender)
            if txn.decided == "commit":
                self._abort(cid, app, txn, rec, f"install failed in cluster {sender}: {body['reason']}")

    def _complete(self, cid: int, app: IconaApp, txn: Txn, rec: ServiceRecord) -> None:
        txn.decided = "done"
        app.txns.pop(rec.id, None)
        rec = rec.evolve(state=S.INSTALLED, reason="")
        self.completed_at[rec.id] = self.engine.now
        self.plane.service_nodes[rec.id] = rec.global_path
        self.plane.bump_links(rec.ils_used, +1)
        self._log("ServiceInstalled", rec.id, rec.attempt, cid)
        self.broadcast_record(cid, rec, "installed")
        self.mark_ads_dirty(self._il_clusters(rec.ils_used))

    def _il_clusters(self, ils: Iterable[LinkKey]) -> list[int]:
        return [self.cluster_of(n) for k in ils for n in k]

    def _abort(self, cid: int, app: IconaApp, txn: Txn, rec: ServiceRecord, reason: str) -> None:
        txn.decided = "abort"
        self.engine.cancel(txn.timer)
        app.txns.pop(rec.id, None)
        if rec.state is S.INSTALLING:
            rec = rec.evolve(state=S.RELEASING, reason=reason)
            self.store(cid, rec)
        self._send_release(cid, rec)
        rec = rec.evolve(state=S.RELEASED, reason=reason)
        self.store(cid, rec, replicate=True)
        self.stats["aborted_attempts"] += 1
        self._attempt(cid, rec, rec.state)

    def _fail(self, cid: int, rec: ServiceRecord, reason: str) -> None:
        if rec.id in self.state[cid].services:
            rec = rec.evolve(state=S.FAILED, reason=reason)
        else:
            rec = ServiceRecord.new(rec.id, rec.src, rec.dst, S.FAILED, cid, bandwidth_gbps=rec.bandwidth_gbps,
                                    attempt=rec.attempt, reason=reason)
        self.stats["services_failed"] += 1
        self._log("ServiceFailed", rec.id, rec.attempt, cid)
        self.broadcast_record(cid, rec, "failed")

    def _reserve_timeout(self, cid: int, sid: str, attempt: int) -> None:
        app = self.master_app(cid)
        if app is None:
            return
        txn = app.txns.get(sid)
        rec = self.state[cid].services.get(sid)
        if txn is None or rec is None or txn.attempt != attempt or txn.decided is not None:
            return
        self._abort(cid, app, txn, rec, "reserve timeout")

    def on_master_elected(self, cluster: Cluster) -> None:
        """Resume this cluster's in-flight transactions from the stored records."""
        cid = cluster.id
        app = self.master_app(cid)
        st = self.state[cid]
        if app is None:
            return
        for sid, rec in sorted(st.services.items()):
            if rec.initiator != cid or sid in app.txns:
                continue
            if rec.state is S.RESERVED:
                # replies went to the old master; give up once the hold would expire
                txn = Txn(sid, rec.attempt, rec.clusters)
                app.txns[sid] = txn
                meta = st.meta[sid]
                at = max(self.engine.now, meta.started + self.config.reserve_timeout_ms)
                txn.timer = self.engine.schedule(at, lambda _, s=sid, a=rec.attempt: self._reserve_timeout(cid, s, a),
                                                 target=f"sm{cid}")
                self.stats["resumed_reserved"] += 1
            elif rec.state is S.INSTALLING:
                txn = Txn(sid, rec.attempt, rec.clusters, acks=set(rec.clusters), decided="commit")
                app.txns[sid] = txn
                self.stats["resumed_installing"] += 1
                for c in rec.clusters:
                    self._send_commit(cid, rec, c)
            elif rec.state is S.RELEASING:
                self._send_release(cid, rec)
                rec = rec.evolve(state=S.RELEASED)
                self.store(cid, rec)
                self._attempt(cid, rec, rec.state)

    # -- release

    def sm_release(self, service: str) -> None:
        """Release a pseudo-wire from its initiator cluster. Repeated calls are no-ops."""
        rec = None
        for st in self.state.values():
            rec = st.services.get(service)
            if rec is not None:
                break
        if rec is None:
            raise ServiceError(f"unknown service {service}")
        cid = rec.initiator

        def go() -> None:
            app = self.master_app(cid)
            cur = self.state[cid].services[service]
            if cur.state in (S.RELEASED, S.FAILED, S.RELEASING):
                return
            txn = app.txns.pop(service, None) if app else None
            if txn is not None:
                txn.decided = "abort"
                self.engine.cancel(txn.timer)
            was_installed = cur.state is S.INSTALLED
            if cur.state in (S.INSTALLING, S.INSTALLED):
                cur = cur.evolve(state=S.RELEASING)
            self._send_release(cid, cur)
            cur = cur.evolve(state=S.RELEASED, reason="released")
            if was_installed:
                self.plane.bump_links(cur.ils_used, -1)
                self.plane.service_nodes.pop(service, None)
                self.mark_ads_dirty(self._il_clusters(cur.ils_used))
            self.broadcast_record(cid, cur, "released")

        self.cluster(cid).when_master(go)

    # ======================================================================
    # Service Manager: participant side

    def _reply(self, cid: int, initiator: int, kind: MsgKind, body: dict[str, Any]) -> None:
        body = dict(body, cluster=cid, to=initiator)
        self._to_cluster(cid, initiator, kind, body)

    def _scripted(self, phase: str, sid: str, attempt: int, cid: int) -> bool:
        return self.fault is not None and self.fault(phase, sid, attempt, cid)

    def p_reserve(self, cid: int, body: dict[str, Any]) -> None:
        st = self.state[cid]
        sid, attempt, initiator = body["service"], body["attempt"], body["initiator"]
        frags = [tuple(f) for f in body["segments"]]
        nodes = tuple(body["path"])
        bw = body["bandwidth_gbps"]
        self._log("ReserveRecv", sid, attempt, cid)
        cur = st.local.get(sid)
        if cur is not None and cur.attempt > attempt:
            return
        if cur is not None and cur.attempt < attempt and cur.phase == "reserved":
            self._drop_hold(cid, cur)
        base = {"service": sid, "attempt": attempt}
        bottleneck, reason = self._check(cid, frags, nodes, bw)
        if bottleneck is None and self._scripted("reserve", sid, attempt, cid):
            bottleneck, reason = self._blame(frags, nodes), "scripted refusal"
            if bottleneck is None:
                reason = "scripted refusal (no link to blame)"
        if reason:
            self._log("NackSent", sid, attempt, cid)
            self._reply(cid, initiator, MsgKind.RESERVE_NACK,
                        dict(base, reason=reason.replace(" ", "_"), bottleneck=bottleneck))
            return
        txn = LocalTxn(sid, attempt, initiator, list(frags), nodes, bw)
        if bw > 0:
            for k in self._held_links(frags, nodes, cid):
                self.plane.topo.links[k].reserved_gbps += bw
                txn.held.append(k)
        txn.expiry = self.engine.after(self.config.reserve_timeout_ms, lambda _: self._expire(cid, txn),
                                       target=f"sm{cid}")
        st.local[sid] = txn
        self._log("AckSent", sid, attempt, cid)
        self._reply(cid, initiator, MsgKind.RESERVE_ACK, dict(base, paths=[list(f) for f in frags]))

    def _held_links(self, frags: list[tuple[int, ...]], nodes: tuple[int, ...], cid: int) -> list[LinkKey]:
        out = []
        for f in frags:
            out.extend(Path(f, 0.0).links)
            i = _find(nodes, f)
            end = i + len(f)
            if end < len(nodes):
                out.append(link_key(nodes[end - 1], nodes[end]))  # egress IL is held by the upstream side
        return out

    def _check(self, cid: int, frags, nodes, bw) -> tuple[LinkKey | None, str]:
        cl = self.cluster(cid)
        topo = self.plane.topo
        for f in frags:
            for k in Path(f, 0.0).links:
                if k not in topo.links or not cl.view.believes_up(k):
                    return k, "link down"
            i = _find(nodes, f)
            for j in (i - 1, i + len(f) - 1):
                if 0 <= j < len(nodes) - 1:
                    k = link_key(nodes[j], nodes[j + 1])
                    if self.plane.plan.is_inter(k) and not cl.view.believes_up(k):
                        return k, "inter-cluster link down"
        if bw > 0:
            for k in self._held_links(frags, nodes, cid):
                if topo.links[k].available_gbps < bw:
                    return k, "insufficient bandwidth"
        return None, ""

    def _blame(self, frags, nodes) -> LinkKey | None:
        f = frags[0]
        i = _find(nodes, f)
        if i > 0:
            return link_key(nodes[i - 1], nodes[i])
        links = Path(f, 0.0).links
        return links[0] if links else None

    def _drop_hold(self, cid: int, txn: LocalTxn) -> None:
        self.engine.cancel(txn.expiry)
        for k in txn.held:
            self.plane.topo.links[k].reserved_gbps -= txn.bandwidth_gbps
        txn.held = []
        txn.phase = "released"

    def _expire(self, cid: int, txn: LocalTxn) -> None:
        if txn.phase == "reserved" and self.state[cid].local.get(txn.service) is txn:
            self._log("HoldExpired", txn.service, txn.attempt, cid)
            self._drop_hold(cid, txn)

    def p_commit(self, cid: int, body: dict[str, Any]) -> None:
        st = self.state[cid]
        sid, attempt, initiator = body["service"], body["attempt"], body["initiator"]
        self._log("CommitRecv", sid, attempt, cid)
        txn = st.local.get(sid)
        base = {"service": sid, "attempt": attempt}
        rec = st.services.get(sid)
        single = initiator == cid and rec is not None and rec.attempt == attempt and rec.clusters == [cid]
        if single and (txn is None or txn.attempt < attempt):
            # single-cluster service: no reservation round
            if txn is not None and txn.phase == "reserved":
                self._drop_hold(cid, txn)
            frags = [tuple(f) for f in body["segments"]]
            txn = LocalTxn(sid, attempt, initiator, frags, tuple(body["path"]), body["bandwidth_gbps"])
            st.local[sid] = txn
        if txn is None or txn.attempt != attempt or txn.phase in ("released", "releasing"):
            self._log("InstallFailedSent", sid, attempt, cid)
            self._reply(cid, initiator, MsgKind.INSTALL_FAILED, dict(base, reason="no_reservation"))
            return
        if txn.phase == "installed":
            self._log("InstalledSent", sid, attempt, cid)
            self._reply(cid, initiator, MsgKind.INSTALLED, base)
            return
        if txn.phase == "installing":
            return
        self.engine.cancel(txn.expiry)
        if self._scripted("install", sid, attempt, cid):
            self._drop_hold(cid, txn)
            self._log("InstallFailedSent", sid, attempt, cid)
            self._reply(cid, initiator, MsgKind.INSTALL_FAILED, dict(base, reason="scripted_failure"))
            return
        txn.phase = "installing"
        self._install_fragments(cid, txn, lambda bad: self._installed_local(cid, txn, bad))

    def _install_fragments(self, cid: int, txn: LocalTxn, done: Callable[[set[int]], None]) -> None:
        """Install every fragment; ``done`` gets the indices of fragments that timed out."""
        cl = self.cluster(cid)
        remaining = len(txn.fragments)
        finished: list[int] = []
        bad: set[int] = set()

        def make(i: int) -> Callable[[Op], None]:
            def one(op: Op) -> None:
                finished.append(i)
                if op.timed_out:
                    bad.add(i)
                if len(finished) == remaining:
                    done(bad)
            return one

        if remaining == 0:
            done(bad)
            return
        for i, f in enumerate(txn.fragments):
            install_path(cl, txn.service, Path.from_nodes(self.plane.topo, f), make(i), context=txn.nodes)

    def _installed_local(self, cid: int, txn: LocalTxn, bad: set[int]) -> None:
        cl = self.cluster(cid)
        base = {"service": txn.service, "attempt": txn.attempt}
        txn.version = cl.segment_version.get(txn.service, txn.version)
        ok = not bad
        txn.phase = "installed"
        if ok:
            for f in txn.fragments:
                cl.segments[(txn.service, f[0])] = Path.from_nodes(self.plane.topo, f)
        else:
            # roll back whatever landed; timed-out fragments were never counted
            self._remove_local(cid, txn, uncounted=bad)
        if txn.release_pending and ok:
            self._remove_local(cid, txn)
            return

        def reply() -> None:
            if ok:
                self._log("InstalledSent", txn.service, txn.attempt, cid)
                self._reply(cid, txn.initiator, MsgKind.INSTALLED, base)
            else:
                self._log("InstallFailedSent", txn.service, txn.attempt, cid)
                self._reply(cid, txn.initiator, MsgKind.INSTALL_FAILED, dict(base, reason="install_timeout"))

        cl.when_master(reply)

    def _remove_local(self, cid: int, txn: LocalTxn, uncounted: set[int] = frozenset()) -> None:
        cl = self.cluster(cid)
        txn.phase = "releasing"
        remaining = len(txn.fragments)
        finished: list[int] = []

        def one(op: Op) -> None:
            finished.append(1)
            if len(finished) == remaining:
                txn.phase = "released"

        for i, f in enumerate(txn.fragments):
            cl.segments.pop((txn.service, f[0]), None)
            delete_path(cl, txn.service, Path.from_nodes(self.plane.topo, f), txn.version, one,
                        count=i not in uncounted, fragment=True)
        self._drop_hold(cid, txn)
        txn.phase = "released" if remaining == 0 else "releasing"

    def p_release(self, cid: int, body: dict[str, Any]) -> None:
        st = self.state[cid]
        sid, attempt = body["service"], body["attempt"]
        self._log("ReleaseRecv", sid, attempt, cid)
        txn = st.local.get(sid)
        if txn is None or txn.attempt > attempt:
            return
        if txn.phase == "reserved":
            self._drop_hold(cid, txn)
        elif txn.phase == "installing":
            txn.release_pending = True
        elif txn.phase == "installed":
            self._remove_local(cid, txn)

    # ======================================================================
    # Backup Manager

    def bm_precompute(self, cid: int, install: bool = True) -> list[BackupLink]:
        """A link-disjoint backup for every IL attached to ``cid``."""
        st = self.state[cid]
        cl = self.cluster(cid)
        topo = self.plane.topo
        out = []
        for key in self.local_ils(cid):
            current = st.backups.get(key)
            if current is not None and current.state == "Active":
                out.append(current)
                continue
            link = topo.links[key]
            if not link.up:
                continue
            primary = Path(key, link.delay_ms)
            path = disjoint_backup_path(topo, primary, self.config.weights)
            if path is None:
                st.backups.pop(key, None)
                self.stats["il_unprotected"] += 1
                log.info("cluster %d: inter-cluster link %s has no disjoint backup", cid, key)
                continue
            bl = BackupLink(key, path)
            st.backups[key] = bl
            out.append(bl)
            if install and (current is None or current.path != path):
                tag = _bil_tag(key)
                for n in path.nodes:
                    if n in cl.member_set:
                        self.plane.switches[n].remove(tag, 1 << 62)
                for e in _standby_entries(path, tag, cl.member_set):
                    self.plane.switches[e.switch].install(e)
        return out

    def on_il_status(self, cluster: Cluster, key: LinkKey, up: bool, t_fail: float) -> bool:
        cid = cluster.id
        if up:
            self.mark_ads_dirty([cid])
            return True
        self.bm_handle_il_failure(cid, key, t_fail)
        return True

    def services_on(self, cid: int, key: LinkKey) -> list[str]:
        return sorted(s for s, r in self.state[cid].services.items() if r.state is S.INSTALLED and key in r.ils_used)

    def bm_handle_il_failure(self, cid: int, key: LinkKey, t_fail: float) -> None:
        """Swap traffic of the failed IL onto its backup without asking remote clusters."""
        st = self.state[cid]
        cl = self.cluster(cid)
        bl = st.backups.get(key)
        services = self.services_on(cid, key)
        if bl is None:
            self.stats["bm_fallback"] += 1
            self._log("BmFallback", f"{key[0]}-{key[1]}", 0, cid)
            self.publish(cid, MsgKind.LINK_DOWN_NOTICE, {"link": key})
            self._on_link_down_notice(cid, key)
            return
        st.restoring += 1
        now = self.engine.now
        border = key[0] if key[0] in cl.member_set else key[1]
        full = self.config.bil_mode == "full"
        per = self.config.compute.per_path(len(cl.internal_links)) if full else self.config.compute.c0_ms
        start = max(now, cl.busy_until)
        cl.busy_until = start + per * len(services)
        job = _BilJob(self, cid, key, bl, services, border, t_fail, now)
        self.engine.schedule(cl.busy_until, lambda _: job.dispatch(), target=f"bm{cid}")

    def _bil_walk(self, nodes: tuple[int, ...], key: LinkKey, bil: tuple[int, ...]) -> tuple[int, ...] | None:
        for i in range(len(nodes) - 1):
            if link_key(nodes[i], nodes[i + 1]) == key:
                seg = bil if bil[0] == nodes[i] else bil[::-1]
                return nodes[:i] + seg + nodes[i + 2:]
        return None

    def _apply_bil(self, cid: int, key: LinkKey, bil: tuple[int, ...], services: Iterable[str]) -> None:
        """Rewrite records (and, the first time, ground truth) after a backup activation."""
        st = self.state[cid]
        plane = self.plane
        for sid in services:
            rec = st.services.get(sid)
            if rec is None or key not in rec.ils_used:
                continue
            walk = self._bil_walk(rec.global_path, key, bil)
            if walk is None:
                continue
            new_nodes = loop_erase(walk)
            st.services[sid] = rec.with_path(new_nodes, self.cluster_of)
            truth = plane.service_nodes.get(sid)
            if truth is not None and truth == rec.global_path:
                plane.bump_links(Path(truth, 0.0).links, -1)
                plane.bump_links(Path(new_nodes, 0.0).links, +1)
                plane.service_nodes[sid] = new_nodes
                for c, a, _ in split_fragments(truth, self.cluster_of):
                    plane.clusters[c].segments.pop((sid, truth[a]), None)
                for c, a, b in split_fragments(new_nodes, self.cluster_of):
                    plane.clusters[c].segments[(sid, new_nodes[a])] = Path.from_nodes(plane.topo, new_nodes[a:b])
        if key in st.backups:
            st.backups[key].state = "Active"

    def _on_link_down_notice(self, cid: int, key: LinkKey) -> None:
        """No backup: the initiator re-installs its services on the IL from scratch."""
        st = self.state[cid]
        if key in st.ils:
            st.ils[key] = replace(st.ils[key], up=False)
        for sid in self.services_on(cid, key):
            rec = st.services[sid]
            if rec.initiator != cid:
                continue

            def redo(sid: str = sid) -> None:
                cur = self.state[cid].services[sid]
                if cur.state is not S.INSTALLED or key not in cur.ils_used:
                    return
                self.stats["bm_fallback_services"] += 1
                self.state[cid].meta.setdefault(sid, TxnMeta(cur.attempt, self.engine.now)).excluded.add(key)
                cur = cur.evolve(state=S.RELEASING, reason="inter-cluster link down")
                self._send_release(cid, cur)
                self.plane.bump_links(cur.ils_used, -1)
                self.plane.service_nodes.pop(sid, None)
                cur = cur.evolve(state=S.RELEASED)
                self.store(cid, cur, replicate=True)
                self._attempt(cid, cur, cur.state)

            self.cluster(cid).when_master(redo)

    # ======================================================================
    # intra-cluster reroute follow-up

    def on_rerouted(self, cluster: Cluster, changes: list[RerouteChange], record: SampleRecord) -> None:
        cid = cluster.id
        st = self.state[cid]
        for ch in changes:
            rec = st.services.get(ch.service)
            if rec is None:
                continue
            rec = rec.with_path(ch.new_nodes, self.cluster_of)
            self.broadcast_record(cid, rec, "rerouted")
        for sid in record.failed_services:
            rec = st.services.get(sid)
            nodes = self.plane.service_nodes.pop(sid, None)
            if nodes is not None:
                self.plane.bump_links(Path(nodes, 0.0).links, -1)
            self.plane.drop_service_segments(sid)
            if rec is None or rec.state is not S.INSTALLED:
                continue
            rec = rec.evolve(state=S.RELEASING).evolve(state=S.RELEASED).evolve(
                state=S.FAILED, reason="no alternative path")
            self.broadcast_record(cid, rec, "failed")

    # ======================================================================
    # checks

    def stores_converged(self) -> bool:
        states = list(self.state.values())
        first = states[0]
        return all(s.services == first.services and s.ils == first.ils for s in states[1:])

    def installed_clusters(self, sid: str) -> set[int]:
        """Clusters whose local part of ``sid`` is installed right now."""
        return {cid for cid, st in self.state.items()
                if (t := st.local.get(sid)) is not None and t.phase == "installed"}

    def atomic(self, sid: str) -> bool:
        """All involved clusters installed, or none."""
        rec = self.state[next(iter(self.state))].services.get(sid)
        inst = self.installed_clusters(sid)
        if rec is None:
            return not inst
        if rec.state is S.INSTALLED:
            return inst == set(rec.clusters)
        return not inst


def _find(seq: Sequence[int], sub: Sequence[int]) -> int:
    for i in range(len(seq) - len(sub) + 1):
        if tuple(seq[i:i + len(sub)]) == tuple(sub):
            return i
    raise ValueError(f"{sub} not in {seq}")


def _bil_tag(key: LinkKey) -> str:
    return f"bil{key[0]}-{key[1]}"


def _standby_entries(path: Path, tag: str, members: frozenset[int]) -> list[FlowEntry]:
    nodes = path.nodes
    out = []
    for i, n in enumerate(nodes):
        if n not in members:
            continue
        in_link = link_key(nodes[i - 1], n) if i > 0 else None
        out_link = link_key(n, nodes[i + 1]) if i < len(nodes) - 1 else None
        out.append(FlowEntry(n, tag, in_link, out_link, FlowRole.BACKUP_STANDBY, 0))
    return out


class _BilJob:
    """One edge cluster's local swap of an IL's traffic onto its backup."""

    def __init__(self, layer: IconaLayer, cid: int, key: LinkKey, bl: BackupLink, services: list[str],
                 border: int, t_fail: float, t_detect: float) -> None:
        self.layer = layer
        self.cid = cid
        self.key = key
        self.bl = bl
        self.services = services
        self.border = border
        self.t_fail = t_fail
        self.t_detect = t_detect
        self.old_versions: dict[str, int] = {}

    def dispatch(self) -> None:
        layer = self.layer
        cl = layer.cluster(self.cid)
        plane = layer.plane
        self.t_computed = layer.engine.now
        st = layer.state[self.cid]
        bil = self.bl.path.nodes
        full = layer.config.bil_mode == "full"
        msgs = []
        self.touched: set[int] = set()
        for sid in self.services:
            rec = st.services[sid]
            walk = layer._bil_walk(rec.global_path, self.key, bil)
            if walk is None:
                continue
            version = plane.next_version()
            self.old_versions[sid] = version - 1
            positions = [i for i, n in enumerate(walk) if n == self.border]
            if full:
                positions = [i for i, n in enumerate(walk) if n in cl.member_set and n in bil]
            for i in positions:
                n = walk[i]
                in_link = link_key(walk[i - 1], n) if i > 0 else None
                out_link = link_key(n, walk[i + 1]) if i < len(walk) - 1 else None
                e = FlowEntry(n, sid, in_link, out_link, FlowRole.PRIMARY, version)
                msgs.append((n, MsgKind.FLOW_MOD, {"entry": e}))
                self.touched.add(n)
        cl.dispatch(msgs, self._installed)

    def _installed(self, op: Op) -> None:
        layer = self.layer
        cl = layer.cluster(self.cid)
        self.t_installed = layer.engine.now
        layer._log("Restored", f"{self.key[0]}-{self.key[1]}", 0, self.cid)
        msgs = []
        for sid, cookie in self.old_versions.items():
            for n in sorted(self.touched):
                msgs.append((n, MsgKind.FLOW_DEL, {"service": sid, "cookie": cookie}))
        cl.dispatch(msgs, self._deleted)

    def _deleted(self, op: Op) -> None:
        layer = self.layer
        now = layer.engine.now
        sample = LatencySample(
            "", "", 0,
            traversal_ms=self.t_detect - self.t_fail,
            computation_ms=self.t_computed - self.t_detect,
            install_ms=self.t_installed - self.t_computed,
            delete_ms=now - self.t_installed,
            paths_rerouted=len(self.old_versions),
        )
        rec = SampleRecord("il", self.cid, self.key, self.t_fail, sample, self.t_installed)
        layer.il_samples.append(rec)
        layer.plane.samples.append(rec)
        st = layer.state[self.cid]
        layer._apply_bil(self.cid, self.key, self.bl.path.nodes, self.services)

        def announce(_: Any) -> None:
            # remote stores and adverts catch up after a hold-down that damps flapping links
            st.restoring -= 1
            layer.publish(self.cid, MsgKind.BIL_REROUTED, {
                "il": self.key, "cluster": self.cid, "services": list(self.services),
                "bil": list(self.bl.path.nodes),
            })
            layer.mark_ads_dirty([self.cid])

        layer.engine.after(layer.config.bm_holddown_ms, announce, target=f"bm{self.cid}")
