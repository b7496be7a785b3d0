"""Deterministic discrete-event engine, delay-modelled message bus, failure plans.

Everything runs on one thread. Events fire in ``(fire_at, seq)`` order, so two
runs of the same scenario with the same seed produce the same trace.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol

log = logging.getLogger(__name__)


class SimError(RuntimeError):
    """Base class for engine errors."""


class SchedulingError(SimError):
    """An event was scheduled before the current simulated time."""


class RunawayError(SimError):
    """The event-count safety cap was exceeded."""


class ConfigError(SimError):
    """A failure plan references something that does not exist."""


class MsgKind(enum.Enum):
    PORT_STATUS = "PortStatus"
    LINK_DOWN_NOTICE = "LinkDownNotice"
    FLOW_MOD = "FlowMod"
    FLOW_DEL = "FlowDel"
    FLOW_ACK = "FlowAck"
    LLDP_PROBE = "LldpProbe"
    HELLO = "Hello"
    IL_AD = "IlAd"
    EP_AD = "EpAd"
    RESERVE = "Reserve"
    RESERVE_ACK = "ReserveAck"
    RESERVE_NACK = "ReserveNack"
    COMMIT = "Commit"
    INSTALLED = "Installed"
    INSTALL_FAILED = "InstallFailed"
    RELEASE = "Release"
    SERVICE_UPDATE = "ServiceUpdate"
    BIL_REROUTED = "BilRerouted"


# Required body keys per kind; bodies may carry more.
BODY_FIELDS: dict[MsgKind, tuple[str, ...]] = {
    MsgKind.PORT_STATUS: ("switch", "link", "up"),
    MsgKind.LINK_DOWN_NOTICE: ("link",),
    MsgKind.FLOW_MOD: ("xid", "entry"),
    MsgKind.FLOW_DEL: ("xid", "service", "cookie"),
    MsgKind.FLOW_ACK: ("xid", "switch"),
    MsgKind.LLDP_PROBE: ("origin", "origin_cluster", "port"),
    MsgKind.HELLO: ("switch",),
    MsgKind.IL_AD: ("il", "clusters", "delay_ms", "available_gbps", "flow_count", "up"),
    MsgKind.EP_AD: ("ep", "node", "owner", "metrics"),
    MsgKind.RESERVE: ("service", "attempt", "cluster", "segments", "bandwidth_gbps"),
    MsgKind.RESERVE_ACK: ("service", "attempt", "cluster", "paths"),
    MsgKind.RESERVE_NACK: ("service", "attempt", "cluster", "reason", "bottleneck"),
    MsgKind.COMMIT: ("service", "attempt", "cluster"),
    MsgKind.INSTALLED: ("service", "attempt", "cluster"),
    MsgKind.INSTALL_FAILED: ("service", "attempt", "cluster", "reason"),
    MsgKind.RELEASE: ("service", "attempt", "cluster"),
    MsgKind.SERVICE_UPDATE: ("service", "event", "record"),
    MsgKind.BIL_REROUTED: ("il", "cluster", "services", "bil"),
}


@dataclass
class Message:
    kind: MsgKind
    sender: str
    receiver: str
    body: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = [k for k in BODY_FIELDS[self.kind] if k not in self.body]
        if missing:
            raise ValueError(f"{self.kind.value} body missing {missing}")

    def summary(self) -> str:
        return " ".join(f"{k}={_fmt(self.body[k])}" for k in BODY_FIELDS[self.kind])


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ",".join(f"{k}:{_fmt(v)}" for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))) + "}"
    if value is None:
        return "-"
    if hasattr(value, "trace"):
        return value.trace()
    return str(value).replace(" ", "")


class Actor(Protocol):
    name: str
    alive: bool

    def on_message(self, msg: Message) -> None: ...


@dataclass(order=True)
class SimEvent:
    fire_at: float
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)
    handler: Callable[[Any], None] | None = field(compare=False, default=None, repr=False)
    background: bool = field(compare=False, default=False)
    cancelled: bool = field(compare=False, default=False)


class Engine:
    """Priority-queue event loop.

    ``background`` events (periodic discovery/advertisement timers) are not
    counted for quiescence: ``run()`` without ``until`` stops once only
    background events remain.
    """

    def __init__(self, seed: int = 0, max_events: int = 10_000_000, trace: bool = False) -> None:
        self.now = 0.0
        self.seed = seed
        self.rng = random.Random(seed)
        self.max_events = max_events
        self.processed = 0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._foreground = 0
        self.trace: list[str] | None = [] if trace else None

    def schedule(
        self,
        at: float,
        handler: Callable[[Any], None],
        payload: Any = None,
        target: str = "engine",
        background: bool = False,
    ) -> SimEvent:
        if at < self.now - 1e-12:
            raise SchedulingError(f"event for {target} at {at:.3f} is before now={self.now:.3f}")
        ev = SimEvent(max(at, self.now), next(self._seq), target, payload, handler, background)
        heapq.heappush(self._queue, ev)
        if not background:
            self._foreground += 1
        return ev

    def after(self, delay: float, handler: Callable[[Any], None], payload: Any = None,
              target: str = "engine", background: bool = False) -> SimEvent:
        return self.schedule(self.now + delay, handler, payload, target, background)

    def cancel(self, ev: SimEvent | None) -> None:
        if ev is None or ev.cancelled:
            return
        ev.cancelled = True
        if not ev.background:
            self._foreground -= 1

    @property
    def pending(self) -> int:
        return self._foreground

    def run(self, until: float | None = None) -> float:
        """Process events; stop at quiescence, or after time ``until``."""
        while self._queue:
            if until is None and self._foreground == 0:
                break
            ev = self._queue[0]
            if until is not None and ev.fire_at > until:
                break
            heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            if not ev.background:
                self._foreground -= 1
            self.processed += 1
            if self.processed > self.max_events:
                raise RunawayError(f"more than {self.max_events} events processed")
            self.now = ev.fire_at
            if ev.handler is not None:
                ev.handler(ev.payload)
        if until is not None and until > self.now:
            self.now = until
        return self.now

    def record(self, kind: str, sender: str, receiver: str, summary: str = "") -> None:
        if self.trace is not None:
            self.trace.append(f"{self.now:.3f} {kind} {sender} {receiver} {summary}".rstrip())


# --------------------------------------------------------------------------
# delivery


class Delivery:
    """Timed delivery of messages to actors, with conservation counters."""

    def __init__(self, engine: Engine) -> None:
        self.engine = engine
        self.stats: Counter[str] = Counter()

    def deliver_at(self, at: float, actor: Actor, msg: Message, channel: str) -> None:
        self.stats[f"{channel}.sent"] += 1

        def fire(m: Message) -> None:
            if not actor.alive:
                self.stats[f"{channel}.dropped"] += 1
                return
            self.stats[f"{channel}.delivered"] += 1
            if self.engine.trace is not None:
                self.engine.record(m.kind.value, m.sender, actor.name, m.summary())
            actor.on_message(m)

        self.engine.schedule(at, fire, msg, target=actor.name)


@dataclass(frozen=True)
class BusTopic:
    scope: str  # "intra" | "inter"
    cluster: int | None = None

    @classmethod
    def intra(cls, cluster: int) -> "BusTopic":
        return cls("intra", cluster)

    def __str__(self) -> str:
        return "inter" if self.scope == "inter" else f"intra{self.cluster}"


INTER = BusTopic("inter")


class Bus:
    """Reliable, ordered multicast between controller instances.

    Delay between two instances is ``intra_delay_ms`` inside a cluster and
    ``inter_delay(c1, c2)`` across clusters. The delay for a (sender, receiver)
    pair is constant, so per-(sender, topic) FIFO follows from the engine's
    FIFO tie-break.
    """

    def __init__(
        self,
        delivery: Delivery,
        cluster_of: Callable[[str], int],
        inter_delay: Callable[[int, int], float],
        intra_delay_ms: float = 0.5,
    ) -> None:
        self.delivery = delivery
        self.cluster_of = cluster_of
        self.inter_delay = inter_delay
        self.intra_delay_ms = intra_delay_ms
        self.subscribers: dict[BusTopic, list[Actor]] = {}
        self.log: list[tuple[float, BusTopic, Message]] = []
        self.stats: Counter[str] = Counter()

    def subscribe(self, topic: BusTopic, actor: Actor) -> None:
        subs = self.subscribers.setdefault(topic, [])
        if actor not in subs:
            subs.append(actor)

    def delay(self, sender: str, receiver: str) -> float:
        a, b = self.cluster_of(sender), self.cluster_of(receiver)
        return self.intra_delay_ms if a == b else self.inter_delay(a, b)

    def publish(self, topic: BusTopic, msg: Message, sender: Actor) -> int:
        """Fan out to every subscriber except the sender; returns the fan-out."""
        engine = self.delivery.engine
        if not sender.alive:
            self.stats["publish_from_dead"] += 1
            log.warning("publish from downed instance %s ignored", sender.name)
            return 0
        self.log.append((engine.now, topic, msg))
        self.stats[f"{topic}.published"] += 1
        fanout = 0
        for sub in self.subscribers.get(topic, ()):
            if sub is sender:
                continue
            fanout += 1
            self.stats[f"{topic}.expected"] += 1
            self.delivery.deliver_at(engine.now + self.delay(sender.name, sub.name), sub, msg, str(topic))
        return fanout

    def messages_between(self, start: float, end: float, topic: BusTopic = INTER) -> list[Message]:
        return [m for t, tp, m in self.log if tp == topic and start <= t < end]


class ControlChannel:
    """Switch <-> controller messaging over the (data-plane shared) control network.

    One-way latency for switch ``s`` is ``control_delay(s)``. While
    ``disconnected`` is set every message in either direction is dropped and
    counted. Messages to a cluster with no master are parked and handed over
    once a master exists (``flush_pending``).
    """

    def __init__(
        self,
        delivery: Delivery,
        control_delay: Callable[[int], float],
        switches: dict[int, Actor],
        master_of: Callable[[int], Actor | None],
    ) -> None:
        self.delivery = delivery
        self.control_delay = control_delay
        self.switches = switches
        self.master_of = master_of
        self.disconnected = False
        self.cut: set[int] = set()
        self.pending: list[tuple[int, Message]] = []
        self.stats: Counter[str] = Counter()

    def reachable(self, switch: int) -> bool:
        return not self.disconnected and switch not in self.cut

    def send_to_switch(self, instance: Actor, switch: int, msg: Message) -> bool:
        if not self.reachable(switch):
            self.stats["dropped_disconnect"] += 1
            return False
        at = self.delivery.engine.now + self.control_delay(switch)
        self.delivery.deliver_at(at, self.switches[switch], msg, "ctrl.down")
        return True

    def send_to_controller(self, switch: int, msg: Message) -> bool:
        if not self.reachable(switch):
            self.stats["dropped_disconnect"] += 1
            return False
        master = self.master_of(switch)
        if master is None:
            self.stats["parked"] += 1
            self.pending.append((switch, msg))
            return False
        msg.receiver = master.name
        at = self.delivery.engine.now + self.control_delay(switch)
        self.delivery.deliver_at(at, master, msg, "ctrl.up")
        return True

    def flush_pending(self) -> None:
        parked, self.pending = self.pending, []
        for switch, msg in parked:
            self.send_to_controller(switch, msg)


# --------------------------------------------------------------------------
# failure plans


class FailureAction(enum.Enum):
    LINK_DOWN = "LinkDown"
    LINK_UP = "LinkUp"
    INSTANCE_DOWN = "InstanceDown"
    INSTANCE_UP = "InstanceUp"
    FULL_CONTROL_DISCONNECT = "FullControlDisconnect"
    CONTROL_RECONNECT = "ControlReconnect"


@dataclass(frozen=True)
class FailureEntry:
    t_ms: float
    action: FailureAction
    target: Any = None


@dataclass
class FailurePlan:
    entries: list[FailureEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        for e in self.entries:
            if e.t_ms < 0:
                raise ConfigError(f"negative failure time {e.t_ms}")
        self.entries = sorted(self.entries, key=lambda e: e.t_ms)

    def add(self, t_ms: float, action: FailureAction | str, target: Any = None) -> "FailurePlan":
        self.entries.append(FailureEntry(t_ms, FailureAction(action), target))
        self.__post_init__()
        return self

    def __iter__(self):
        return iter(self.entries)


def seeded_rng(seed: int, *stream: Iterable[int] | int) -> random.Random:
    """Independent RNG stream derived from a base seed and integer labels."""
    value = seed
    for s in stream:
        value = value * 1_000_003 + int(s)  # type: ignore[arg-type]
    return random.Random(value)
