from __future__ import annotations

from dataclasses import dataclass, field

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconasim.ctrl import ControlPlane
from iconasim.simcore import (
    INTER,
    Bus,
    BusTopic,
    ConfigError,
    Delivery,
    Engine,
    FailureAction,
    FailurePlan,
    Message,
    MsgKind,
    RunawayError,
    SchedulingError,
    seeded_rng,
)
from iconasim.topo import build_grid, partition


def test_same_time_events_fire_fifo():
    eng = Engine()
    seen = []
    for i in range(5):
        eng.schedule(10.0, seen.append, i)
    eng.run()
    assert seen == [0, 1, 2, 3, 4]


def test_schedule_now_runs_after_current():
    eng = Engine()
    seen = []

    def first(_):
        seen.append("a")
        eng.schedule(eng.now, lambda _: seen.append("c"))
        seen.append("b")

    eng.schedule(3.0, first)
    assert eng.run() == 3.0
    assert seen == ["a", "b", "c"]


def test_past_event_rejected():
    eng = Engine()
    eng.schedule(5.0, lambda _: eng.schedule(4.0, lambda _: None))
    with pytest.raises(SchedulingError):
        eng.run()


def test_empty_queue_returns_start():
    assert Engine().run() == 0.0


def test_runaway_cap():
    eng = Engine(max_events=10)
    for i in range(11):
        eng.schedule(float(i), lambda _: None)
    with pytest.raises(RunawayError):
        eng.run()


def test_cancel_and_background_quiescence():
    eng = Engine()
    seen = []
    ev = eng.schedule(1.0, seen.append, "cancelled")
    eng.schedule(2.0, seen.append, "fg")
    eng.schedule(50.0, seen.append, "bg", background=True)
    eng.cancel(ev)
    eng.cancel(ev)
    assert eng.pending == 1
    assert eng.run() == 2.0
    assert seen == ["fg"]
    eng.run(until=100.0)
    assert seen == ["fg", "bg"] and eng.now == 100.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=40))
def test_events_dequeue_in_time_then_seq_order(times):
    eng = Engine()
    fired = []
    for i, t in enumerate(times):
        eng.schedule(t, lambda p: fired.append((eng.now, p)), i)
    eng.run()
    assert fired == sorted(((t, i) for i, t in enumerate(times)))


@dataclass
class Sink:
    name: str
    alive: bool = True
    got: list = field(default_factory=list)

    def on_message(self, msg):
        self.got.append(msg)


def notice(sender, **extra):
    return Message(MsgKind.LINK_DOWN_NOTICE, sender, "", {"link": (0, 1), **extra})


def test_message_body_must_be_total():
    with pytest.raises(ValueError, match="missing"):
        Message(MsgKind.FLOW_MOD, "c0.0", "s0", {"xid": 1})


def make_bus():
    eng = Engine()
    actors = {n: Sink(n) for n in ("a0", "a1", "a2", "a3", "b0")}
    cluster = {n: 0 if n.startswith("a") else 1 for n in actors}
    bus = Bus(Delivery(eng), cluster.__getitem__, lambda x, y: 20.0, 0.5)
    for n, a in actors.items():
        bus.subscribe(BusTopic.intra(cluster[n]), a)
        bus.subscribe(INTER, a)
    return eng, bus, actors


def test_intra_publish_fans_out_at_half_ms():
    eng, bus, actors = make_bus()
    msg = notice("a0")
    assert bus.publish(BusTopic.intra(0), msg, actors["a0"]) == 3
    eng.run(until=0.49)
    assert not actors["a1"].got
    eng.run()
    assert eng.now == 0.5
    assert all(len(actors[n].got) == 1 for n in ("a1", "a2", "a3"))
    assert not actors["a0"].got and not actors["b0"].got


def test_inter_publish_uses_attachment_delay():
    eng, bus, actors = make_bus()
    bus.publish(INTER, notice("a0"), actors["a0"])
    arrivals = []
    actors["b0"].on_message = lambda m: arrivals.append(eng.now)
    eng.run()
    assert arrivals == [20.0]


def test_publish_from_dead_instance_is_noop():
    eng, bus, actors = make_bus()
    actors["a0"].alive = False
    assert bus.publish(INTER, notice("a0"), actors["a0"]) == 0
    assert bus.stats["publish_from_dead"] == 1
    assert eng.run() == 0.0


def test_per_sender_fifo():
    eng, bus, actors = make_bus()
    for i in range(10):
        eng.schedule(float(i) * 0.1, lambda i: bus.publish(INTER, notice("a0", i=i),
                                                           actors["a0"]), i)
    eng.run()
    assert [m.body["i"] for m in actors["b0"].got] == list(range(10))


def plane_4x4(k=1, **kw):
    g = build_grid(4, 4, 5.0)
    return ControlPlane(g, partition(g, k, "grid"), **kw)


def test_control_channel_delays():
    plane = plane_4x4()
    sw = plane.switches
    got = []
    sw[0].on_message = lambda m: got.append(("corner", plane.engine.now))
    sw[5].on_message = lambda m: got.append(("center", plane.engine.now))
    m = plane.clusters[0].master
    plane.channel.send_to_switch(m, 0, Message(MsgKind.HELLO, m.name, "s0", {"switch": 0}))
    plane.channel.send_to_switch(m, 5, Message(MsgKind.HELLO, m.name, "s5", {"switch": 5}))
    plane.run()
    assert sorted(got, key=lambda x: x[1]) == [("center", 5.0), ("corner", 15.0)]


def test_disconnect_drops_and_counts():
    plane = plane_4x4()
    plane.disconnect_all()
    m = plane.clusters[0].master
    assert not plane.channel.send_to_switch(m, 0, Message(MsgKind.HELLO, m.name, "s0", {"switch": 0}))
    assert plane.channel.stats["dropped_disconnect"] == 1


def test_link_down_emits_port_status_from_both_ends():
    plane = plane_4x4(trace=True)
    plane.inject(FailurePlan().add(1000.0, "LinkDown", (5, 6)))
    plane.run()
    ports = [line for line in plane.engine.trace if " PortStatus " in line]
    senders = sorted(line.split()[2] for line in ports)
    assert senders == ["s5", "s6"]
    assert all(line.startswith("1005.000") for line in ports)


def test_inject_rejects_unknown_targets():
    plane = plane_4x4()
    with pytest.raises(ConfigError):
        plane.inject(FailurePlan().add(1.0, FailureAction.LINK_DOWN, (0, 5)))
    with pytest.raises(ConfigError):
        plane.inject(FailurePlan().add(1.0, FailureAction.INSTANCE_DOWN, "c9.0"))
    with pytest.raises(ConfigError):
        FailurePlan().add(-1.0, FailureAction.LINK_DOWN, (0, 1))


def test_failure_plan_sorted():
    fp = FailurePlan().add(5.0, "LinkUp", (0, 1)).add(1.0, "LinkDown", (0, 1))
    assert [e.t_ms for e in fp] == [1.0, 5.0]


def test_seeded_rng_streams():
    a = [seeded_rng(7, 1).random() for _ in range(2)]
    assert a[0] == a[1]
    assert seeded_rng(7, 1).random() != seeded_rng(7, 2).random()


def test_same_seed_same_trace():
    def go():
        plane = plane_4x4(k=4, trace=True, seed=3)
        plane.inject(FailurePlan().add(0.0, "FullControlDisconnect").add(10.0, "ControlReconnect"))
        plane.run()
        return plane.engine.trace

    assert go() == go()
