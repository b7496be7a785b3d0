from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconasim.ctrl import ControlConfig, ControlPlane
from iconasim.icona import (
    BackupLink,
    EndPoint,
    IconaLayer,
    ServiceError,
    ServiceRecord,
    ServiceState,
    TransitionError,
    check_transition,
    segment_path,
)
from iconasim.micro import (
    MICRO,
    MicroError,
    all_scripts,
    count_cases,
    install_slowdown,
    micro_plane,
    oracle_2pc,
    run_2pc_case,
    run_micro,
)
from iconasim.scenario import ScenarioConfig, run
from iconasim.simcore import FailurePlan
from iconasim.topo import Link, Path, Topology, build_grid, link_key, partition

S = ServiceState


# -- records --------------------------------------------------------------


@pytest.mark.parametrize("old,new", [
    (None, S.RESERVED), (S.RESERVED, S.INSTALLING), (S.RESERVED, S.RELEASED),
    (S.INSTALLING, S.INSTALLED), (S.INSTALLING, S.RELEASING), (S.RELEASING, S.RELEASED),
    (S.INSTALLED, S.RELEASING),
])
def test_allowed_transitions(old, new):
    check_transition(old, new)


@pytest.mark.parametrize("old,new", [
    (S.RESERVED, S.INSTALLED), (S.INSTALLED, S.RELEASED), (S.RELEASED, S.INSTALLED),
    (S.FAILED, S.RESERVED), (S.RELEASING, S.INSTALLED),
])
def test_forbidden_transitions(old, new):
    with pytest.raises(TransitionError):
        check_transition(old, new)


def test_record_evolve_bumps_revision_and_checks_state():
    a, b = EndPoint("a", 0), EndPoint("b", 5)
    rec = ServiceRecord.new("pw", a, b, S.RESERVED, 0)
    rec2 = rec.evolve(state=S.INSTALLING)
    assert rec2.revision == 1
    with pytest.raises(TransitionError):
        rec.evolve(state=S.INSTALLED)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=15, unique=True), st.integers(1, 4))
def test_segments_reconstruct_global_path(nodes, k):
    owner = lambda n: (n * 7) % k  # noqa: E731
    segs, ils = segment_path(nodes, owner)
    assert tuple(n for _, frag in segs for n in frag) == tuple(nodes)
    assert len(ils) == len(segs) - 1
    for (c1, f1), (c2, f2), il in zip(segs, segs[1:], ils):
        assert c1 != c2 and il == link_key(f1[-1], f2[0])
    rec = ServiceRecord("s", EndPoint("x", nodes[0]), EndPoint("y", nodes[-1]), S.INSTALLED, 0,
                        global_path=tuple(nodes), segments=segs, ils_used=ils)
    assert rec.reconstruct() == tuple(nodes)


def test_backup_cannot_reuse_its_link():
    topo = build_grid(2, 2, 5.0)
    with pytest.raises(ValueError):
        BackupLink((0, 1), Path.from_nodes(topo, (0, 1, 3)))


def test_provision_matches_the_slow_transition_chain():
    plane, layer = micro_plane(trace=False)
    path = (0, 1, 2, 3, 4, 5)
    src, dst = "ep0", "ep5"
    rec = layer.provision(src, dst, path, "x")
    a, b = layer.endpoints[src], layer.endpoints[dst]
    slow = ServiceRecord.new("x", a, b, S.INSTALLING, layer.cluster_of(a.node))
    slow = slow.with_path(path, layer.cluster_of).evolve(state=S.INSTALLED)
    assert rec == slow
    assert all(st.services["x"] is rec for st in layer.state.values())


# -- service manager ------------------------------------------------------


@pytest.mark.parametrize("name", sorted(MICRO))
def test_micro_scenarios_pass(name):
    res = run_micro(name)
    assert res.passed, res.notes
    assert res.trace


def test_unknown_micro_name():
    with pytest.raises(MicroError):
        run_micro("no-such-thing")


def test_unknown_endpoint():
    _, layer = micro_plane(trace=False)
    with pytest.raises(ServiceError):
        layer.sm_install("ep0", "ep99")


def test_bandwidth_shortage_ends_failed():
    plane, layer = micro_plane(ControlConfig(max_retries=2), trace=False)
    sid = layer.sm_install("ep0", "ep5", bandwidth_gbps=20.0)
    plane.run()
    rec = layer.state[0].services[sid]
    assert rec.state is S.FAILED
    assert not layer.installed_clusters(sid)
    assert all(link.reserved_gbps == 0 for link in plane.topo.links.values())


def test_install_replicates_to_every_store():
    plane, layer = micro_plane(trace=False)
    sid = layer.sm_install("ep0", "ep5")
    plane.run()
    assert layer.stores_converged()
    rec = layer.state[2].services[sid]
    assert rec.state is S.INSTALLED and rec.clusters == [0, 1, 2]
    assert layer.installed_clusters(sid) == {0, 1, 2}


def test_release_removes_everywhere():
    plane, layer = micro_plane(trace=False)
    sid = layer.sm_install("ep0", "ep5")
    plane.run()
    layer.sm_release(sid)
    plane.run()
    assert layer.state[1].services[sid].state is S.RELEASED
    assert not layer.installed_clusters(sid)
    assert not any(e.service == sid for sw in plane.switches.values() for e in sw.entries())


@pytest.mark.parametrize("script", [
    (("ok", "ok", "ok"), ("ok", "ok", "ok")),
    (("ok", "nack", "ok"), ("ok", "ok", "ok")),
    (("fail", "ok", "ok"), ("ok", "fail", "ok")),
    (("nack", "fail", "ok"), ("ok", "ok", "ok")),
])
@pytest.mark.parametrize("failover", ["none", "mid-reserve", "after-commit"])
def test_sampled_interleavings_match_oracle(script, failover):
    res = run_2pc_case(script, failover)
    want = oracle_2pc(script, failover)
    assert (res.state, res.attempts) == (want.state, want.attempts)
    assert not res.problems


def test_two_phase_install_is_slower_than_native_and_repeatable():
    s = install_slowdown()
    assert s.two_phase_ms > s.native_ms > 0
    assert install_slowdown() == s


def test_enumeration_size_is_bounded():
    assert count_cases() == 3 ** 6 * 3 <= 10 ** 4
    assert len(list(all_scripts())) == 3 ** 6


# -- backup manager -------------------------------------------------------


def test_grid_halves_bils_use_other_crossings():
    g = build_grid(4, 4, 5.0)
    plane = ControlPlane(g, partition(g, 2, "grid"))
    layer = IconaLayer(plane)
    ils = set(plane.plan.inter_links(g))
    assert ils == {(1, 2), (5, 6), (9, 10), (13, 14)}
    used = {}
    for cid in plane.plan.clusters:
        for bl in layer.bm_precompute(cid):
            crossing = set(bl.path.links) & ils
            assert bl.for_il not in bl.path.links
            assert len(crossing) == 1
            used[bl.for_il] = crossing.pop()
    assert set(used) == ils and all(used[k] != k for k in used)


def test_bridge_il_is_unprotected():
    topo = Topology(3, [Link(0, 1, 5.0), Link(1, 2, 5.0)])
    plane = ControlPlane(topo, partition(topo, 2, "explicit", {0: 0, 1: 1, 2: 1}))
    layer = IconaLayer(plane)
    assert layer.bm_precompute(0) == []
    assert layer.stats["il_unprotected"] == 1


def test_bil_steers_away_from_loaded_detour():
    # 0 | 1 joined by the IL 0-1 and two equal detours through 2 and 3
    topo = Topology(4, [Link(0, 1, 5.0), Link(0, 2, 5.0), Link(2, 1, 5.0), Link(0, 3, 5.0), Link(3, 1, 5.0)])
    plan = partition(topo, 2, "explicit", {0: 0, 2: 0, 3: 0, 1: 1})
    plane = ControlPlane(topo, plan, ControlConfig())
    layer = IconaLayer(plane)
    assert layer.bm_precompute(0, install=False)[0].path.nodes == (0, 2, 1)
    plane.topo.link(2, 1).flow_count = 30
    layer.state[0].backups.clear()
    assert layer.bm_precompute(0, install=False)[0].path.nodes == (0, 3, 1)


def test_il_failure_without_services_has_bare_samples():
    plane, layer = micro_plane(trace=False)
    plane.inject(FailurePlan().add(100.0, "LinkDown", (1, 2)))
    plane.run()
    recs = [r for r in plane.samples if r.kind == "il"]
    assert {r.cluster for r in recs} == {0, 1}
    for r in recs:
        assert (r.sample.computation_ms, r.sample.install_ms, r.sample.delete_ms) == (0, 0, 0)


def test_il_failover_is_local_and_faster_than_full_reroute():
    base = dict(name="t", kind="reroute-grid", topology={"grid": [6, 6], "delay_ms": 5.0},
                clusters=[2], partition="grid", failed_link="inter", repetitions=3, seed=3)
    div = run(ScenarioConfig(**base, bil_mode="divergence"))
    full = run(ScenarioConfig(**base, bil_mode="full"))
    assert all(d.early_inter_messages == 0 for d in div.details)
    assert not div.violations and not full.violations
    mean = lambda r: sum(s.total_ms for s in r.samples) / len(r.samples)  # noqa: E731
    assert mean(div) < mean(full)


def test_bil_flip_keeps_forwarding_and_counts():
    from iconasim.micro import forwarding_walk

    plane, layer = micro_plane(trace=False)
    sid = layer.sm_install("ep0", "ep5")
    plane.run()
    path = plane.service_nodes[sid]
    il = next(k for k in layer.state[0].services[sid].ils_used)
    plane.inject(FailurePlan().add(plane.engine.now + 10, "LinkDown", il))
    plane.run()
    new = plane.service_nodes[sid]
    assert il not in Path(new, 0).links and new != path
    assert forwarding_walk(plane, sid, new[0]) is not None
    assert {k: l.flow_count for k, l in plane.topo.links.items()} == plane.recount_flows()
