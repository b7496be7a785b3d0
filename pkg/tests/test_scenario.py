from __future__ import annotations

import json
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconasim.calibration import (
    fit_handshake,
    fit_reroute,
    fit_startup,
    predict_reroute,
    predict_startup,
    rep_terms,
)
from iconasim.metrics import aggregate, group
from iconasim.scenario import (
    PathCache,
    ScenarioConfig,
    ScenarioError,
    build_workload,
    eligible_links,
    grid_sweep,
    path_links,
    plane_label,
    run,
)
from iconasim.topo import is_bridge

GRID4 = dict(name="g4", kind="reroute-grid", topology={"grid": [4, 4], "delay_ms": 5.0}, partition="grid",
             paths_total=200, paths_on_failed_link=40, repetitions=4)


def grid_cfg(**kw):
    return ScenarioConfig(**{**GRID4, **kw})


# -- configuration --------------------------------------------------------


@pytest.mark.parametrize("bad", [
    {"kind": "nonsense"},
    {"clusters": [0]},
    {"repetitions": 0},
    {"paths_on_failed_link": 5000},
    {"failed_link": "sideways"},
    {"failed_link": [1, 2, 3]},
    {"clusters": [3]},
    {"c0_ms": -1.0},
    {"bil_mode": "psychic"},
])
def test_invalid_configs(bad):
    with pytest.raises(ScenarioError):
        grid_cfg(**bad)


def test_unknown_key_rejected():
    with pytest.raises(ScenarioError, match="colour"):
        ScenarioConfig.from_dict({"colour": "blue"})


def test_json_round_trip(tmp_path):
    cfg = grid_cfg(clusters=[1, 4], seed=9)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ScenarioConfig.from_json(p).to_dict() == cfg.to_dict()


def test_relative_topology_file(tmp_path):
    (tmp_path / "t.topo").write_text("node 0\nnode 1\nnode 2\nlink 0 1 5 1\nlink 1 2 5 1\nlink 0 2 5 1\n")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"topology": {"file": "t.topo"}, "paths_total": 5, "paths_on_failed_link": 1}))
    assert len(ScenarioConfig.from_json(p).build_topology().links) == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_json(tmp_path / "absent.json")


def test_labels():
    assert [plane_label(k) for k in (1, 2, 8)] == ["ONOS", "ICONA-2", "ICONA-8"]


# -- workload -------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.integers(0, 60),
       st.sampled_from(["intra", "inter", "auto"]))
def test_workload_hits_target_exactly(seed, k, target, selector):
    if k == 1 and selector == "inter":
        selector = "intra"
    cfg = grid_cfg(paths_on_failed_link=target, failed_link=selector)
    topo = cfg.build_topology()
    plan = cfg.build_plan(topo, k)
    work = build_workload(cfg, topo, plan, random.Random(seed), PathCache(topo))
    assert work.crossing() == target
    assert len(work.services) == cfg.paths_total
    assert work.failed_link in eligible_links(topo, plan, work.selector)
    for s, d, nodes in work.services:
        assert nodes[0] == s and nodes[-1] == d and len(set(nodes)) == len(nodes)
        assert all(topo.has_link(*lk) for lk in path_links(nodes))


def test_eligible_links_exclude_cluster_bridges(geant):
    cfg = ScenarioConfig()
    plan = cfg.build_plan(geant, 4)
    for key in eligible_links(geant, plan, "intra"):
        assert not plan.is_inter(key)
        assert not is_bridge(geant, key, plan.members(plan.cluster_of(key[0])))
    for key in eligible_links(geant, plan, "inter"):
        assert plan.is_inter(key) and not is_bridge(geant, key)


def test_fallback_to_inter_when_no_protected_intra_link():
    res = run(grid_cfg(clusters=[8], repetitions=2))
    assert {d.selector for d in res.details} == {"inter"}


def test_explicit_failed_link():
    res = run(grid_cfg(failed_link=[5, 6], clusters=[1], repetitions=2))
    assert {d.failed_link for d in res.details} == {(5, 6)}


def test_explicit_failed_link_must_exist():
    with pytest.raises(ScenarioError):
        run(grid_cfg(failed_link=[0, 15], repetitions=1))


# -- runs -----------------------------------------------------------------


def test_zero_paths_gives_near_zero_sample():
    res = run(grid_cfg(paths_on_failed_link=0, clusters=[1, 4], repetitions=3))
    for s in res.samples:
        assert (s.computation_ms, s.install_ms, s.delete_ms) == (0, 0, 0)
        assert s.total_ms <= 15


def test_k4_beats_k1_on_4x4():
    res = run(grid_cfg(clusters=[1, 4], repetitions=6))
    g = group(res.samples)
    assert aggregate(g[("g4", "ICONA-4")]).avg_ms < aggregate(g[("g4", "ONOS")]).avg_ms
    assert not res.violations


def test_same_seed_same_results():
    cfg = grid_cfg(clusters=[1, 2], repetitions=2)
    a, b = run(cfg, trace=True), run(cfg, trace=True)
    assert a.samples == b.samples and a.trace_text() == b.trace_text()
    assert run(replace(cfg, seed=2)).samples != a.samples


def test_workers_do_not_change_results():
    cfg = grid_cfg(clusters=[1, 4], repetitions=2)
    assert run(cfg, workers=2).samples == run(cfg, workers=1).samples


def test_sweep_labels():
    res = grid_sweep([4], [1, 4], reps=2, paths_total=100, paths_on_failed_link=20)
    assert {(s.scenario, s.control_plane) for s in res.samples} == {("grid4x4", "ONOS"), ("grid4x4", "ICONA-4")}


# -- closed form and calibration ------------------------------------------


@pytest.mark.parametrize("cfg,k", [
    (grid_cfg(repetitions=5), 1),
    (grid_cfg(repetitions=5), 4),
    (grid_cfg(topology={"grid": [6, 6], "delay_ms": 5.0}, repetitions=3), 2),
    (ScenarioConfig(name="geant", repetitions=3), 1),
    (ScenarioConfig(name="geant", repetitions=3), 4),
])
def test_closed_form_matches_simulation_per_rep(cfg, k):
    cfg = replace(cfg, clusters=[k])
    access = cfg.build_plan(cfg.build_topology(), k).access_delay_ms
    terms = rep_terms(cfg, k)
    sim = run(cfg).samples
    for t, s in zip(terms, sim):
        assert s.total_ms == pytest.approx(t.total(access, cfg.c0_ms, cfg.c1_ms), abs=5e-3)
        assert s.traversal_ms == pytest.approx(t.traversal + access, abs=1e-3)


def test_reroute_fit_hits_feasible_target():
    cfg = grid_cfg(repetitions=5)
    base = predict_reroute(cfg, 1)
    fit = fit_reroute(cfg, base + 40.0)
    assert fit.exact and fit.access_delay_ms > 0
    tuned = replace(cfg, access_delay_ms=fit.access_delay_ms, c0_ms=fit.c0_ms, c1_ms=fit.c1_ms)
    assert predict_reroute(tuned, 1) == pytest.approx(base + 40.0, abs=1e-6)


def test_reroute_fit_reports_infeasible_residual():
    cfg = grid_cfg(repetitions=5)
    fit = fit_reroute(cfg, 1.0)
    assert fit.access_delay_ms == 0 and fit.c0_ms == 0 and fit.c1_ms == 0
    assert fit.residual_ms > 0 and not fit.exact


def test_startup_closed_form_matches_simulation():
    cfg = ScenarioConfig(name="st", kind="startup", clusters=[1, 4], repetitions=3, paths_total=200)
    res = run(cfg)
    for k in (1, 4):
        sim = aggregate([s for s in res.samples if s.control_plane == plane_label(k)]).avg_ms
        assert sim == pytest.approx(predict_startup(cfg, k), abs=2e-3)


def test_handshake_fit():
    cfg = ScenarioConfig(name="st", kind="startup", repetitions=3, paths_total=100)
    h = fit_handshake(cfg, 5000.0)
    assert predict_startup(replace(cfg, handshake_ms=h), 1) == pytest.approx(5000.0, abs=1e-2)
    with pytest.raises(ValueError):
        fit_handshake(cfg, 10.0)


def test_two_point_startup_fit_pins_k1():
    cfg = ScenarioConfig(name="st", kind="startup", repetitions=2, paths_total=100)
    sf = fit_startup(cfg, 5000.0, 4990.0, ks=(2,), steps=4)
    assert sf.predicted[1] == pytest.approx(5000.0, abs=1e-2)
    assert sf.c0_ms >= 0

