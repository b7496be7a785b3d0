from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconasim.metrics import (
    CSV_HEADER,
    LatencySample,
    aggregate,
    csv_text,
    export_csv,
    export_svg,
    group,
    read_csv,
    svg_chart,
)


def sample(rep, t=1.0, c=0.0, i=0.0, d=0.0, plane="ONOS", scenario="s"):
    return LatencySample(scenario, plane, rep, t, c, i, d)


def test_aggregate_trivial():
    a = aggregate([10.0, 20.0, 30.0])
    assert (a.avg_ms, a.min_ms, a.max_ms, a.n) == (20, 10, 30, 3)


def test_aggregate_single():
    a = aggregate([sample(0, 7.5)])
    assert a.avg_ms == a.min_ms == a.max_ms == 7.5


def test_aggregate_empty_raises():
    with pytest.raises(ValueError):
        aggregate([])


def test_negative_phase_rejected():
    with pytest.raises(ValueError):
        sample(0, -1.0)


def test_total_is_sum_of_quantised_phases():
    s = sample(0, 1.0004, 2.0004, 3.0004, 4.0004)
    assert s.total_ms == 10.0
    assert s.row()[-1] == "10.000"


def test_header_only_for_empty_run(tmp_path):
    p = export_csv([], tmp_path / "r.csv")
    assert p.read_text() == ",".join(CSV_HEADER) + "\n"


def test_twenty_rows_plus_aggregates(tmp_path):
    samples = [sample(r, 100 + r) for r in range(20)]
    lines = export_csv(samples, tmp_path / "r.csv").read_text().splitlines()
    body = [l for l in lines[1:] if l.split(",")[2].isdigit()]
    assert len(body) == 20
    assert [l.split(",")[2] for l in lines[21:]] == ["avg", "min", "max"]


def test_group_orders_reps_and_keeps_first_seen_order():
    samples = [sample(1, plane="B"), sample(0, plane="A"), sample(0, plane="B")]
    g = group(samples)
    assert list(g) == [("s", "B"), ("s", "A")]
    assert [s.rep for s in g[("s", "B")]] == [0, 1]


phase = st.floats(0, 5000, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(phase, phase, phase, phase, st.sampled_from(["ONOS", "ICONA-2"])),
                min_size=1, max_size=25))
def test_round_trip_and_aggregates(tmp_path_factory, rows):
    samples = [sample(i, *r[:4], plane=r[4]) for i, r in enumerate(rows)]
    path = tmp_path_factory.mktemp("csv") / "r.csv"
    export_csv(samples, path)
    back, aggs = read_csv(path)
    assert sorted(back, key=repr) == sorted(samples, key=repr)
    for key, items in group(back).items():
        recomputed = aggregate(items)
        assert aggs[key] == recomputed
        assert recomputed.min_ms <= recomputed.avg_ms + 1e-9 and recomputed.avg_ms <= recomputed.max_ms + 1e-9
        assert math.isclose(recomputed.avg_ms, round(sum(s.total_ms for s in items) / len(items), 3),
                            abs_tol=1e-9)


def test_csv_is_stable():
    samples = [sample(r, 3.0) for r in range(3)]
    assert csv_text(samples) == csv_text(list(reversed(samples)))


def test_read_rejects_tampered_total(tmp_path):
    p = tmp_path / "r.csv"
    export_csv([sample(0, 1.0)], p)
    p.write_text(p.read_text().replace("1.000\n", "2.000\n", 1))
    with pytest.raises(ValueError):
        read_csv(p)


def test_svg_has_one_bar_group_per_plane(tmp_path):
    samples = [sample(r, 10 + r, plane=p) for p in ("ONOS", "ICONA-2") for r in range(3)]
    text = svg_chart(samples, "Reroute latency")
    assert text.startswith("<svg") and "ONOS" in text and "ICONA-2" in text
    assert export_svg(samples, tmp_path / "r.svg").read_text() == text
