"""Latency samples, aggregates over repetitions, CSV and SVG export.

All values are milliseconds kept at 3-decimal precision. Components are
quantised first and the total is their sum, so ``total == traversal +
computation + install + delete`` holds exactly in the exported text.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

CSV_HEADER = [
    "scenario", "control_plane", "rep",
    "traversal_ms", "computation_ms", "install_ms", "delete_ms", "total_ms",
]
AGGREGATE_REPS = ("avg", "min", "max")


def ms3(value: float) -> float:
    return round(value + 0.0, 3)


@dataclass(frozen=True)
class LatencySample:
    scenario: str
    control_plane: str
    rep: int
    traversal_ms: float
    computation_ms: float
    install_ms: float
    delete_ms: float
    paths_rerouted: int = 0

    def __post_init__(self) -> None:
        for name in ("traversal_ms", "computation_ms", "install_ms", "delete_ms"):
            value = getattr(self, name)
            if value < -1e-9:
                raise ValueError(f"{name} must be non-negative, got {value}")
            object.__setattr__(self, name, ms3(max(value, 0.0)))
        if self.paths_rerouted < 0:
            raise ValueError("paths_rerouted must be non-negative")

    @property
    def total_ms(self) -> float:
        return ms3(self.traversal_ms + self.computation_ms + self.install_ms + self.delete_ms)

    def relabel(self, scenario: str, control_plane: str, rep: int) -> "LatencySample":
        return LatencySample(
            scenario, control_plane, rep, self.traversal_ms, self.computation_ms,
            self.install_ms, self.delete_ms, self.paths_rerouted,
        )

    def row(self) -> list[str]:
        return [
            self.scenario, self.control_plane, str(self.rep),
            *(f"{v:.3f}" for v in (self.traversal_ms, self.computation_ms, self.install_ms,
                                   self.delete_ms, self.total_ms)),
        ]


@dataclass(frozen=True)
class Aggregate:
    avg_ms: float
    min_ms: float
    max_ms: float
    n: int


def aggregate(samples: Sequence[LatencySample] | Sequence[float]) -> Aggregate:
    """Mean, min and max of ``total_ms`` (or of raw floats)."""
    if not samples:
        raise ValueError("cannot aggregate an empty sample list")
    totals = [s.total_ms if isinstance(s, LatencySample) else ms3(s) for s in samples]
    return Aggregate(ms3(math.fsum(totals) / len(totals)), min(totals), max(totals), len(totals))


def group(samples: Iterable[LatencySample]) -> dict[tuple[str, str], list[LatencySample]]:
    """Samples keyed by (scenario, control_plane), in first-seen order, reps sorted."""
    out: dict[tuple[str, str], list[LatencySample]] = {}
    for s in samples:
        out.setdefault((s.scenario, s.control_plane), []).append(s)
    for v in out.values():
        v.sort(key=lambda s: s.rep)
    return out


def csv_text(samples: Sequence[LatencySample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    groups = group(samples)
    for items in groups.values():
        for s in items:
            w.writerow(s.row())
    for (scenario, plane), items in groups.items():
        agg = aggregate(items)
        for label, value in zip(AGGREGATE_REPS, (agg.avg_ms, agg.min_ms, agg.max_ms)):
            w.writerow([scenario, plane, label, "", "", "", "", f"{value:.3f}"])
    return buf.getvalue()


def export_csv(samples: Sequence[LatencySample], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(csv_text(samples))
    return path


def read_csv(path: str | Path) -> tuple[list[LatencySample], dict[tuple[str, str], Aggregate]]:
    """Parse an exported file back into samples and the aggregate rows."""
    samples: list[LatencySample] = []
    aggs: dict[tuple[str, str], dict[str, float]] = {}
    counts: dict[tuple[str, str], int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            key = (row["scenario"], row["control_plane"])
            if row["rep"] in AGGREGATE_REPS:
                aggs.setdefault(key, {})[row["rep"]] = float(row["total_ms"])
                continue
            s = LatencySample(
                row["scenario"], row["control_plane"], int(row["rep"]),
                float(row["traversal_ms"]), float(row["computation_ms"]),
                float(row["install_ms"]), float(row["delete_ms"]),
            )
            if f"{s.total_ms:.3f}" != row["total_ms"]:
                raise ValueError(f"row total {row['total_ms']} != component sum {s.total_ms:.3f}")
            samples.append(s)
            counts[key] = counts.get(key, 0) + 1
    out = {k: Aggregate(v["avg"], v["min"], v["max"], counts.get(k, 0)) for k, v in aggs.items()}
    return samples, out


def svg_chart(samples: Sequence[LatencySample], title: str = "Reroute latency") -> str:
    """Bar per control plane (average) with min/max whiskers."""
    groups = group(samples)
    labels = [f"{plane}" if len({k[0] for k in groups}) == 1 else f"{sc}/{plane}" for sc, plane in groups]
    aggs = [aggregate(v) for v in groups.values()]
    width, height, pad = max(320, 90 * len(aggs) + 80), 300, 50
    top = max((a.max_ms for a in aggs), default=1.0) or 1.0
    scale = (height - 2 * pad) / top
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - 20}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, (label, agg) in enumerate(zip(labels, aggs)):
        x = pad + 20 + i * 90
        y = height - pad - agg.avg_ms * scale
        parts.append(f'<rect x="{x}" y="{y:.1f}" width="50" height="{agg.avg_ms * scale:.1f}" fill="#4a7ab5"/>')
        cx = x + 25
        y_min = height - pad - agg.min_ms * scale
        y_max = height - pad - agg.max_ms * scale
        parts.append(f'<line x1="{cx}" y1="{y_min:.1f}" x2="{cx}" y2="{y_max:.1f}" stroke="black"/>')
        for yy in (y_min, y_max):
            parts.append(f'<line x1="{cx - 8}" y1="{yy:.1f}" x2="{cx + 8}" y2="{yy:.1f}" stroke="black"/>')
        parts.append(f'<text x="{cx}" y="{y_max - 4:.1f}" text-anchor="middle">{agg.avg_ms:.1f}</text>')
        parts.append(f'<text x="{cx}" y="{height - pad + 15}" text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export_svg(samples: Sequence[LatencySample], path: str | Path, title: str = "Reroute latency") -> Path:
    path = Path(path)
    path.write_text(svg_chart(samples, title))
    return path
