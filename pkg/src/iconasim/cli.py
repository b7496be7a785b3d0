"""Command line entry point: ``sim run | micro | sweep | calibrate``.

Exit codes: 0 success, 1 scenario or usage error, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .metrics import aggregate, export_csv, export_svg, group
from .micro import MicroError, run_micro
from .scenario import ExperimentKind, Results, ScenarioConfig, ScenarioError, grid_sweep, run
from .simcore import SimError
from .topo import TopologyError

EXIT_OK, EXIT_SCENARIO, EXIT_INVARIANT = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sim", description="Multi-cluster SDN control plane simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario config")
    r.add_argument("config", type=Path)
    r.add_argument("--trace", type=Path, help="write the event trace here")
    r.add_argument("--out", type=Path, default=Path("."), help="directory for results.csv and results.svg")
    r.add_argument("--seed", type=int)
    r.add_argument("--reps", type=int)
    r.add_argument("--workers", type=int, help="parallel worker processes")

    m = sub.add_parser("micro", help="run a scripted protocol scenario")
    m.add_argument("name")
    m.add_argument("--trace", type=Path, help="write the trace here instead of stdout")

    s = sub.add_parser("sweep", help="reroute sweep over grid sizes and cluster counts")
    s.add_argument("family", choices=["grid"])
    s.add_argument("--sizes", type=_int_list, default=[4, 6, 8, 10])
    s.add_argument("--clusters", type=_int_list, default=[1, 2, 4, 8])
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", type=Path, default=Path("."))
    s.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("calibrate", help="fit model constants on the k=1 case of a config")
    c.add_argument("config", type=Path)
    c.add_argument("--target-ms", type=float, required=True, help="mean k=1 value to hit")
    c.add_argument("--multi-target-ms", type=float,
                   help="startup only: multi-cluster mean used to fit the audit cost as well")
    return p


def print_table(results: Results, out=None) -> None:
    out = out or sys.stdout
    out.write(f"{'scenario':<16} {'plane':<9} {'avg_ms':>10} {'min_ms':>10} {'max_ms':>10} {'n':>4}\n")
    for (scenario, plane), items in group(results.samples).items():
        a = aggregate(items)
        out.write(f"{scenario:<16} {plane:<9} {a.avg_ms:>10.3f} {a.min_ms:>10.3f} {a.max_ms:>10.3f} {a.n:>4}\n")


def _emit(results: Results, out_dir: Path, trace: Path | None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    export_csv(results.samples, out_dir / "results.csv")
    title = "Convergence time" if results.config.kind == ExperimentKind.STARTUP.value else "Reroute latency"
    export_svg(results.samples, out_dir / "results.svg", title)
    if trace is not None:
        trace.parent.mkdir(parents=True, exist_ok=True)
        trace.write_text(results.trace_text())
    print_table(results)
    for d in results.details:
        if d.early_inter_messages:
            print(f"note: {d.early_inter_messages} inter-cluster messages before restoration (k={d.k} rep={d.rep})")
    if results.violations:
        for v in results.violations:
            print(f"invariant violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = ScenarioConfig.from_json(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.reps is not None:
        changes["repetitions"] = args.reps
    if args.workers is not None:
        changes["workers"] = args.workers
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    if cfg.kind == ExperimentKind.MICRO.value:
        raise ScenarioError("micro scenarios run with 'sim micro <name>'")
    results = run(cfg, trace=args.trace is not None)
    return _emit(results, args.out, args.trace)


def cmd_micro(args: argparse.Namespace) -> int:
    res = run_micro(args.name)
    text = "\n".join(res.trace) + "\n"
    if args.trace is not None:
        args.trace.write_text(text)
    else:
        sys.stdout.write(text)
    for note in res.notes:
        print(f"violation: {note}", file=sys.stderr)
    print(f"{res.name}: {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_INVARIANT


def cmd_sweep(args: argparse.Namespace) -> int:
    results = grid_sweep(args.sizes, args.clusters, reps=args.reps, seed=args.seed, workers=args.workers)
    return _emit(results, args.out, None)


def cmd_calibrate(args: argparse.Namespace) -> int:
    from .calibration import fit_handshake, fit_reroute, fit_startup

    cfg = ScenarioConfig.from_json(args.config)
    if cfg.kind == ExperimentKind.STARTUP.value and args.multi_target_ms is not None:
        ks = tuple(k for k in cfg.clusters if k != 1) or (2,)
        sf = fit_startup(cfg, args.target_ms, args.multi_target_ms, ks=ks)
        out = {"handshake_ms": sf.handshake_ms, "c0_ms": sf.c0_ms,
               "predicted_ms": {str(k): round(v, 3) for k, v in sf.predicted.items()}}
    elif cfg.kind == ExperimentKind.STARTUP.value:
        out = {"handshake_ms": fit_handshake(cfg, args.target_ms)}
    else:
        fit = fit_reroute(cfg, args.target_ms)
        out = {"c0_ms": fit.c0_ms, "c1_ms": fit.c1_ms, "access_delay_ms": fit.access_delay_ms,
               "predicted_ms": round(fit.predicted_ms, 3), "residual_ms": round(fit.residual_ms, 3)}
    print(json.dumps(out, indent=2))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "micro": cmd_micro, "sweep": cmd_sweep, "calibrate": cmd_calibrate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, MicroError, TopologyError, SimError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, MicroError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
