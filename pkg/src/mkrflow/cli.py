"""Command-line front end: run scenarios, compute singular times, solve the
limit equation and evaluate diagnostics on stored snapshots.

Every verb prints machine-readable ``key=value`` lines. Exit codes: 0 on
success, 2 for configuration errors, 3 when the flow or solver fails (partial
artifacts are kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from . import diagnostics as diag
from .config import ConfigError, load_config
from .flow import FlowError, make_state, run, singular_time
from .limit_solver import EllipticProblem, IncompatibleProblem, NewtonError, check_compatibility, solve
from .snapshot import SnapshotError, read_snapshot, write_snapshot
from .torus import PositivityError, osc

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CSV_NAME = "diagnostics.csv"
STATE_NAME = "state.bin"
RATE_WINDOW_START = 5.0


def _emit(pairs, stream=None):
    stream = stream or sys.stdout
    for k, v in pairs.items():
        if isinstance(v, (dict, list)):
            continue
        if isinstance(v, float):
            v = repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
        stream.write(f"{k}={v}\n")
    stream.flush()


def _truncate_csv(path, t_cut):
    """Keep the header and rows with ``t < t_cut``; create the file if absent."""
    keep = [diag.csv_header() + "\n"]
    if os.path.exists(path):
        with open(path) as fh:
            lines = fh.readlines()
        for line in lines[1:]:
            if line.strip() and float(line.split(",", 1)[0]) < t_cut:
                keep.append(line)
    with open(path, "w") as fh:
        fh.writelines(keep)


def _fit(records, key, t_end):
    cols = diag.records_to_columns(records)
    try:
        fit = diag.fit_exp_rate(cols["t"], cols[key], window=(RATE_WINDOW_START, t_end))
    except ValueError:
        return {}
    return {f"rate_{key}": fit.rate, f"r2_{key}": fit.r2, f"floored_{key}": fit.floored}


def oracle_comparison(bg, state):
    """Sup-distance between the normalized potential and the elliptic limit."""
    problem = EllipticProblem(bg.grid, bg.omega_inf, bg.log_h)
    mismatch = check_compatibility(problem)
    u_inf, report = solve(problem, full_output=True)
    v = diag.normalized_potential(state, bg)
    return {
        "oracle_mismatch": mismatch,
        "oracle_residual": report.residual,
        "oracle_newton_steps": len(report.residuals) - 1,
        "v_error": float(np.max(np.abs(v - u_inf))),
    }


def execute_run(cfg, out_dir, resume=None, cadence=None, observer=None):
    """Run ``cfg`` writing artifacts into ``out_dir``; returns ``(exit_code, summary)``."""
    os.makedirs(os.path.join(out_dir, "snapshots"), exist_ok=True)
    bg = cfg.background()
    policy = cfg.policy
    kind = cfg.flow_kind
    cadence = cadence or cfg.cadence
    T = singular_time(bg)
    weight = cfg.weight(T)
    csv_path = os.path.join(out_dir, CSV_NAME)

    state = None
    if resume is not None:
        snap = read_snapshot(resume)
        if snap.grid != bg.grid or snap.flow_kind != kind:
            raise ConfigError(f"snapshot {resume} does not match the configured grid or flow kind")
        state = make_state(bg, snap.t, snap.u, kind, policy.delta_pd)
        _truncate_csv(csv_path, snap.t)
    else:
        _truncate_csv(csv_path, -math.inf)

    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "scenario": cfg.scenario,
        "n1_smoke_test": bg.grid.n_complex == 1,
        "resumed_from": None if resume is None else os.path.abspath(resume),
        "cadence": cadence,
        "config": cfg.as_dict(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    records = []
    snap_every = cfg.snapshot_every
    last = {"state": state}

    def on_record(s):
        rec = diag.record(s, bg, weight, T, with_S=cfg.compute_S)
        records.append(rec)
        with open(csv_path, "a") as fh:
            fh.write(diag.format_row(rec) + "\n")
        if snap_every and abs(s.t / snap_every - round(s.t / snap_every)) < 1e-9:
            name = os.path.join(out_dir, "snapshots", f"snap_t{s.t:012.6f}.bin")
            write_snapshot(name, bg.grid, s.t, s.u, kind)
        return rec

    def on_step(s):
        last["state"] = s
        if observer is not None:
            observer(s)

    summary = {"scenario": cfg.scenario, "flow_kind": kind, "singular_time": T,
               "n1_smoke_test": bg.grid.n_complex == 1}
    code = EXIT_OK
    try:
        result = run(bg, policy, kind, cadence, state=state, steady_tol=cfg.steady_tol,
                     diagnose=on_record, observer=on_step)
        final = result.state
        summary.update(halt_reason=result.halt_reason, steps=result.steps)
    except (FlowError, PositivityError) as exc:
        final = last["state"]
        code = EXIT_RUNTIME
        summary.update(halt_reason="error", error=str(exc))
    if final is not None:
        write_snapshot(os.path.join(out_dir, STATE_NAME), bg.grid, final.t, final.u, kind)
        summary.update(
            t_final=float(final.t),
            sup_abs_u=float(np.max(np.abs(final.u))),
            osc_dudt_final=osc(final.rhs),
            max_abs_rhs_final=float(np.max(np.abs(final.rhs))),
            E_final=diag.energy(final, bg)[1],
        )
    if records:
        cols = diag.records_to_columns(records)
        t_end = float(cols["t"][-1])
        summary.update(_fit(records, "osc_dudt", t_end))
        summary.update(_fit(records, "E", t_end))
        summary["min_det_over_run"] = float(np.min(cols["min_det"]))
        summary["max_dudt_over_run"] = float(np.max(cols["max_dudt"]))
        if len(records) > 2:
            C, margin = diag.fit_A_inequality(cols["t"], cols["A"])
            summary.update(A_fit_C=C, A_fit_margin=margin)
        if weight is not None:
            summary["weighted_inf"] = float(np.nanmin(cols["weighted_min"]))
            summary["weighted_initial"] = float(cols["weighted_min"][0])
        if cfg.compute_S:
            summary["S_max_over_run"] = float(np.max(cols["S_max"]))
    if code == EXIT_OK and cfg.scenario == "kahler_limit" and final is not None:
        try:
            summary.update(oracle_comparison(bg, final))
        except NewtonError as exc:
            # The flow itself succeeded; an oracle that cannot resolve the
            # problem on this grid is reported, not turned into a failure.
            summary["oracle_error"] = str(exc)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return code, summary


def cmd_run(args):
    cfg = load_config(args.config)
    out = args.out or cfg.output_dir
    code, summary = execute_run(cfg, out, resume=args.resume, cadence=args.cadence)
    _emit(summary)
    return code


def cmd_singular_time(args):
    cfg = load_config(args.config)
    bg = cfg.background()
    res = singular_time(bg, full_output=True)
    _emit({
        "T": res.T,
        "degenerate_limit": res.degenerate_limit,
        "pencil_min": float(res.pencil[0]),
        "n1_smoke_test": bg.grid.n_complex == 1,
    })
    return EXIT_OK


def cmd_solve_limit(args):
    cfg = load_config(args.config)
    bg = cfg.background()
    problem = EllipticProblem(bg.grid, bg.omega_inf, bg.log_h)
    mismatch = check_compatibility(problem)
    u, report = solve(problem, full_output=True)
    pairs = {
        "mismatch": mismatch,
        "residual": report.residual,
        "newton_steps": len(report.residuals) - 1,
        "continuation": len(report.thetas) > 1,
        "sup_abs_u": float(np.max(np.abs(u))),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "u_inf.bin")
        write_snapshot(path, bg.grid, math.inf, u, "modified")
        pairs["output"] = path
    _emit(pairs)
    return EXIT_OK


def cmd_diag(args):
    cfg = load_config(args.config)
    bg = cfg.background()
    snap = read_snapshot(args.snapshot)
    if snap.grid != bg.grid:
        raise ConfigError("snapshot grid does not match the configuration")
    state = make_state(bg, snap.t, snap.u, snap.flow_kind)
    T = singular_time(bg)
    rec = diag.record(state, bg, cfg.weight(T), T, with_S=cfg.compute_S)
    pairs = {k: v for k, v in zip(diag.CSV_COLUMNS, rec.as_row())}
    pairs["osc"] = pairs["osc_dudt"]
    _emit(pairs)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mkrflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="integrate a scenario and write artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: [output] dir)")
    p.add_argument("--resume", metavar="SNAPSHOT", help="continue from a stored snapshot")
    p.add_argument("--cadence", type=float, help="diagnostics interval in flow time")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("singular-time", help="print the maximal existence time")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_singular_time)

    p = sub.add_parser("solve-limit", help="solve the limiting Monge-Ampere equation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="directory for u_inf.bin")
    p.set_defaults(func=cmd_solve_limit)

    p = sub.add_parser("diag", help="diagnostics of a stored snapshot")
    p.add_argument("snapshot")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SnapshotError, IncompatibleProblem) as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowError, PositivityError, NewtonError) as exc:
        print(f"error={exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
