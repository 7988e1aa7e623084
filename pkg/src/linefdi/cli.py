"""Command-line entry point: ``linefdi {design,simulate,diagnose,e2e,plot-data}``.

Exit codes: 0 success, 1 a verification failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import BACKEND, __version__
from .design import DesignError, calibrate_dt, design_filter, verify_design
from .engine import StreamError, run_stream
from .io import (
    ConfigError,
    IngestError,
    builtin_run_path,
    load_config,
    load_design,
    read_residuals,
    read_waveforms,
    save_design,
    write_diagnoses,
    write_residuals,
    write_waveforms,
)
from .model import ModelError
from .report import format_table, match_events
from .sim import SimulationError, add_noise, simulate

log = logging.getLogger("linefdi")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _config(args):
    return load_config(args.config or builtin_run_path())


def _design(cfg):
    eig = cfg.eigenvalues[0] if len(cfg.eigenvalues) == 1 else cfg.eigenvalues
    return design_filter(cfg.line, cfg.dt, eig)


def cmd_design(args) -> int:
    cfg = _config(args)
    design = _design(cfg)
    rep = verify_design(design)
    if args.calibrate:
        dt, dist, ev = calibrate_dt(cfg.line)
        rep.info["best-fit dt for the reference eigenvalues"] = f"{dt:.4g} s (distance {dist:.4f})"
    text = rep.format()
    print(text)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_design(design, out)
    if args.report:
        Path(args.report).write_text(text + "\n")
    log.info("design written to %s", out)
    return EXIT_OK if rep.passed else EXIT_FAIL


def _simulate(cfg, noise=None, seed=None):
    w = simulate(cfg.events, cfg.line, cfg.sources, dt=cfg.dt, n_sections=cfg.n_sections, t_stop=cfg.t_stop)
    amp = cfg.noise_pu if noise is None else noise
    return add_noise(w, amp, cfg.seed if seed is None else seed)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    t = time.perf_counter()
    w = _simulate(cfg, args.noise, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_waveforms(w, out)
    print(f"{len(w)} samples at dt={w.dt:g} s written to {out} ({time.perf_counter() - t:.1f} s)")
    return EXIT_OK


def _diagnose(design, w, cfg, residuals=None, threshold=None):
    u, y = w.per_unit()
    thr = cfg.threshold_pu if threshold is None else threshold
    diags, res = run_stream(u, y, design, threshold=thr, stat=cfg.statistic, t0=w.t0, return_residuals=True)
    if residuals:
        write_residuals(residuals, w.time, res["canonical"], res["filtered"])
    return diags


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    design = load_design(args.design)
    w = read_waveforms(args.waveforms)
    if abs(w.dt - design.dt) > 1e-9 * design.dt:
        raise IngestError(f"waveform dt {w.dt:g} s does not match design dt {design.dt:g} s")
    diags = _diagnose(design, w, cfg, args.residuals, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = write_diagnoses(diags, out)
    for r in recs:
        if r["verdict"] != "none":
            loc = "" if r["location_km"] is None else f"  {r['location_km']:.2f} km"
            what = r["fault_type"] or r["channel"] or ""
            print(f"{r['t0']:8.3f} - {r['t1']:8.3f}  {r['verdict']:<13}{what:<6}{loc}")
    return EXIT_OK


def cmd_e2e(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.mkdir(exist_ok=True)
    t_all = time.perf_counter()
    design = _design(cfg)
    rep = verify_design(design)
    save_design(design, out / "design.json")
    w = _simulate(cfg, args.noise, args.seed)
    write_waveforms(w, out / "waveforms.csv")
    diags = _diagnose(design, w, cfg, out / "residuals.csv")
    write_diagnoses(diags, out / "diagnoses.jsonl")
    rows = match_events(diags, cfg.events, cfg.line.length_km)
    elapsed = time.perf_counter() - t_all
    table = format_table(rows)
    print(rep.format())
    print()
    print(table)
    ok = rep.passed and all(r.ok for r in rows)
    print(f"\nbackend={BACKEND}  runtime={elapsed:.1f} s  overall={'PASS' if ok else 'FAIL'}")
    summary = {
        "passed": ok,
        "runtime_s": elapsed,
        "design_passed": rep.passed,
        "events": [
            {"event": None if r.event is None else r.event.event_id, "expected": r.expected,
             "observed": r.observed, "location_km": r.location_km, "error_km": r.error_km, "ok": r.ok}
            for r in rows
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "summary.txt").write_text(table + "\n")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_plot_data(args) -> int:
    header, data = read_residuals(args.residuals)
    t = data[:, 0]
    lo = -np.inf if args.t0 is None else args.t0
    hi = np.inf if args.t1 is None else args.t1
    mask = (t >= lo) & (t <= hi)
    cols = ["t"] + (args.channels.split(",") if args.channels else header[1:])
    missing = [c for c in cols if c not in header]
    if missing:
        raise IngestError(f"{args.residuals}: no column(s) {', '.join(missing)}")
    sel = data[mask][:: max(args.every, 1)][:, [header.index(c) for c in cols]]
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        np.savetxt(fh, sel, delimiter=",", header=",".join(cols), comments="", fmt="%.8g")
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linefdi", description="Transmission-line fault detection filter tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("-c", "--config", help="run configuration (default: shipped event schedule)")
        return sp

    sp = with_config(sub.add_parser("design", help="design and verify the filter"))
    sp.add_argument("-o", "--out", default="design.json")
    sp.add_argument("--report", help="also write the verification report here")
    sp.add_argument("--calibrate", action="store_true", help="report the dt best matching the reference eigenvalues")
    sp.set_defaults(func=cmd_design)

    sp = with_config(sub.add_parser("simulate", help="simulate the event schedule to a waveform CSV"))
    sp.add_argument("-o", "--out", default="waveforms.csv")
    sp.add_argument("--noise", type=float, help="noise amplitude in pu (overrides the config)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = with_config(sub.add_parser("diagnose", help="run the filter over a waveform CSV"))
    sp.add_argument("-d", "--design", required=True)
    sp.add_argument("-w", "--waveforms", required=True)
    sp.add_argument("-o", "--out", default="diagnoses.jsonl")
    sp.add_argument("--residuals", help="write per-sample residuals here")
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_diagnose)

    sp = with_config(sub.add_parser("e2e", help="design, simulate, diagnose and score against the schedule"))
    sp.add_argument("-o", "--out", help="output directory (default: config output.dir)")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_e2e)

    sp = sub.add_parser("plot-data", help="slice a residual CSV for plotting")
    sp.add_argument("residuals")
    sp.add_argument("--t0", type=float)
    sp.add_argument("--t1", type=float)
    sp.add_argument("--channels", help="comma-separated columns, e.g. r1,r5,b1")
    sp.add_argument("--every", type=int, default=1, help="keep every n-th sample")
    sp.add_argument("-o", "--out")
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestError, StreamError, ModelError, SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DesignError as exc:
        print(f"design failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
