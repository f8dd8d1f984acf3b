"""Command-line front end: ``gfsim run|cct|powerflow|validate|plot``.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 failed
validation. Errors are also written to stderr as a one-line JSON payload.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ConfigError, ResolvedConfig, RunManifest, defaults_with_provenance, parse_config, resolve
from .converter import ConverterConfigError, max_modulation_index, inverse_park, park
from .engine import CHANNELS, EventError, SimConfig, SimResult, build_system, integrate_ode, simulate
from .fvb import FvbConfigError, coi_frequency
from .plots import PlotError, emit_plots
from .powergrid import GridError, power_balance
from .stability import (
    FAULTS,
    TABLE_COLUMNS,
    FaultScenario,
    MatrixColumn,
    cct_matrix,
    detect_loss_of_sync,
    run_scenario,
)

log = logging.getLogger("gfsim")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VALIDATION = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, ConverterConfigError, FvbConfigError, GridError, EventError, PlotError)


# -- output helpers --------------------------------------------------------------

def out_dir(args, manifest: RunManifest) -> Path:
    d = Path(args.out or manifest.output or os.environ.get("GFSIM_OUT") or "gfsim-out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path: Path, payload) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def write_timeseries(path: Path, result: SimResult) -> None:
    """CSV with 9 significant digits: time_s, then <channel>_<converter>, then w_coi."""
    cols = [result.time]
    header = ["time_s"]
    for ch in CHANNELS:
        for k, name in enumerate(result.names):
            cols.append(result.channels[ch][:, k])
            header.append(f"{ch}_{name}")
    cols.append(result.w_coi)
    header.append("w_coi")
    np.savetxt(path, np.column_stack(cols), fmt="%.9g", delimiter=",",
               header=",".join(header), comments="", newline="\n")


def run_summary(rc: ResolvedConfig, result: SimResult) -> dict:
    verdict = detect_loss_of_sync(result)
    m = rc.manifest
    return {
        "config_hash": m.config_hash,
        "fault": m.fault, "strategy": m.strategy, "clearing_s": m.clearing, "tau_s": m.tau,
        "verdict": "stable" if verdict.stable else "loss_of_synchronism",
        "los_time_s": verdict.time,
        "reason": verdict.reason or None,
        "max_angle_separation_deg": math.degrees(result.max_angle_separation),
        "events": [[t, what] for t, what in result.events],
        "samples": int(result.time.size),
    }


# -- manifest assembly -----------------------------------------------------------

def manifest_from_args(args) -> ResolvedConfig:
    source = args.config
    fault = None
    if args.scenario:
        if args.scenario in FAULTS:
            fault = args.scenario
        elif Path(args.scenario).is_file():
            source = source or args.scenario
        else:
            raise ConfigError(f"unknown scenario {args.scenario!r}; expected fault1..fault4 or a file",
                              "--scenario")
    m = parse_config(Path(source) if source else None).manifest
    changes: dict = {}
    if fault:
        changes["fault"] = fault
    if args.grid:
        changes["grid"] = args.grid
    if getattr(args, "strategy", None):
        changes["strategy"] = args.strategy
    if args.delay_ms is not None:
        changes["tau"] = args.delay_ms / 1000.0
    if args.clear_ms is not None:
        changes["clearing"] = args.clear_ms / 1000.0
    if args.step_us is not None:
        changes["step"] = args.step_us * 1e-6
    if args.horizon_s is not None:
        changes["horizon"] = args.horizon_s
    if args.v_a is not None:
        try:
            changes["fvb_l"] = dataclasses.replace(m.fvb_l, v_a=args.v_a)
        except FvbConfigError as exc:
            raise ConfigError(str(exc), "--v-a")
    return resolve(dataclasses.replace(m, **changes))


# -- subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    rc = manifest_from_args(args)
    m = rc.manifest
    system = build_system(rc.grid, rc.params)
    scen = FaultScenario(FAULTS[m.fault], m.strategy, m.tau, m.clearing)
    result = run_scenario(scen, system, m.study())
    d = out_dir(args, m)
    write_timeseries(d / "timeseries.csv", result)
    summary = run_summary(rc, result)
    write_json(d / "summary.json", summary)
    if args.plot:
        emit_plots(result, _channel_list(args.plot), d, reference=_slack_index(rc))
    print(f"{m.fault} strategy={m.strategy} tau={m.tau * 1000:g} ms clearing={m.clearing * 1000:g} ms: "
          f"{summary['verdict']}"
          + (f" at t={summary['los_time_s']:.4f} s" if summary["los_time_s"] is not None else ""))
    return EXIT_OK


def cmd_cct(args) -> int:
    rc = manifest_from_args(args)
    m = rc.manifest
    faults = [m.fault] if args.scenario else list(FAULTS)
    if args.strategy == "fvb-l":
        columns = [MatrixColumn(f"fvb-l v_a={m.fvb_l.v_a:g}", "fvb-l", v_a=m.fvb_l.v_a)]
    elif args.strategy == "fvb-wacs":
        columns = [MatrixColumn(f"fvb-wacs tau={m.tau * 1000:g}ms", "fvb-wacs", tau=m.tau)]
    elif args.strategy == "none":
        columns = [MatrixColumn("base", "none")]
    else:
        columns = list(TABLE_COLUMNS)
    report = cct_matrix(rc.grid, rc.params, faults, columns, m.study(), m.t_max, args.jobs,
                        m.verify_steps)
    d = out_dir(args, m)
    payload = {"config_hash": m.config_hash, **report.to_dict()}
    write_json(d / "cct.json", payload)
    with open(d / "cct.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fault", "column", "strategy", "v_a", "tau_s", "cct_ms", "censored",
                    "non_monotone", "probes", "error"])
        for c in report.cells:
            w.writerow([c.fault, c.column, c.strategy, "" if c.v_a is None else c.v_a, c.tau,
                        "" if c.cct is None else round(c.cct * 1000), c.censored, c.non_monotone,
                        len(c.trace), c.error or ""])
    sys.stdout.write(report.table())
    return EXIT_RUNTIME if any(c.error for c in report.cells) else EXIT_OK


def cmd_powerflow(args) -> int:
    rc = manifest_from_args(args)
    system = build_system(rc.grid, rc.params)
    pf = system.pf
    rows = []
    for k, name in enumerate(pf.gen_names):
        bus = pf.gen_buses[k]
        i = pf.bus_ids.index(bus)
        rows.append({"name": name, "bus": bus, "v_pu": float(pf.v[i]),
                     "angle_deg": math.degrees(pf.angle[i]),
                     "p_mw": float(pf.p_mw[k]), "q_mvar": float(pf.q_mvar[k])})
    gen, load, loss = power_balance(rc.grid, pf)
    d = out_dir(args, rc.manifest)
    write_json(d / "powerflow.json", {
        "grid": rc.grid.name, "iterations": pf.iterations, "generators": rows,
        "load_mw": load.real, "load_mvar": load.imag, "losses_mw": loss.real,
        "losses_mvar": loss.imag,
    })
    print(f"{'name':<6}{'bus':>5}{'v (pu)':>10}{'angle (deg)':>13}{'P (MW)':>10}{'Q (MVAr)':>10}")
    for r in rows:
        print(f"{r['name']:<6}{r['bus']:>5}{r['v_pu']:>10.4f}{r['angle_deg']:>13.2f}"
              f"{r['p_mw']:>10.1f}{r['q_mvar']:>10.1f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    rc = manifest_from_args(args)
    channels = _channel_list(args.channels)
    m = rc.manifest
    system = build_system(rc.grid, rc.params)
    result = run_scenario(FaultScenario(FAULTS[m.fault], m.strategy, m.tau, m.clearing), system,
                          m.study())
    paths = emit_plots(result, channels, out_dir(args, m), reference=_slack_index(rc))
    for p in paths:
        print(p)
    return EXIT_OK


def _channel_list(text: str) -> list[str]:
    return [c.strip() for c in text.split(",") if c.strip()]


def _slack_index(rc: ResolvedConfig) -> int:
    names = [g.name for g in rc.grid.generators]
    slack = [g.name for g in rc.grid.generators if g.kind == "slack"]
    return names.index(slack[0]) if slack else 0


# -- validate --------------------------------------------------------------------

def _checks(rc: ResolvedConfig) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    rng = np.random.default_rng(0)

    def modulation():
        m = max_modulation_index(640.0, 300.0)
        return abs(m - 1.31) <= 0.005, f"m_max = {m:.4f}"

    def park_roundtrip():
        z = rng.normal(size=1000) + 1j * rng.normal(size=1000)
        th = rng.uniform(-10, 10, size=1000)
        err = max(abs(inverse_park(*park(a, t), t) - a) for a, t in zip(z, th))
        return err <= 1e-12, f"max error {err:.2e}"

    def coi_convex():
        worst = 0.0
        for _ in range(10_000):
            w = rng.uniform(0.9, 1.1, size=4)
            h = rng.uniform(0.5, 10.0, size=4)
            c = coi_frequency(w, h)
            worst = max(worst, w.min() - c, c - w.max())
        return worst <= 0.0, f"worst excursion {worst:.2e}"

    def rk4_oracle():
        y = integrate_ode(lambda t, x: -x, [1.0], 1.0, 1e-2)[0]
        return abs(y - math.exp(-1)) <= 1e-9, f"y(1) = {y:.12f}"

    def equilibrium():
        system = build_system(rc.grid, rc.params)
        res = simulate(system, SimConfig(t_end=2.0, decimation=100))
        drift = max(float(np.max(np.abs(v - v[0]))) for k, v in res.channels.items() if k != "delta")
        dang = math.degrees(float(np.max(np.abs(res.channels["delta"] - res.channels["delta"][0]))))
        return drift <= 1e-3 and dang <= 0.1, f"channel drift {drift:.2e} pu, angle drift {dang:.2e} deg"

    def limiter_bound():
        system = build_system(rc.grid, rc.params)
        res = run_scenario(FaultScenario(FAULTS["fault1"], "none", 0.0, 0.15), system,
                           dataclasses.replace(rc.manifest.study(), horizon=1.0))
        imax = min(p.i_max for p in rc.params.values())
        peak = float(res.channels["i_ref"].max())
        return peak <= imax + 1e-9, f"peak current reference {peak:.6f} pu"

    return [("modulation index", modulation), ("park round trip", park_roundtrip),
            ("coi convexity", coi_convex), ("rk4 scalar oracle", rk4_oracle),
            ("equilibrium hold", equilibrium), ("current limiter bound", limiter_bound)]


def cmd_validate(args) -> int:
    if args.show_defaults:
        for key, value, why in defaults_with_provenance():
            print(f"{key:<28}{value!s:<24}{why}")
        return EXIT_OK
    rc = manifest_from_args(args)
    failed = 0
    results = []
    for name, fn in _checks(rc):
        ok, detail = fn()
        ok = bool(ok)
        failed += not ok
        results.append({"check": name, "ok": ok, "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if args.out or rc.manifest.output or os.environ.get("GFSIM_OUT"):
        write_json(out_dir(args, rc.manifest) / "validate.json", results)
    return EXIT_VALIDATION if failed else EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategy=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--grid", help="grid file (default: bundled benchmark)")
        sp.add_argument("--scenario", help="fault1..fault4 or a configuration file")
        if strategy:
            sp.add_argument("--strategy", choices=("none", "fvb-l", "fvb-wacs"))
        sp.add_argument("--delay-ms", type=float, help="wide-area communication delay")
        sp.add_argument("--clear-ms", type=float, help="fault clearing time")
        sp.add_argument("--step-us", type=float, help="integration step")
        sp.add_argument("--horizon-s", type=float, help="simulated time after clearing")
        sp.add_argument("--v-a", type=float, help="local booster sag threshold (pu)")
        sp.add_argument("--out", help="output directory (default: $GFSIM_OUT or ./gfsim-out)")

    sp = sub.add_parser("run", help="simulate one fault scenario")
    common(sp)
    sp.add_argument("--plot", default="", help="comma-separated channels to plot")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("cct", help="critical clearing times")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_cct)

    sp = sub.add_parser("powerflow", help="initial operating point")
    common(sp, strategy=False)
    sp.set_defaults(func=cmd_powerflow)

    sp = sub.add_parser("validate", help="run the invariant checks")
    common(sp, strategy=False)
    sp.add_argument("--show-defaults", action="store_true")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("plot", help="simulate a scenario and write SVG figures")
    common(sp)
    sp.add_argument("--channels", default="angle_difference,frequency_coi,dv_ts,p_g")
    sp.set_defaults(func=cmd_plot)
    return p


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("field", "line"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        return _fail(EXIT_CONFIG, ConfigError("must be >= 1", "--jobs"))
    t = time.perf_counter()
    try:
        code = args.func(args)
    except CONFIG_ERRORS as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t)
    return code


if __name__ == "__main__":
    sys.exit(main())
