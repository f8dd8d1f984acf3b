"""Fault scenarios, loss-of-synchronism detection and critical clearing times."""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .converter import VscParams
from .engine import Event, SimConfig, SimResult, System, build_system, simulate
from .fvb import STRATEGIES, FvbConfig, FvbLParams, FvbWacsParams, delay_steps
from .powergrid import DEFAULT_FAULT_ADMITTANCE, GridModel

log = logging.getLogger(__name__)

RESOLUTION = 0.01
CLEARING_ACTIONS = ("trip", "clear")


@dataclass(frozen=True)
class FaultSpec:
    """Three-phase fault on ``branch`` close to ``bus``."""

    name: str
    bus: int
    branch: str
    action: str  # trip: open the faulted branch; clear: remove the fault only

    def __post_init__(self):
        if self.action not in CLEARING_ACTIONS:
            raise ValueError(f"clearing action must be one of {CLEARING_ACTIONS}")

    @property
    def restores_topology(self) -> bool:
        return self.action == "clear"


FAULTS = {
    "fault1": FaultSpec("Fault I", 7, "7-8a", "trip"),
    "fault2": FaultSpec("Fault II", 5, "5-6", "clear"),
    "fault3": FaultSpec("Fault III", 11, "10-11", "clear"),
    "fault4": FaultSpec("Fault IV", 8, "8-9a", "trip"),
}


@dataclass(frozen=True)
class FaultScenario:
    fault: FaultSpec
    strategy: str = "none"
    tau: float = 0.0
    clearing: float = 0.15

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.clearing < 0 or self.tau < 0:
            raise ValueError("clearing time and delay must be non-negative")

    def check(self, grid: GridModel) -> None:
        br = grid.branch(self.fault.branch)
        if self.fault.bus not in (br.from_bus, br.to_bus):
            raise ValueError(f"bus {self.fault.bus} is not a terminal of branch {br.name}")


@dataclass(frozen=True)
class StudyConfig:
    """Settings shared by every run of a study."""

    t0: float = 1.0
    horizon: float = 5.0
    step: float = 1e-4
    decimation: int = 10
    integrator: str = "rk4"
    anti_windup: bool = True
    fault_admittance: complex = DEFAULT_FAULT_ADMITTANCE
    fvb_l: FvbLParams = field(default_factory=FvbLParams)
    fvb_wacs: FvbWacsParams = field(default_factory=FvbWacsParams)

    def sim_config(self, clearing: float, stop_on_los: bool = False) -> SimConfig:
        return SimConfig(step=self.step, t_end=self.t0 + clearing + self.horizon,
                         decimation=self.decimation, integrator=self.integrator,
                         stop_on_los=stop_on_los, anti_windup=self.anti_windup)

    def fvb_config(self, strategy: str, tau: float) -> FvbConfig:
        delay_steps(tau, self.step)
        return FvbConfig(strategy, self.fvb_l, dataclasses.replace(self.fvb_wacs, tau=tau))


def fault_events(scenario: FaultScenario, t0: float,
                 admittance: complex = DEFAULT_FAULT_ADMITTANCE) -> list[Event]:
    f = scenario.fault
    t1 = t0 + scenario.clearing
    events = [Event(t0, "apply_fault", bus=f.bus, admittance=admittance),
              Event(t1, "clear_fault", bus=f.bus)]
    if f.action == "trip":
        events.append(Event(t1, "trip_branch", branch=f.branch))
    return events


@dataclass(frozen=True)
class LosVerdict:
    stable: bool
    time: float | None = None
    reason: str = ""


def detect_loss_of_sync(result: SimResult, threshold: float = math.pi) -> LosVerdict:
    """LOS when any pair of converter angles separates by more than ``threshold``.

    The engine tracks the separation at every integration step; recorded
    samples are scanned as well so that hand-built results are handled.
    """
    times = []
    if result.nonfinite_time is not None:
        times.append((result.nonfinite_time, "non-finite state"))
    if result.los_time is not None:
        times.append((result.los_time, "angle separation"))
    delta = np.asarray(result.channels["delta"])
    if delta.size:
        sep = delta.max(axis=1) - delta.min(axis=1)
        hit = np.flatnonzero(~(sep <= threshold))
        if hit.size:
            times.append((float(result.time[hit[0]]), "angle separation"))
    if not times:
        return LosVerdict(True)
    t, why = min(times)
    return LosVerdict(False, t, why)


def run_scenario(scenario: FaultScenario, system: System, study: StudyConfig | None = None,
                 stop_on_los: bool = False) -> SimResult:
    study = study or StudyConfig()
    scenario.check(system.grid)
    return simulate(system, study.sim_config(scenario.clearing, stop_on_los),
                    fault_events(scenario, study.t0, study.fault_admittance),
                    study.fvb_config(scenario.strategy, scenario.tau))


@dataclass(frozen=True)
class Probe:
    clearing: float
    stable: bool
    phase: str  # bisect | verify


@dataclass
class CctResult:
    cct: float | None
    censored: bool
    non_monotone: bool
    trace: list[Probe]

    @property
    def bisection_probes(self) -> int:
        return sum(p.phase == "bisect" for p in self.trace)


def bisect_cct(is_stable: Callable[[float], bool], t_max: float = 1.5,
               resolution: float = RESOLUTION, verify_steps: int = 2) -> CctResult:
    """Largest stable clearing time on a ``resolution`` grid over [0, t_max].

    Stability is assumed monotone in the clearing time. ``verify_steps``
    extra points on each side of the answer are checked afterwards and any
    disagreement sets ``non_monotone``.
    """
    n = int(round(t_max / resolution))
    if n < 1:
        raise ValueError("t_max must be at least one resolution step")
    verdicts: dict[int, bool] = {}
    trace: list[Probe] = []

    def probe(k: int, phase: str) -> bool:
        if k not in verdicts:
            verdicts[k] = bool(is_stable(round(k * resolution, 10)))
            trace.append(Probe(round(k * resolution, 10), verdicts[k], phase))
        return verdicts[k]

    # invariant: lo is stable (0 assumed until checked), hi is unstable (n assumed)
    lo, hi = 0, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if probe(mid, "bisect"):
            lo = mid
        else:
            hi = mid
    if hi == n and probe(n, "bisect"):
        lo = n
    if lo == 0 and not probe(0, "bisect"):
        return CctResult(None, False, _non_monotone(verdicts), trace)
    censored = lo == n
    for s in range(1, verify_steps + 1):
        for k in (lo - s, lo + s):
            if 0 <= k <= n:
                probe(k, "verify")
    return CctResult(round(lo * resolution, 10), censored, _non_monotone(verdicts), trace)


def _non_monotone(verdicts: dict[int, bool]) -> bool:
    seq = [verdicts[k] for k in sorted(verdicts)]
    first_unstable = next((i for i, v in enumerate(seq) if not v), len(seq))
    return any(seq[first_unstable:])


def compute_cct(fault: FaultSpec, strategy: str, tau: float, system: System,
                study: StudyConfig | None = None, t_max: float = 1.5,
                verify_steps: int = 2) -> CctResult:
    study = study or StudyConfig()

    def is_stable(tc: float) -> bool:
        res = run_scenario(FaultScenario(fault, strategy, tau, tc), system, study, stop_on_los=True)
        return detect_loss_of_sync(res).stable

    return bisect_cct(is_stable, t_max, RESOLUTION, verify_steps)


@dataclass(frozen=True)
class MatrixColumn:
    label: str
    strategy: str
    v_a: float | None = None
    tau: float = 0.0


TABLE_COLUMNS = (
    MatrixColumn("base", "none"),
    MatrixColumn("fvb-l v_a=0.75", "fvb-l", v_a=0.75),
    MatrixColumn("fvb-l v_a=0.5", "fvb-l", v_a=0.5),
    MatrixColumn("fvb-wacs tau=0ms", "fvb-wacs", tau=0.0),
    MatrixColumn("fvb-wacs tau=50ms", "fvb-wacs", tau=0.05),
    MatrixColumn("fvb-wacs tau=100ms", "fvb-wacs", tau=0.1),
)


@dataclass
class CctCell:
    fault: str
    column: str
    strategy: str
    v_a: float | None
    tau: float
    cct: float | None = None
    censored: bool = False
    non_monotone: bool = False
    trace: list[Probe] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trace"] = [[p.clearing, p.stable, p.phase] for p in self.trace]
        return d


@dataclass
class CctReport:
    faults: list[str]
    columns: list[str]
    cells: list[CctCell]

    def cell(self, fault: str, column: str) -> CctCell:
        for c in self.cells:
            if c.fault == fault and c.column == column:
                return c
        raise KeyError((fault, column))

    def to_dict(self) -> dict:
        return {"faults": self.faults, "columns": self.columns,
                "cells": [c.to_dict() for c in self.cells]}

    def table(self) -> str:
        """Fixed-width CCT table in milliseconds."""
        w = max(len(c) for c in self.columns) + 2
        lines = ["fault".ljust(8) + "".join(c.rjust(w) for c in self.columns)]
        for f in self.faults:
            row = f.ljust(8)
            for col in self.columns:
                row += format_cct(self.cell(f, col)).rjust(w)
            lines.append(row)
        return "\n".join(lines) + "\n"


def format_cct(cell: CctCell) -> str:
    if cell.error:
        return "error"
    if cell.cct is None:
        return "none"
    s = f"{cell.cct * 1000:.0f}"
    if cell.censored:
        s = ">=" + s
    if cell.non_monotone:
        s += "*"
    return s


def _cell_worker(args) -> CctCell:
    grid, params, study, fault_key, col, t_max, verify_steps = args
    cell = CctCell(fault_key, col.label, col.strategy, col.v_a, col.tau)
    try:
        if col.v_a is not None:
            study = dataclasses.replace(study, fvb_l=dataclasses.replace(study.fvb_l, v_a=col.v_a))
        system = build_system(grid, params)
        res = compute_cct(FAULTS[fault_key], col.strategy, col.tau, system, study, t_max,
                          verify_steps)
        cell.cct, cell.censored, cell.non_monotone, cell.trace = (
            res.cct, res.censored, res.non_monotone, res.trace)
    except Exception as exc:  # recorded per cell, the matrix carries on
        log.error("cell %s/%s failed: %s", fault_key, col.label, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def cct_matrix(grid: GridModel, params: Sequence[VscParams] | dict[str, VscParams],
               faults: Sequence[str] = tuple(FAULTS), columns: Sequence[MatrixColumn] = TABLE_COLUMNS,
               study: StudyConfig | None = None, t_max: float = 1.5, jobs: int = 1,
               verify_steps: int = 2) -> CctReport:
    """CCT for every (fault, column) pair; cells may run in worker processes."""
    study = study or StudyConfig()
    for f in faults:
        if f not in FAULTS:
            raise ValueError(f"unknown fault {f!r}; expected one of {tuple(FAULTS)}")
    tasks = [(grid, params, study, f, col, t_max, verify_steps) for f in faults for col in columns]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_cell_worker, tasks))
    else:
        cells = [_cell_worker(t) for t in tasks]
    return CctReport(list(faults), [c.label for c in columns], cells)
