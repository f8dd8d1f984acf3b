"""Fixed-step time-domain simulation of converters coupled through a
quasi-static network.

The network is algebraic: at every RK stage the converter grid-side currents
are injected into the (Kron-reduced) network to obtain the PCC voltages.
Converter states are integrated with RK4 (or explicit Euler). Boosters,
anti-windup decisions and the communication delay line are sampled once per
step, before the step, and held across its stages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.linalg

from . import converter as cv
from .converter import VscParams, init_from_powerflow
from .fvb import FvbConfig, _coi, delay_push, delay_steps, fvb_l_core, fvb_wacs_core
from .powergrid import (
    DEFAULT_FAULT_ADMITTANCE,
    GridModel,
    NetworkEvents,
    PowerFlowSolution,
    build_ybus,
    factorize,
    newton_power_flow,
)

log = logging.getLogger(__name__)

STRATEGY_CODES = {"none": 0, "fvb-l": 1, "fvb-wacs": 2}
CHANNELS = ("delta", "dw", "v_g", "v_f", "p_g", "q_g", "dv_ts", "i_ref", "i_s", "limiting")

STATUS_OK = 0
STATUS_LOS = 1
STATUS_NONFINITE = 2


class SimulationError(RuntimeError):
    pass


class EventError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    step: float = 1e-4
    t_end: float = 5.0
    decimation: int = 10
    integrator: str = "rk4"
    stop_on_los: bool = False
    los_threshold: float = math.pi
    anti_windup: bool = True
    # the grid is algebraic (no line/load electromagnetic transients); this is
    # the only network model implemented and is kept explicit in configs
    network: str = "quasi-static"

    def __post_init__(self):
        if self.step <= 0 or self.t_end <= 0:
            raise ValueError("step and t_end must be positive")
        if self.decimation < 1:
            raise ValueError("decimation must be >= 1")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.network != "quasi-static":
            raise ValueError(f"unsupported network model {self.network!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.step))


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # apply_fault | clear_fault | trip_branch
    bus: int | None = None
    branch: str | None = None
    admittance: complex = DEFAULT_FAULT_ADMITTANCE

    def describe(self) -> str:
        if self.kind == "apply_fault":
            return f"apply fault at bus {self.bus}"
        if self.kind == "clear_fault":
            return f"clear fault at bus {self.bus}"
        return f"trip branch {self.branch}"


@dataclass(frozen=True)
class ScheduledEvent:
    index: int
    event: Event


def schedule_events(events: Sequence[Event], step: float) -> list[ScheduledEvent]:
    """Snap event times to the step grid, sort them and check their order."""
    out = []
    for order, ev in enumerate(events):
        if ev.kind not in ("apply_fault", "clear_fault", "trip_branch"):
            raise EventError(f"unknown event kind {ev.kind!r}")
        if ev.kind in ("apply_fault", "clear_fault") and ev.bus is None:
            raise EventError(f"{ev.kind} needs a bus")
        if ev.kind == "trip_branch" and not ev.branch:
            raise EventError("trip_branch needs a branch")
        if ev.time < 0:
            raise EventError("event times must be non-negative")
        out.append((int(round(ev.time / step)), order, ev))
    out.sort(key=lambda t: (t[0], t[1]))
    faulted: set[int] = set()
    tripped: set[str] = set()
    for idx, _, ev in out:
        if ev.kind == "apply_fault":
            if ev.bus in faulted:
                raise EventError(f"bus {ev.bus} is already faulted at t={idx * step:g}")
            faulted.add(ev.bus)
        elif ev.kind == "clear_fault":
            if ev.bus not in faulted:
                raise EventError(f"fault at bus {ev.bus} cleared before it is applied")
            faulted.discard(ev.bus)
        else:
            if ev.branch in tripped:
                raise EventError(f"branch {ev.branch} tripped twice")
            tripped.add(ev.branch)
    return [ScheduledEvent(idx, ev) for idx, _, ev in out]


def topology_segments(scheduled: Sequence[ScheduledEvent]) -> list[tuple[int, NetworkEvents]]:
    """Piecewise-constant network states as (first step index, events) pairs."""
    faults: dict[int, complex] = {}
    off: set[str] = set()
    segments = [(0, NetworkEvents())]
    for se in scheduled:
        ev = se.event
        if ev.kind == "apply_fault":
            faults[ev.bus] = ev.admittance
        elif ev.kind == "clear_fault":
            del faults[ev.bus]
        else:
            off.add(ev.branch)
        state = NetworkEvents(frozenset(off), dict(faults))
        if segments[-1][0] == se.index:
            segments[-1] = (se.index, state)
        else:
            segments.append((se.index, state))
    return segments


@dataclass
class System:
    """Converters attached to a network, initialised at a power-flow point."""

    grid: GridModel
    names: tuple[str, ...]
    buses: tuple[int, ...]
    params: tuple[VscParams, ...]
    pf: PowerFlowSolution
    x0: np.ndarray
    p_g0: np.ndarray
    v_f0: np.ndarray
    load_voltages: dict[int, float] | None

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def param_array(self) -> np.ndarray:
        return np.stack([p.as_array() for p in self.params])

    @property
    def base_ratio(self) -> np.ndarray:
        """Converter rating over system base (current scaling at the PCC)."""
        return np.array([p.rating_mva / self.grid.base_mva for p in self.params])

    @property
    def inertia(self) -> np.ndarray:
        return np.array([p.h for p in self.params])

    def reduced_impedance(self, events: NetworkEvents) -> np.ndarray:
        """PCC voltages per unit injected PCC current (system base)."""
        Y = build_ybus(self.grid, events, self.load_voltages)
        lu = factorize(Y)
        ids = self.grid.bus_ids
        cols = [ids.index(b) for b in self.buses]
        E = np.zeros((len(ids), len(cols)), dtype=complex)
        for k, c in enumerate(cols):
            E[c, k] = 1.0
        Z = scipy.linalg.lu_solve(lu, E)
        return np.ascontiguousarray(Z[cols, :])


def build_system(grid: GridModel, params: Sequence[VscParams] | dict[str, VscParams],
                 pf: PowerFlowSolution | None = None) -> System:
    """Run the power flow (if needed) and initialise every converter."""
    pf = pf or newton_power_flow(grid)
    names = tuple(g.name for g in grid.generators)
    if isinstance(params, dict):
        params = tuple(params[n] for n in names)
    params = tuple(params)
    if len(params) != len(names):
        raise ValueError("one VscParams per generator is required")
    xs, p0, vf0 = [], [], []
    for name, par in zip(names, params):
        k = pf.gen_names.index(name)
        v_g = complex(pf.voltage[pf.bus_ids.index(pf.gen_buses[k])])
        s_g = complex(pf.p_mw[k], pf.q_mvar[k]) / par.rating_mva
        x, sp = init_from_powerflow(v_g, s_g, par)
        xs.append(x)
        p0.append(sp.p_g0)
        vf0.append(sp.v_f0)
    load_v = None
    if grid.load_model == "constant_power":
        load_v = {ld.bus: float(pf.v[pf.bus_ids.index(ld.bus)]) for ld in grid.loads}
    return System(
        grid=grid, names=names, buses=tuple(grid.generator(n).bus for n in names),
        params=params, pf=pf, x0=np.stack(xs), p_g0=np.array(p0), v_f0=np.array(vf0),
        load_voltages=load_v,
    )


@dataclass
class SimResult:
    time: np.ndarray
    names: tuple[str, ...]
    channels: dict[str, np.ndarray]
    w_coi: np.ndarray
    events: list[tuple[float, str]] = field(default_factory=list)
    status: str = "ok"
    los_time: float | None = None
    nonfinite_time: float | None = None
    max_angle_separation: float = 0.0
    final_state: np.ndarray | None = None

    @property
    def finite(self) -> bool:
        return self.nonfinite_time is None

    def angle_difference(self, i: int, j: int, degrees: bool = True) -> np.ndarray:
        d = self.channels["delta"][:, i] - self.channels["delta"][:, j]
        return np.degrees(d) if degrees else d


def unwrap_angles(delta: np.ndarray) -> np.ndarray:
    """Continuous angle channel (removes 2*pi jumps along axis 0)."""
    return np.unwrap(delta, axis=0)


def record(result_channels: dict[str, list], snapshot: dict[str, np.ndarray], t: float,
           k: int, decimation: int) -> bool:
    """Append a snapshot when ``k`` falls on the decimation grid."""
    if k % decimation:
        return False
    result_channels.setdefault("time", []).append(t)
    for name, value in snapshot.items():
        result_channels.setdefault(name, []).append(np.array(value, copy=True))
    return True


# -- compiled core -------------------------------------------------------------

@numba.njit(cache=True)
def _pcc_voltages(X, Z, sratio, V):
    n = X.shape[0]
    I = np.empty(n, dtype=np.complex128)
    for i in range(n):
        I[i] = cv.inverse_park(X[i, cv.X_IGD], X[i, cv.X_IGQ], X[i, cv.X_DELTA]) * sratio[i]
    for i in range(n):
        acc = 0j
        for j in range(n):
            acc += Z[i, j] * I[j]
        V[i] = acc


@numba.njit(cache=True)
def _system_rhs(X, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, dX, V):
    _pcc_voltages(X, Z, sratio, V)
    for i in range(X.shape[0]):
        vgd, vgq = cv.park(V[i], X[i, cv.X_DELTA])
        cv.converter_rhs(X[i], P[i], vgd, vgq, p0[i], vf_ref[i], fz_v[i], fz_c[i], w0, dX[i])


@numba.njit(cache=True)
def _integrate(X, P, p0, vf0, H, Zs, seg_start, n_steps, h, w0, sratio, method,
               strategy, fl, fw, delay_rows, dec, stop_on_los, los_thr, anti_windup,
               r_delta, r_dw, r_vg, r_vf, r_pg, r_qg, r_dv, r_iref, r_is, r_lim, r_coi):
    n = X.shape[0]
    V = np.empty(n, dtype=np.complex128)
    k1 = np.empty_like(X)
    k2 = np.empty_like(X)
    k3 = np.empty_like(X)
    k4 = np.empty_like(X)
    tmp = np.empty_like(X)
    vf_ref = vf0.copy()
    dv = np.zeros(n)
    fz_v = np.zeros(n, dtype=np.bool_)
    fz_c = np.zeros(n, dtype=np.bool_)
    sag = np.zeros(n, dtype=np.bool_)
    act = np.zeros(n, dtype=np.bool_)
    wst = np.zeros((n, 4))
    dbuf = np.zeros((delay_rows, n))
    dhead = 0
    u = np.empty(n)
    ud = np.empty(n)
    w = np.empty(n)
    seg = 0
    n_seg = seg_start.shape[0]
    status = 0
    event_step = -1
    max_sep = 0.0
    rec = 0
    for k in range(n_steps + 1):
        while seg + 1 < n_seg and seg_start[seg + 1] <= k:
            seg += 1
        Z = Zs[seg]

        # sampled elements, from the state at the start of the step
        _pcc_voltages(X, Z, sratio, V)
        for i in range(n):
            w[i] = 1.0 + X[i, cv.X_DW]
        wc = _coi(w, H)
        if strategy == 1:
            for i in range(n):
                dv[i], sag[i], act[i] = fvb_l_core(abs(V[i]), X[i, cv.X_DW], sag[i], act[i],
                                                   fl[0], fl[1], fl[2], fl[3])
        elif strategy == 2:
            for i in range(n):
                u[i] = wc - w[i]
            dhead = delay_push(dbuf, dhead, u, ud)
            for i in range(n):
                dv[i] = fvb_wacs_core(ud[i], wst[i], fw[0], fw[1], fw[2], fw[3], fw[4], h)
        for i in range(n):
            vf_ref[i] = min(max(vf0[i] + dv[i], cv.VF_REF_MIN), cv.VF_REF_MAX)
            ird, irq, isat, _, _, msat = cv.control_outputs(X[i], P[i], vf_ref[i])
            fz_v[i] = isat and anti_windup
            fz_c[i] = msat and anti_windup
            if k % dec == 0:
                vgd, vgq = cv.park(V[i], X[i, cv.X_DELTA])
                pg, qg = cv.measure_power(vgd, vgq, X[i, cv.X_IGD], X[i, cv.X_IGQ])
                r_delta[rec, i] = X[i, cv.X_DELTA]
                r_dw[rec, i] = X[i, cv.X_DW]
                r_vg[rec, i] = abs(V[i])
                r_vf[rec, i] = math.hypot(X[i, cv.X_VFD], X[i, cv.X_VFQ])
                r_pg[rec, i] = pg
                r_qg[rec, i] = qg
                r_dv[rec, i] = dv[i]
                r_iref[rec, i] = math.hypot(ird, irq)
                r_is[rec, i] = math.hypot(X[i, cv.X_ISD], X[i, cv.X_ISQ])
                r_lim[rec, i] = 1.0 if isat else 0.0
        if k % dec == 0:
            r_coi[rec] = wc
            rec += 1

        # loss of synchronism on the full-rate angles
        lo = X[0, cv.X_DELTA]
        hi = lo
        for i in range(1, n):
            d = X[i, cv.X_DELTA]
            if d < lo:
                lo = d
            if d > hi:
                hi = d
        if hi - lo > max_sep:
            max_sep = hi - lo
        if hi - lo > los_thr and status == 0:
            status = 1
            event_step = k
            if stop_on_los:
                return status, event_step, k, rec, max_sep
        if k == n_steps:
            break

        if method == 0:
            _system_rhs(X, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, k1, V)
            for i in range(n):
                for j in range(X.shape[1]):
                    tmp[i, j] = X[i, j] + 0.5 * h * k1[i, j]
            _system_rhs(tmp, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, k2, V)
            for i in range(n):
                for j in range(X.shape[1]):
                    tmp[i, j] = X[i, j] + 0.5 * h * k2[i, j]
            _system_rhs(tmp, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, k3, V)
            for i in range(n):
                for j in range(X.shape[1]):
                    tmp[i, j] = X[i, j] + h * k3[i, j]
            _system_rhs(tmp, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, k4, V)
            for i in range(n):
                for j in range(X.shape[1]):
                    X[i, j] += h / 6.0 * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
        else:
            _system_rhs(X, P, p0, vf_ref, fz_v, fz_c, Z, w0, sratio, k1, V)
            for i in range(n):
                for j in range(X.shape[1]):
                    X[i, j] += h * k1[i, j]

        for i in range(n):
            for j in range(X.shape[1]):
                if not np.isfinite(X[i, j]):
                    return 2, k + 1, k + 1, rec, max_sep
    return status, event_step, n_steps, rec, max_sep


def simulate(system: System, config: SimConfig, events: Sequence[Event] = (),
             fvb: FvbConfig | None = None, x0: np.ndarray | None = None) -> SimResult:
    """Integrate ``system`` over ``[0, config.t_end]`` with the given events."""
    fvb = fvb or FvbConfig()
    scheduled = schedule_events(events, config.step)
    n_steps = config.n_steps
    for se in scheduled:
        if se.index > n_steps:
            raise EventError(f"event at t={se.event.time} is beyond the horizon")
    segments = topology_segments(scheduled)
    Zs = np.stack([system.reduced_impedance(ev) for _, ev in segments])
    seg_start = np.array([s for s, _ in segments], dtype=np.int64)

    n = system.n
    n_rec = n_steps // config.decimation + 1
    rec = {c: np.zeros((n_rec, n)) for c in CHANNELS}
    r_coi = np.zeros(n_rec)
    fl = np.array([fvb.fvb_l.v_a, fvb.fvb_l.v_b, fvb.fvb_l.w_thres, fvb.fvb_l.dv_max])
    fw_p = fvb.fvb_wacs
    fw = np.array([fw_p.k, fw_p.t_f, fw_p.t_w, fw_p.dv_max, fw_p.eps])
    delay_rows = delay_steps(fw_p.tau, config.step) + 1
    X = np.array(system.x0 if x0 is None else x0, dtype=float, copy=True)

    status, ev_step, last, n_done, max_sep = _integrate(
        X, system.param_array, system.p_g0, system.v_f0, system.inertia, Zs, seg_start,
        n_steps, config.step, system.grid.omega0, system.base_ratio,
        0 if config.integrator == "rk4" else 1, STRATEGY_CODES[fvb.strategy], fl, fw,
        delay_rows, config.decimation, config.stop_on_los, config.los_threshold, config.anti_windup,
        rec["delta"], rec["dw"], rec["v_g"], rec["v_f"], rec["p_g"], rec["q_g"],
        rec["dv_ts"], rec["i_ref"], rec["i_s"], rec["limiting"], r_coi,
    )
    time = np.arange(n_done) * (config.step * config.decimation)
    channels = {c: v[:n_done] for c, v in rec.items()}
    channels["delta"] = unwrap_angles(channels["delta"])
    res = SimResult(
        time=time, names=system.names, channels=channels, w_coi=r_coi[:n_done],
        events=[(se.index * config.step, se.event.describe()) for se in scheduled],
        max_angle_separation=float(max_sep), final_state=X,
    )
    if status == STATUS_LOS:
        res.status = "los"
        res.los_time = ev_step * config.step
    elif status == STATUS_NONFINITE:
        res.status = "nonfinite"
        res.nonfinite_time = ev_step * config.step
        log.warning("non-finite state at t=%.4f s",
                    res.nonfinite_time)
    return res


def integrate_ode(f: Callable[[float, np.ndarray], np.ndarray], y0, t_end: float, step: float,
                  method: str = "rk4") -> np.ndarray:
    """Reference fixed-step integrator for small ODEs (same tableau as the engine)."""
    y = np.array(y0, dtype=float)
    n = int(round(t_end / step))
    t = 0.0
    for k in range(n):
        t = k * step
        if method == "rk4":
            k1 = f(t, y)
            k2 = f(t + step / 2, y + step / 2 * k1)
            k3 = f(t + step / 2, y + step / 2 * k2)
            k4 = f(t + step, y + step * k3)
            y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            y = y + step * f(t, y)
    return y
