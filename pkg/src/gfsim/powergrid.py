"""Static network model, admittance matrices and Newton-Raphson power flow.

All network quantities are per unit on the system base (``GridModel.base_mva``)
and the bus nominal voltage. Buses are addressed by their integer id; the
position of a bus in every matrix and vector follows ``GridModel.bus_ids``.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg
import yaml
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEFAULT_FAULT_ADMITTANCE = 1.0e4 - 1.0e4j


class GridError(ValueError):
    """Invalid network description."""


class IslandingError(GridError):
    """The active topology splits the network into islands."""

    def __init__(self, isolated: Iterable[int]):
        self.isolated = sorted(isolated)
        super().__init__(f"network is islanded; isolated buses: {self.isolated}")


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: np.ndarray):
        self.mismatch = mismatch
        super().__init__(f"{message} (max mismatch {np.max(np.abs(mismatch)):.3e} pu)")


@dataclass(frozen=True)
class Bus:
    id: int
    kv: float


@dataclass(frozen=True)
class Branch:
    """Pi-model branch; ``b`` is the total shunt susceptance."""

    name: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Load:
    bus: int
    p_mw: float
    q_mvar: float


@dataclass(frozen=True)
class Shunt:
    """Fixed shunt; positive ``q_mvar`` is capacitive (injects at 1 pu)."""

    bus: int
    q_mvar: float


@dataclass(frozen=True)
class Generator:
    """Power-flow specification of a converter terminal.

    kind is one of ``slack`` (v, angle=0), ``pv`` (p, v) or ``pq`` (p, q).
    """

    name: str
    bus: int
    kind: str
    p_mw: float = 0.0
    q_mvar: float = 0.0
    v_pu: float = 1.0


@dataclass(frozen=True)
class GridModel:
    name: str
    base_mva: float
    frequency_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    generators: tuple[Generator, ...] = ()
    load_model: str = "constant_impedance"
    source: str = ""

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise GridError(f"branch {br.name} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise GridError(f"branch {br.name} is a self loop")
            if br.r == 0.0 and br.x == 0.0:
                raise GridError(f"branch {br.name} has zero impedance")
        names = [br.name for br in self.branches]
        if len(set(names)) != len(names):
            raise GridError("duplicate branch names")
        for item in (*self.loads, *self.shunts, *self.generators):
            if item.bus not in known:
                raise GridError(f"{item} references an unknown bus")
        if self.base_mva <= 0 or self.frequency_hz <= 0:
            raise GridError("bases must be positive")
        if self.load_model not in ("constant_power", "constant_impedance"):
            raise GridError(f"unknown load model {self.load_model!r}")
        if self.generators and sum(g.kind == "slack" for g in self.generators) != 1:
            raise GridError("exactly one slack generator is required")
        for g in self.generators:
            if g.kind not in ("slack", "pv", "pq"):
                raise GridError(f"generator {g.name}: unknown kind {g.kind!r}")

    @property
    def omega0(self) -> float:
        """Nominal angular frequency in rad/s."""
        return 2.0 * np.pi * self.frequency_hz

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise GridError(f"unknown bus {bus_id}") from None

    def branch(self, name: str) -> Branch:
        for br in self.branches:
            if br.name == name:
                return br
        raise GridError(f"unknown branch {name!r}")

    def generator(self, name: str) -> Generator:
        for g in self.generators:
            if g.name == name:
                return g
        raise GridError(f"unknown generator {name!r}")

    def with_branch_status(self, name: str, in_service: bool) -> "GridModel":
        self.branch(name)
        branches = tuple(
            dataclasses.replace(br, in_service=in_service) if br.name == name else br
            for br in self.branches
        )
        return dataclasses.replace(self, branches=branches)


@dataclass(frozen=True)
class NetworkEvents:
    """Topology modifications active at a given instant."""

    out_of_service: frozenset[str] = frozenset()
    fault_shunts: Mapping[int, complex] = field(default_factory=dict)

    def __hash__(self):
        return hash((self.out_of_service, tuple(sorted(self.fault_shunts.items()))))


@dataclass(frozen=True)
class AdmittanceMatrix:
    matrix: np.ndarray
    bus_ids: tuple[int, ...]

    def index(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    v: np.ndarray
    angle: np.ndarray
    gen_names: tuple[str, ...]
    gen_buses: tuple[int, ...]
    p_mw: np.ndarray
    q_mvar: np.ndarray
    iterations: int
    base_mva: float

    @property
    def voltage(self) -> np.ndarray:
        return self.v * np.exp(1j * self.angle)

    def bus_voltage(self, bus_id: int) -> complex:
        return complex(self.voltage[self.bus_ids.index(bus_id)])

    def injection(self, name: str) -> complex:
        """Complex power injected by generator ``name`` in MVA."""
        k = self.gen_names.index(name)
        return complex(self.p_mw[k], self.q_mvar[k])


def rebase(value: float, from_base, to_base, quantity: str = "impedance") -> float:
    """Convert a per-unit value between bases.

    Bases are either an MVA figure or an ``(mva, kv)`` pair. Powers scale with
    the MVA ratio only; impedances also with the square of the voltage ratio.
    """
    f_mva, f_kv = from_base if isinstance(from_base, tuple) else (from_base, 1.0)
    t_mva, t_kv = to_base if isinstance(to_base, tuple) else (to_base, 1.0)
    if min(f_mva, f_kv, t_mva, t_kv) <= 0:
        raise ValueError("bases must be positive")
    if quantity == "power":
        return value * f_mva / t_mva
    if quantity == "impedance":
        return value * (t_mva / f_mva) * (f_kv / t_kv) ** 2
    if quantity == "admittance":
        return value * (f_mva / t_mva) * (t_kv / f_kv) ** 2
    if quantity == "current":
        return value * (f_mva / t_mva) * (t_kv / f_kv)
    raise ValueError(f"unknown quantity {quantity!r}")


def branch_stamp(branch: Branch, n: int, i: int, j: int) -> np.ndarray:
    y = branch.series_admittance
    ysh = 0.5j * branch.b
    stamp = np.zeros((n, n), dtype=complex)
    stamp[i, i] = y + ysh
    stamp[j, j] = y + ysh
    stamp[i, j] = -y
    stamp[j, i] = -y
    return stamp


def check_connected(grid: GridModel, out_of_service: Iterable[str] = ()) -> None:
    off = set(out_of_service)
    ids = grid.bus_ids
    rows, cols = [], []
    for br in grid.branches:
        if br.in_service and br.name not in off:
            rows.append(ids.index(br.from_bus))
            cols.append(ids.index(br.to_bus))
    n = len(ids)
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        slack = [g.bus for g in grid.generators if g.kind == "slack"]
        main = labels[ids.index(slack[0])] if slack else np.bincount(labels).argmax()
        raise IslandingError(ids[k] for k in range(n) if labels[k] != main)


def load_admittances(grid: GridModel, load_voltages: Mapping[int, float] | None = None) -> dict[int, complex]:
    """Constant shunt admittance of every load bus, frozen at ``load_voltages``.

    Without voltages the nominal 1 pu is used, which is the constant-impedance
    interpretation of the nameplate powers.
    """
    out: dict[int, complex] = {}
    for ld in grid.loads:
        s = complex(ld.p_mw, ld.q_mvar) / grid.base_mva
        vm = 1.0 if load_voltages is None else load_voltages[ld.bus]
        out[ld.bus] = out.get(ld.bus, 0.0) + s.conjugate() / vm**2
    return out


def build_ybus(
    grid: GridModel,
    events: NetworkEvents | None = None,
    load_voltages: Mapping[int, float] | None = None,
    include_loads: bool = True,
) -> AdmittanceMatrix:
    """Bus admittance matrix for the topology active under ``events``.

    Loads become constant admittances (see :func:`load_admittances`), fixed
    shunts are added at nominal voltage and fault shunts on the diagonal.
    """
    events = events or NetworkEvents()
    for name in events.out_of_service:
        grid.branch(name)
    check_connected(grid, events.out_of_service)
    ids = grid.bus_ids
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        if not br.in_service or br.name in events.out_of_service:
            continue
        i, j = ids.index(br.from_bus), ids.index(br.to_bus)
        y = br.series_admittance
        ysh = 0.5j * br.b
        Y[i, i] += y + ysh
        Y[j, j] += y + ysh
        Y[i, j] -= y
        Y[j, i] -= y
    for sh in grid.shunts:
        Y[ids.index(sh.bus), ids.index(sh.bus)] += 1j * sh.q_mvar / grid.base_mva
    if include_loads:
        for bus, y in load_admittances(grid, load_voltages).items():
            Y[ids.index(bus), ids.index(bus)] += y
    for bus, y in events.fault_shunts.items():
        Y[grid.index(bus), grid.index(bus)] += y
    return AdmittanceMatrix(Y, tuple(ids))


def factorize(Y: AdmittanceMatrix):
    """Dense LU factors of ``Y``; raises on a singular matrix."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(Y.matrix, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < 1e-14 * max(1.0, np.max(np.abs(lu))):
        raise np.linalg.LinAlgError("admittance matrix is singular")
    return lu, piv


def solve_network(Y: AdmittanceMatrix, injected_currents: np.ndarray, lu=None) -> np.ndarray:
    """Bus voltages V with Y V = I."""
    lu = lu or factorize(Y)
    V = scipy.linalg.lu_solve(lu, np.asarray(injected_currents, dtype=complex))
    return V


def _ds_dv(Y: np.ndarray, V: np.ndarray):
    Ibus = Y @ V
    Vn = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(Vn)) + np.diag(np.conj(Ibus) * Vn)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
    return dS_dVm, dS_dVa


def _dc_angles(grid: GridModel, p: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # DC power-flow seed; a flat start can converge to a far root on
    # heavily loaded, all-PQ cases.
    ids = grid.bus_ids
    n = len(ids)
    B = np.zeros((n, n))
    for br in grid.branches:
        if br.in_service:
            i, j = ids.index(br.from_bus), ids.index(br.to_bus)
            b = 1.0 / br.x
            B[i, i] += b
            B[j, j] += b
            B[i, j] -= b
            B[j, i] -= b
    keep = np.setdiff1d(np.arange(n), ref)
    va = np.zeros(n)
    try:
        va[keep] = np.linalg.solve(B[np.ix_(keep, keep)], p[keep])
    except np.linalg.LinAlgError:
        pass
    return va


def newton_power_flow(
    grid: GridModel,
    generators: Iterable[Generator] | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow.

    ``generators`` overrides the bus specifications stored in the grid. Loads
    enter as constant power or as constant admittance according to
    ``grid.load_model``.
    """
    gens = tuple(grid.generators if generators is None else generators)
    if sum(g.kind == "slack" for g in gens) != 1:
        raise GridError("exactly one slack generator is required")
    ids = grid.bus_ids
    n = len(ids)
    Y = build_ybus(grid, include_loads=grid.load_model == "constant_impedance").matrix

    s_spec = np.zeros(n, dtype=complex)
    kind = np.full(n, "pq", dtype=object)
    vm = np.ones(n)
    for g in gens:
        k = ids.index(g.bus)
        if g.kind == "pq":
            s_spec[k] += complex(g.p_mw, g.q_mvar) / grid.base_mva
        else:
            if kind[k] != "pq":
                raise GridError(f"bus {g.bus} carries two voltage-controlling generators")
            kind[k] = g.kind
            vm[k] = g.v_pu
            s_spec[k] += g.p_mw / grid.base_mva
    if grid.load_model == "constant_power":
        for ld in grid.loads:
            s_spec[ids.index(ld.bus)] -= complex(ld.p_mw, ld.q_mvar) / grid.base_mva

    ref = np.flatnonzero(kind == "slack")
    pv = np.flatnonzero(kind == "pv")
    pq = np.flatnonzero(kind == "pq")
    pvpq = np.concatenate([pv, pq])
    p_net = s_spec.real.copy()
    if grid.load_model == "constant_impedance":
        for ld in grid.loads:
            p_net[ids.index(ld.bus)] -= ld.p_mw / grid.base_mva
    va = _dc_angles(grid, p_net, ref)

    def mismatch(V):
        dS = V * np.conj(Y @ V) - s_spec
        return np.concatenate([dS.real[pvpq], dS.imag[pq]])

    V = vm * np.exp(1j * va)
    F = mismatch(V)
    it = 0
    while np.max(np.abs(F), initial=0.0) > tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations", F)
        dS_dVm, dS_dVa = _ds_dv(Y, V)
        J = np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -F)
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        it += 1
        if not np.all(np.isfinite(F)):
            raise PowerFlowError("power flow diverged", F)

    # Generator injections: net bus injection plus local load, split so that
    # PQ generators keep their specification.
    s_bus = V * np.conj(Y @ V)
    if grid.load_model == "constant_power":
        for ld in grid.loads:
            s_bus[ids.index(ld.bus)] += complex(ld.p_mw, ld.q_mvar) / grid.base_mva
    p = np.zeros(len(gens))
    q = np.zeros(len(gens))
    for k, g in enumerate(gens):
        b = ids.index(g.bus)
        fixed = sum(
            complex(o.p_mw, o.q_mvar) / grid.base_mva for o in gens if o.bus == g.bus and o is not g and o.kind == "pq"
        )
        if g.kind == "pq":
            s = complex(g.p_mw, g.q_mvar) / grid.base_mva
        else:
            s = s_bus[b] - fixed
        p[k] = s.real * grid.base_mva
        q[k] = s.imag * grid.base_mva
    return PowerFlowSolution(
        bus_ids=tuple(ids),
        v=np.abs(V),
        angle=np.angle(V),
        gen_names=tuple(g.name for g in gens),
        gen_buses=tuple(g.bus for g in gens),
        p_mw=p,
        q_mvar=q,
        iterations=it,
        base_mva=grid.base_mva,
    )


def power_balance(grid: GridModel, pf: PowerFlowSolution) -> tuple[complex, complex, complex]:
    """(generation, load, losses) in pu of the system base at a power-flow point.

    Load includes fixed shunts and constant-impedance loads evaluated at the
    solved voltages; losses are computed branch by branch.
    """
    V = dict(zip(pf.bus_ids, pf.voltage))
    gen = complex(np.sum(pf.p_mw), np.sum(pf.q_mvar)) / grid.base_mva
    load = 0j
    ya = load_admittances(grid)
    for bus, y in ya.items():
        if grid.load_model == "constant_impedance":
            load += abs(V[bus]) ** 2 * np.conj(y)
    if grid.load_model == "constant_power":
        load += sum(complex(ld.p_mw, ld.q_mvar) for ld in grid.loads) / grid.base_mva
    for sh in grid.shunts:
        load += -1j * sh.q_mvar / grid.base_mva * abs(V[sh.bus]) ** 2
    losses = 0j
    for br in grid.branches:
        if not br.in_service:
            continue
        vi, vj = V[br.from_bus], V[br.to_bus]
        y = br.series_admittance
        sij = vi * np.conj((vi - vj) * y + 0.5j * br.b * vi)
        sji = vj * np.conj((vj - vi) * y + 0.5j * br.b * vj)
        losses += sij + sji
    return gen, load, losses


# -- grid file ---------------------------------------------------------------

_GRID_KEYS = {"name", "base_mva", "frequency_hz", "source", "load_model", "rescale",
              "buses", "branches", "loads", "shunts", "generators"}


def _check_keys(entry: Mapping, allowed: set, where: str) -> None:
    unknown = set(entry) - allowed
    if unknown:
        raise GridError(f"{where}: unknown keys {sorted(unknown)}")


def grid_from_dict(data: Mapping) -> GridModel:
    """Build a GridModel from the parsed grid file.

    ``rescale`` (optional) converts the branch data from an original voltage
    and frequency to the file's nominal ones: ``{mode: physical, from_kv,
    to_kv, from_hz}`` keeps the ohmic values, ``mode: per_unit`` (default)
    reuses the per-unit values unchanged.
    """
    _check_keys(data, _GRID_KEYS, "grid")
    rescale = data.get("rescale") or {}
    _check_keys(rescale, {"mode", "from_kv", "to_kv", "from_hz"}, "grid.rescale")
    mode = rescale.get("mode", "per_unit")
    if mode not in ("per_unit", "physical"):
        raise GridError(f"grid.rescale.mode: unknown mode {mode!r}")
    zf = bf = xf = 1.0
    if mode == "physical":
        ratio = (float(rescale["from_kv"]) / float(rescale["to_kv"])) ** 2
        fr = float(data["frequency_hz"]) / float(rescale.get("from_hz", data["frequency_hz"]))
        zf, xf, bf = ratio, ratio * fr, fr / ratio

    buses = []
    for k, b in enumerate(data["buses"]):
        _check_keys(b, {"id", "kv"}, f"buses[{k}]")
        buses.append(Bus(int(b["id"]), float(b["kv"])))
    branches = []
    for k, b in enumerate(data["branches"]):
        _check_keys(b, {"name", "from", "to", "r", "x", "b", "in_service"}, f"branches[{k}]")
        branches.append(Branch(
            str(b["name"]), int(b["from"]), int(b["to"]),
            float(b["r"]) * zf, float(b["x"]) * xf, float(b.get("b", 0.0)) * bf,
            bool(b.get("in_service", True)),
        ))
    loads = []
    for k, ld in enumerate(data.get("loads") or ()):
        _check_keys(ld, {"bus", "p_mw", "q_mvar"}, f"loads[{k}]")
        loads.append(Load(int(ld["bus"]), float(ld["p_mw"]), float(ld["q_mvar"])))
    shunts = []
    for k, sh in enumerate(data.get("shunts") or ()):
        _check_keys(sh, {"bus", "q_mvar"}, f"shunts[{k}]")
        shunts.append(Shunt(int(sh["bus"]), float(sh["q_mvar"])))
    gens = []
    for k, g in enumerate(data.get("generators") or ()):
        _check_keys(g, {"name", "bus", "kind", "p_mw", "q_mvar", "v_pu"}, f"generators[{k}]")
        gens.append(Generator(
            str(g["name"]), int(g["bus"]), str(g["kind"]),
            float(g.get("p_mw", 0.0)), float(g.get("q_mvar", 0.0)), float(g.get("v_pu", 1.0)),
        ))
    return GridModel(
        name=str(data.get("name", "grid")),
        base_mva=float(data["base_mva"]),
        frequency_hz=float(data["frequency_hz"]),
        buses=tuple(buses),
        branches=tuple(branches),
        loads=tuple(loads),
        shunts=tuple(shunts),
        generators=tuple(gens),
        load_model=str(data.get("load_model", "constant_impedance")),
        source=str(data.get("source", "")),
    )


def load_grid(path: str | Path) -> GridModel:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise GridError(f"{path}: {exc}") from exc
    try:
        return grid_from_dict(data)
    except (KeyError, TypeError) as exc:
        raise GridError(f"{path}: missing or malformed field {exc}") from exc


def bundled_grid_path() -> Path:
    return Path(__file__).parent / "data" / "kundur_4vsc.grid"


def kundur_4vsc() -> GridModel:
    return load_grid(bundled_grid_path())
