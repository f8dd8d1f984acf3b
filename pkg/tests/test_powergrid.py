import cmath

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfsim.powergrid import (
    DEFAULT_FAULT_ADMITTANCE,
    AdmittanceMatrix,
    Branch,
    Bus,
    Generator,
    GridError,
    GridModel,
    IslandingError,
    Load,
    NetworkEvents,
    PowerFlowError,
    branch_stamp,
    build_ybus,
    grid_from_dict,
    newton_power_flow,
    power_balance,
    rebase,
    solve_network,
)


def two_bus(r=0.0, x=0.1, b=0.0, load=None, model="constant_power"):
    return GridModel(
        name="two", base_mva=100.0, frequency_hz=50.0,
        buses=(Bus(1, 220.0), Bus(2, 220.0)),
        branches=(Branch("1-2", 1, 2, r, x, b),),
        loads=(Load(2, *load),) if load else (),
        generators=(Generator("G", 1, "slack", v_pu=1.0),),
        load_model=model,
    )


def test_single_branch_ybus():
    g = two_bus(x=0.1)
    y = 1 / 0.1j
    np.testing.assert_allclose(build_ybus(g).matrix, [[y, -y], [-y, y]])


def test_line_charging_on_diagonal():
    y0 = build_ybus(two_bus()).matrix
    y1 = build_ybus(two_bus(b=0.3)).matrix
    np.testing.assert_allclose(np.diag(y1 - y0), [0.15j, 0.15j])
    np.testing.assert_allclose(y1[0, 1], y0[0, 1])


def test_fault_shunt_at_bus7(grid):
    base = build_ybus(grid).matrix
    faulted = build_ybus(grid, NetworkEvents(fault_shunts={7: DEFAULT_FAULT_ADMITTANCE})).matrix
    k = grid.index(7)
    diff = faulted - base
    assert diff[k, k] == pytest.approx(1e4 - 1e4j)
    diff[k, k] = 0
    assert not diff.any()


def test_benchmark_ybus_symmetric_and_stamp_sum(grid):
    Y = build_ybus(grid, include_loads=False).matrix
    np.testing.assert_array_equal(Y, Y.T)
    ids = grid.bus_ids
    n = len(ids)
    acc = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        acc += branch_stamp(br, n, ids.index(br.from_bus), ids.index(br.to_bus))
    for sh in grid.shunts:
        acc[ids.index(sh.bus), ids.index(sh.bus)] += 1j * sh.q_mvar / grid.base_mva
    np.testing.assert_allclose(Y, acc, atol=1e-12)


def test_remove_and_readd_branch_is_bit_exact(grid):
    Y0 = build_ybus(grid).matrix
    off = grid.with_branch_status("7-8a", False)
    assert not np.array_equal(build_ybus(off).matrix, Y0)
    back = off.with_branch_status("7-8a", True)
    np.testing.assert_array_equal(build_ybus(back).matrix, Y0)


def test_islanding_names_isolated_buses(grid):
    with pytest.raises(IslandingError) as err:
        build_ybus(grid, NetworkEvents(out_of_service=frozenset({"7-8a", "7-8b"})))
    assert set(err.value.isolated) == {5, 6, 7}
    with pytest.raises(IslandingError):
        build_ybus(grid, NetworkEvents(out_of_service=frozenset({"5-6"})))


def test_unknown_branch_in_events(grid):
    with pytest.raises(GridError):
        build_ybus(grid, NetworkEvents(out_of_service=frozenset({"nope"})))


def test_solve_identity():
    Y = AdmittanceMatrix(np.eye(2, dtype=complex), (1, 2))
    np.testing.assert_allclose(solve_network(Y, [1, 0]), [1, 0])


def test_solve_two_bus_hand_case():
    # branch y = -j10 between the buses, source of 1 pu behind the same
    # admittance at bus 1 (Norton current y * 1.0), nothing at bus 2
    y = -10j
    Y = AdmittanceMatrix(np.array([[2 * y, -y], [-y, y]]), (1, 2))
    V = solve_network(Y, [y * 1.0, 0])
    np.testing.assert_allclose(V, [1.0, 1.0], atol=1e-12)


def test_singular_matrix_rejected():
    Y = AdmittanceMatrix(np.array([[1, -1], [-1, 1]], dtype=complex), (1, 2))
    with pytest.raises(np.linalg.LinAlgError):
        solve_network(Y, [1, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(0, 10_000))
def test_random_network_properties(n, seed):
    rng = np.random.default_rng(seed)
    buses = tuple(Bus(i, 220.0) for i in range(n))
    branches = [Branch(f"t{i}", i, i + 1, rng.uniform(0, .05), rng.uniform(.01, .3), rng.uniform(0, .2))
                for i in range(n - 1)]
    branches += [Branch(f"x{k}", int(a), int(b), .01, rng.uniform(.01, .3), .05)
                 for k, (a, b) in enumerate(rng.integers(0, n, size=(3, 2))) if a != b]
    g = GridModel("rand", 100.0, 50.0, buses, tuple(branches),
                  loads=(Load(n - 1, 50.0, 10.0),),
                  generators=(Generator("G", 0, "slack"),))
    Y = build_ybus(g).matrix
    np.testing.assert_array_equal(Y, Y.T)
    I = rng.normal(size=n) + 1j * rng.normal(size=n)
    V = solve_network(AdmittanceMatrix(Y, tuple(range(n))), I)
    assert np.max(np.abs(Y @ V - I)) < 1e-10
    for br in g.branches:
        Y2 = build_ybus(g.with_branch_status(br.name, False).with_branch_status(br.name, True)).matrix
        np.testing.assert_array_equal(Y2, Y)


def test_flat_profile_without_injections():
    g = two_bus()
    g = GridModel("flat", 100.0, 50.0, g.buses, g.branches,
                  generators=(Generator("G", 1, "slack", v_pu=1.02),))
    pf = newton_power_flow(g)
    np.testing.assert_allclose(pf.v, 1.02)
    np.testing.assert_allclose(pf.angle, 0.0, atol=1e-14)


def gauss_seidel_two_bus(s_load, x, iters=2000):
    y = 1 / (1j * x)
    V1, V2 = 1.0 + 0j, 1.0 + 0j
    s2 = -s_load
    for _ in range(iters):
        V2 = (np.conj(s2 / V2) + y * V1) / y
    return V2


def test_two_bus_newton_matches_gauss_seidel():
    pf = newton_power_flow(two_bus(x=0.1, load=(50.0, 0.0)))
    oracle = gauss_seidel_two_bus(0.5, 0.1)
    assert pf.bus_voltage(2) == pytest.approx(oracle, abs=1e-9)
    assert pf.injection("G").real == pytest.approx(50.0, abs=1e-6)


def test_power_flow_mismatch_and_balance(grid):
    pf = newton_power_flow(grid)
    Y = build_ybus(grid).matrix
    V = pf.voltage
    S = V * np.conj(Y @ V)
    inj = np.zeros(len(V), dtype=complex)
    for name, bus in zip(pf.gen_names, pf.gen_buses):
        inj[grid.index(bus)] += pf.injection(name) / grid.base_mva
    assert np.max(np.abs(S - inj)) < 1e-8
    gen, load, losses = power_balance(grid, pf)
    assert abs(gen - load - losses) < 1e-6


def test_slack_pinned(grid):
    pf = newton_power_flow(grid)
    k = grid.index(11)
    assert pf.v[k] == pytest.approx(0.99)
    assert pf.angle[k] == 0.0


def test_constant_power_loads_balance(grid):
    import dataclasses
    g = dataclasses.replace(grid, load_model="constant_power")
    pf = newton_power_flow(g)
    gen, load, losses = power_balance(g, pf)
    assert abs(gen - load - losses) < 1e-6


def test_non_convergence_reports_mismatch():
    g = two_bus(x=0.5, load=(500.0, 0.0))
    with pytest.raises(PowerFlowError) as err:
        newton_power_flow(g, max_iter=10)
    assert err.value.mismatch.size


@pytest.mark.parametrize("value,fb,tb,kind,expected", [
    (693.0 / 100, 100.0, 900.0, "power", 0.77),
    (0.15, (900.0, 300.0), (100.0, 300.0), "impedance", 0.016667),
    (0.3, (100.0, 220.0), (100.0, 220.0), "impedance", 0.3),
])
def test_rebase(value, fb, tb, kind, expected):
    assert rebase(value, fb, tb, kind) == pytest.approx(expected, abs=1e-6)


def test_rebase_roundtrip_and_zero_base():
    z = rebase(rebase(0.2, (900, 300), (100, 220)), (100, 220), (900, 300))
    assert z == pytest.approx(0.2)
    with pytest.raises(ValueError):
        rebase(1.0, 0.0, 100.0)


def test_grid_file_rejects_unknown_keys():
    data = {"name": "g", "base_mva": 100, "frequency_hz": 50, "buses": [{"id": 1, "kv": 220}],
            "branches": [], "colour": "red"}
    with pytest.raises(GridError):
        grid_from_dict(data)


def test_physical_rescale_changes_reactance():
    data = {"name": "g", "base_mva": 100, "frequency_hz": 50,
            "rescale": {"mode": "physical", "from_kv": 230, "to_kv": 220, "from_hz": 60},
            "buses": [{"id": 1, "kv": 220}, {"id": 2, "kv": 220}],
            "branches": [{"name": "a", "from": 1, "to": 2, "r": 0.01, "x": 0.1, "b": 0.2}]}
    br = grid_from_dict(data).branches[0]
    ratio = (230 / 220) ** 2
    assert br.r == pytest.approx(0.01 * ratio)
    assert br.x == pytest.approx(0.1 * ratio * 50 / 60)
    assert br.b == pytest.approx(0.2 * 50 / 60 / ratio)


def test_invalid_grid_models():
    with pytest.raises(GridError):
        GridModel("g", 100.0, 50.0, (Bus(1, 1.0), Bus(1, 1.0)), ())
    with pytest.raises(GridError):
        GridModel("g", 100.0, 50.0, (Bus(1, 1.0),), (Branch("a", 1, 2, 0, 0.1),))
    with pytest.raises(GridError):
        GridModel("g", 100.0, 50.0, (Bus(1, 1.0), Bus(2, 1.0)), (Branch("a", 1, 2, 0, 0),))


def test_omega0(grid):
    assert grid.omega0 == pytest.approx(2 * cmath.pi * 50)
