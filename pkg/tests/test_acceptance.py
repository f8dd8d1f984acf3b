"""Acceptance criteria 1-7 on the bundled benchmark.

Each test prints one ``PASS``/``FAIL criterion N`` line (visible with -v or
-s) and then asserts the criterion at its stated tolerance.
"""
import json
import math

import numpy as np
import pytest

from gfsim import converter as cv
from gfsim.engine import SimConfig, build_system, integrate_ode, simulate
from gfsim.fvb import DelayLine, coi_frequency, deadband, washout_step
from gfsim.powergrid import newton_power_flow
from gfsim.stability import (
    FAULTS,
    TABLE_COLUMNS,
    FaultScenario,
    StudyConfig,
    cct_matrix,
    detect_loss_of_sync,
    run_scenario,
)

from conftest import benchmark_params

# published operating point and clearing-time table (MW, MVAr, ms)
REF_P_SLACK = 642.6
REF_Q = {"VSC1": 0.0, "VSC2": 90.0, "VSC3": -69.93, "VSC4": 180.0}
REF_CCT = {
    "fault1": (130, 250, 250, 270, 270, 260),
    "fault2": (270, 310, 310, 360, 340, 320),
    "fault3": (220, 220, 220, 230, 230, 230),
    "fault4": (420, 400, 420, 880, 870, 890),
}
BASE, L75, L50, W0, W50, W100 = (c.label for c in TABLE_COLUMNS)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def matrix(grid):
    return cct_matrix(grid, benchmark_params())


def ms(report, fault, column):
    c = report.cell(fault, column)
    assert c.error is None, c.error
    return None if c.cct is None else round(c.cct * 1000)


def test_criterion_1_block_exactness(verdict):
    checks = {}
    m = cv.max_modulation_index(640.0, 300.0)
    checks["modulation index"] = abs(m - 1.31) <= 0.005
    c = coi_frequency([1.01, 1, 1, 1], [4.5, 4.5, 4.175, 6.175])
    checks["coi example"] = abs(c - 1.0023256) <= 1e-7
    checks["limiter inside"] = cv.current_limiter(0.3, -0.2, 1.25)[:2] == (0.3, -0.2)
    checks["limiter radial"] = cv.current_limiter(1.5, 0.0, 1.25)[:2] == (1.25, 0.0)
    d, q = cv.current_limiter(1.2, 1.2, 1.25)[:2]
    checks["limiter diagonal"] = abs(d - 0.88388) < 5e-6 and d == q
    checks["deadband"] = (deadband(5e-4, 1e-3) == 0.0
                          and deadband(3e-3, 1e-3) == pytest.approx(2e-3, abs=1e-15)
                          and deadband(-3e-3, 1e-3) == -deadband(3e-3, 1e-3))
    y = x = 0.0
    for _ in range(int(100.0 / 1e-3)):
        y = washout_step(1.0, y, x, 10.0, 1e-3)
        x = 1.0
    checks["washout dc rejection"] = abs(y) < 1e-4
    line = DelayLine(0.1, 1e-4, initial=0.0)
    exact = True
    for k in range(3000):
        out = float(line.push(k * 1e-4))
        exact &= out == (0.0 if k < 1000 else (k - 1000) * 1e-4)
    checks["delay ramp"] = exact
    checks["delay identity"] = DelayLine(0.0, 1e-4).push(0.37) == 0.37
    bad = [k for k, ok in checks.items() if not ok]
    assert verdict(1, not bad, f"m_max={m:.4f}, coi={c:.7f}, failed={bad or 'none'}")


def test_criterion_2_equilibrium_hold(verdict, system):
    r = simulate(system, SimConfig(t_end=10.0, decimation=10))
    drift = max(float(np.max(np.abs(v - v[0]))) for k, v in r.channels.items() if k != "delta")
    drift = max(drift, float(np.max(np.abs(r.w_coi - r.w_coi[0]))))
    dang = math.degrees(float(np.max(np.abs(r.channels["delta"] - r.channels["delta"][0]))))
    ok = r.status == "ok" and drift <= 1e-3 and dang <= 0.1
    assert verdict(2, ok, f"max channel drift {drift:.2e} pu, angle drift {dang:.2e} deg over 10 s")


def test_criterion_3_power_flow_anchor(verdict, grid):
    pf = newton_power_flow(grid)
    p3 = float(pf.p_mw[pf.gen_names.index("VSC3")])
    q_err = {n: float(pf.q_mvar[pf.gen_names.index(n)]) - q for n, q in REF_Q.items()}
    p_ok = abs(p3 - REF_P_SLACK) <= 0.05 * REF_P_SLACK
    q_ok = all(abs(e) <= 30.0 for e in q_err.values())
    detail = (f"P_VSC3={p3:.1f} MW ({'ok' if p_ok else 'out'} of +-5%), Q errors "
              + ", ".join(f"{n} {e:+.1f}" for n, e in q_err.items()) + " MVAr (limit +-30)")
    assert verdict(3, p_ok and q_ok, detail)


def test_criterion_4_headline_fault1(verdict, system):
    stable = {}
    for strategy in ("none", "fvb-l", "fvb-wacs"):
        r = run_scenario(FaultScenario(FAULTS["fault1"], strategy, 0.0, 0.15), system)
        stable[strategy] = detect_loss_of_sync(r).stable
    ok = not stable["none"] and stable["fvb-l"] and stable["fvb-wacs"]
    detail = ", ".join(f"{s}={'stable' if v else 'LOS'}" for s, v in stable.items())
    assert verdict(4, ok, f"Fault I cleared at 150 ms: {detail} (expected none=LOS)")


def test_criterion_5_cct_orderings(verdict, matrix):
    lines = []
    for f, refs in REF_CCT.items():
        for col, ref in zip(matrix.columns, refs):
            got = ms(matrix, f, col)
            band = got is not None and abs(got - ref) <= 0.4 * ref
            lines.append(f"  {f:<7}{col:<20}{'-' if got is None else got:>6}{ref:>6}"
                         f"  {'in' if band else 'outside'} +-40% band")
    I = {c: ms(matrix, "fault1", c) for c in matrix.columns}
    II = {c: ms(matrix, "fault2", c) for c in matrix.columns}
    IV = {c: ms(matrix, "fault4", c) for c in matrix.columns}
    orderings = {
        "I: base < fvb-l <= fvb-wacs": I[BASE] < I[L75] <= I[W0],
        "II: base < fvb-l < fvb-wacs": II[BASE] < II[L75] < II[W0],
        "IV: fvb-wacs >= 1.5 base": IV[W0] >= 1.5 * IV[BASE],
        "IV: fvb-l v_a=0.5 >= base": IV[L50] >= IV[BASE],
    }
    bad = [k for k, ok in orderings.items() if not ok]
    detail = f"orderings failed={bad or 'none'}; computed vs reference (ms):\n" + "\n".join(lines)
    assert verdict(5, not bad, detail)


def test_criterion_6_latency_robustness(verdict, matrix):
    spread = {f: abs(ms(matrix, f, W100) - ms(matrix, f, W0)) for f in ("fault1", "fault2", "fault3")}
    ok = all(s <= 30 for s in spread.values())
    assert verdict(6, ok, "CCT(100 ms) - CCT(0 ms) spread: "
                   + ", ".join(f"{f} {s} ms" for f, s in spread.items()) + " (limit 30 ms)")


def test_criterion_7_property_suites(verdict, grid, matrix):
    checks = {}
    system = build_system(grid, benchmark_params())
    i_max = system.param_array[:, cv.P_IMAX]
    worst = 0.0
    for key in FAULTS:
        for strategy in ("none", "fvb-l", "fvb-wacs"):
            r = run_scenario(FaultScenario(FAULTS[key], strategy, 0.0, 0.15), system,
                             StudyConfig(decimation=1))
            worst = max(worst, float(np.max(r.channels["i_ref"] - i_max)))
    checks["limiter bound"] = worst <= 1e-12

    rng = np.random.default_rng(1)
    z = rng.normal(size=2000) + 1j * rng.normal(size=2000)
    th = rng.uniform(-20, 20, size=2000)
    err = max(abs(cv.inverse_park(*cv.park(a, t), t) - a) for a, t in zip(z, th))
    checks["park round trip"] = err <= 1e-12

    errs = [abs(integrate_ode(lambda t, y: -y, [1.0], 1.0, h)[0] - math.exp(-1)) for h in (0.1, 0.05, 0.025)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    checks["rk4 order 4"] = all(abs(o - 4.0) < 0.1 for o in orders)

    excursion = 0.0
    for _ in range(10_000):
        w = rng.uniform(0.9, 1.1, size=4)
        h = rng.uniform(0.1, 10.0, size=4)
        c = coi_frequency(w, h)
        excursion = max(excursion, w.min() - c, c - w.max())
    checks["coi convexity"] = excursion <= 0.0

    again = cct_matrix(grid, benchmark_params())
    a = json.dumps(matrix.to_dict(), sort_keys=True)
    b = json.dumps(again.to_dict(), sort_keys=True)
    checks["matrix determinism"] = a.encode() == b.encode()

    bad = [k for k, ok in checks.items() if not ok]
    detail = (f"limiter margin {worst:.1e}, park err {err:.1e}, rk4 orders "
              f"{orders[0]:.2f}/{orders[1]:.2f}, failed={bad or 'none'}")
    assert verdict(7, not bad, detail)
