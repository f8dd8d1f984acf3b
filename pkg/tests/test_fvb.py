import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfsim.fvb import (
    DelayLine,
    FvbConfig,
    FvbConfigError,
    FvbLParams,
    FvbLState,
    FvbWacsParams,
    FvbWacsState,
    coi_frequency,
    deadband,
    delay_push,
    delay_steps,
    fvb_l_step,
    fvb_wacs_step,
    lowpass_step,
    washout_step,
)

H = (4.5, 4.5, 4.175, 6.175)
STEP = 1e-4


def test_coi_examples():
    assert coi_frequency([1.0] * 4, H) == 1.0
    assert coi_frequency([1.01, 1, 1, 1], H) == pytest.approx(19.395 / 19.35, abs=1e-7)
    assert coi_frequency([1.0023256], [3.0]) == pytest.approx(1.0023256)
    assert coi_frequency([1.01, 1, 1, 1], H) == pytest.approx(1.0023256, abs=1e-7)


def test_coi_errors():
    with pytest.raises(ValueError):
        coi_frequency([1.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        coi_frequency([1.0], [0.0])


def test_coi_convex_random():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        n = rng.integers(1, 8)
        w = rng.uniform(0.9, 1.1, size=n)
        h = rng.uniform(0.1, 10, size=n)
        c = coi_frequency(w, h)
        assert w.min() - 1e-15 <= c <= w.max() + 1e-15


def test_fvb_l_logic_trace():
    p = FvbLParams()
    dv, s = fvb_l_step(0.6, 0.0, FvbLState(), p)
    assert dv == 0.15 and s.active and s.sag
    dv, s = fvb_l_step(0.95, 0.005, s, p)
    assert dv == 0.15 and s.active and not s.sag
    dv, s = fvb_l_step(0.95, 0.0005, s, p)
    assert dv == 0.0 and not s.active


def test_fvb_l_hysteresis_band_holds_sag():
    p = FvbLParams()
    _, s = fvb_l_step(0.7, 0.0, FvbLState(), p)
    dv, s = fvb_l_step(0.85, -0.01, s, p)  # between v_a and v_b: latch holds
    assert dv == 0.15 and s.sag


@given(st.lists(st.tuples(st.floats(0.9001, 1.5), st.floats(-0.1, 0.000999)), max_size=50))
def test_fvb_l_never_self_activates(samples):
    s = FvbLState()
    for v, dw in samples:
        dv, s = fvb_l_step(v, dw, s, FvbLParams())
        assert dv == 0.0


@given(st.lists(st.tuples(st.floats(0.0, 1.5), st.floats(-0.1, 0.1)), max_size=50))
def test_fvb_l_output_set(samples):
    s = FvbLState()
    for v, dw in samples:
        dv, s = fvb_l_step(v, dw, s, FvbLParams())
        assert dv in (0.0, 0.15)


def test_fvb_l_params_validation():
    with pytest.raises(FvbConfigError):
        FvbLParams(v_a=0.95)
    FvbLParams(v_a=0.5)


@given(st.floats(-1, 1))
def test_deadband_odd_and_zero_inside(u):
    assert deadband(u, 1e-3) == -deadband(-u, 1e-3)
    if abs(u) <= 1e-3:
        assert deadband(u, 1e-3) == 0.0
    else:
        assert deadband(u, 1e-3) == pytest.approx(u - np.sign(u) * 1e-3)


def run_wacs(w_self, w_coi, seconds, params=FvbWacsParams()):
    st_ = FvbWacsState()
    out = []
    for k in range(int(round(seconds / STEP))):
        dv, st_ = fvb_wacs_step(w_self(k * STEP), w_coi(k * STEP), st_, params, STEP)
        out.append(dv)
    return np.array(out)


def test_wacs_zero_error_zero_output():
    out = run_wacs(lambda t: 1.0, lambda t: 1.0, 0.5)
    assert not out.any()


def test_wacs_positive_boost_when_faster_than_coi():
    out = run_wacs(lambda t: 1.01, lambda t: 1.0, 1.0)
    assert out[int(0.5 / STEP)] == pytest.approx(0.15)
    assert (out >= 0).all()


def test_wacs_sign_below_coi():
    out = run_wacs(lambda t: 0.99, lambda t: 1.0, 1.0)
    assert out[-1] == pytest.approx(-0.15)


def test_wacs_washout_rejects_sustained_offset():
    p = FvbWacsParams(k=5.0)
    out = run_wacs(lambda t: 1.002, lambda t: 1.0, 60.0, p)
    peak = out[int(0.5 / STEP)]
    # washout decays with T_W once the low-pass has settled
    assert out[-1] / peak == pytest.approx(np.exp(-59.5 / 10.0), rel=0.02)
    assert np.max(np.abs(out)) <= p.dv_max


def test_filter_dc_gains():
    y = x = 0.0
    for _ in range(200_000):
        y = lowpass_step(1.0, y, x, 0.1, STEP)
        x = 1.0
    assert y == pytest.approx(1.0, abs=1e-12)
    y, x = 0.0, 0.0
    first = washout_step(1.0, y, x, 10.0, STEP)
    assert first == pytest.approx(1.0, abs=1e-5)


def test_delay_steps_multiplicity():
    assert delay_steps(0.075, STEP) == 750
    assert delay_steps(0.1, STEP) == 1000
    with pytest.raises(FvbConfigError):
        delay_steps(0.0750005, STEP)
    with pytest.raises(FvbConfigError):
        delay_steps(-0.1, STEP)


def test_delay_line_identity_and_ramp():
    line = DelayLine(0.0, STEP)
    assert line.push(3.0) == 3.0
    line = DelayLine(0.1, STEP, initial=0.0)
    n = 1000
    for k in range(5000):
        t = k * STEP
        out = float(line.push(t))
        expected = 0.0 if k < n else (k - n) * STEP
        assert out == expected


def test_engine_delay_buffer_matches_reference():
    n = 50
    buf = np.zeros((n + 1, 2))
    head = 0
    out = np.empty(2)
    ref = DelayLine(n * STEP, STEP, initial=np.zeros(2))
    for k in range(300):
        sample = np.array([k, -k], dtype=float)
        head = delay_push(buf, head, sample, out)
        np.testing.assert_array_equal(out, ref.push(sample))


def test_zero_delay_buffer_is_identity():
    buf = np.zeros((1, 3))
    out = np.empty(3)
    s = np.array([0.1, 0.2, 0.3])
    delay_push(buf, 0, s, out)
    np.testing.assert_array_equal(out, s)


def test_config():
    with pytest.raises(FvbConfigError):
        FvbConfig("boost")
    assert FvbConfig("fvb-wacs").to_dict()["fvb_wacs"]["k"] == 50.0
