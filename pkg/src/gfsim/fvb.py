"""Fast voltage boosters: supplementary voltage set points for transient stability.

Two strategies are provided:

* ``fvb-l``: a local booster driven by the PCC voltage (sag detection with
  hysteresis) and the converter's own frequency deviation.
* ``fvb-wacs``: a wide-area booster driven by the frequency error with respect
  to the centre of inertia, through a deadband, low-pass, washout, gain and
  saturation, with an optional communication delay on the error signal.

All boosters are sampled once per integration step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numba
import numpy as np

STRATEGIES = ("none", "fvb-l", "fvb-wacs")


class FvbConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FvbLParams:
    v_a: float = 0.75
    v_b: float = 0.9
    w_thres: float = 1e-3
    dv_max: float = 0.15

    def __post_init__(self):
        if not 0 < self.v_a < self.v_b < 1:
            raise FvbConfigError("FVB-L thresholds need 0 < v_a < v_b < 1")
        if self.w_thres <= 0 or self.dv_max <= 0:
            raise FvbConfigError("FVB-L w_thres and dv_max must be positive")


@dataclass
class FvbLState:
    sag: bool = False     # gamma_1
    active: bool = False  # gamma


@dataclass(frozen=True)
class FvbWacsParams:
    k: float = 50.0
    t_f: float = 0.1
    t_w: float = 10.0
    dv_max: float = 0.15
    eps: float = 1e-3
    tau: float = 0.0

    def __post_init__(self):
        for name in ("k", "t_f", "t_w", "dv_max", "eps"):
            if not getattr(self, name) > 0:
                raise FvbConfigError(f"FVB-WACS {name} must be positive")
        if self.tau < 0:
            raise FvbConfigError("FVB-WACS delay must be non-negative")


@dataclass
class FvbWacsState:
    lp_y: float = 0.0
    lp_x: float = 0.0
    wo_y: float = 0.0
    wo_x: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.lp_y, self.lp_x, self.wo_y, self.wo_x])


@dataclass(frozen=True)
class FvbConfig:
    strategy: str = "none"
    fvb_l: FvbLParams = field(default_factory=FvbLParams)
    fvb_wacs: FvbWacsParams = field(default_factory=FvbWacsParams)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise FvbConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    def to_dict(self) -> dict:
        return asdict(self)


def delay_steps(tau: float, step: float) -> int:
    """Number of whole steps in ``tau``; rejects delays that are not multiples."""
    if tau < 0:
        raise FvbConfigError("delay must be non-negative")
    n = tau / step
    k = round(n)
    if abs(n - k) > 1e-6:
        raise FvbConfigError(f"delay {tau} s is not a multiple of the step {step} s")
    return int(k)


def coi_frequency(w, h) -> float:
    """Inertia-weighted mean frequency."""
    w = np.asarray(w, dtype=float)
    h = np.asarray(h, dtype=float)
    if w.shape != h.shape or w.size == 0:
        raise ValueError("frequency and inertia vectors must have the same non-zero length")
    if np.any(h <= 0):
        raise ValueError("inertia constants must be positive")
    return float(_coi(w, h))


@numba.njit(cache=True)
def _coi(w, h):
    num = 0.0
    den = 0.0
    for k in range(w.shape[0]):
        num += h[k] * w[k]
        den += h[k]
    return num / den


@numba.njit(cache=True)
def fvb_l_core(v_g, dw, sag, active, v_a, v_b, w_thres, dv_max):
    """One sample of the local booster; returns (dv, sag, active)."""
    if v_g <= v_a:
        sag = True
    elif v_g > v_b:
        sag = False
    over = dw >= w_thres
    if sag:
        active = True
    elif not over:
        active = False
    return (dv_max if active else 0.0), sag, active


def fvb_l_step(v_g: float, dw: float, state: FvbLState, params: FvbLParams) -> tuple[float, FvbLState]:
    dv, sag, active = fvb_l_core(v_g, dw, state.sag, state.active,
                                 params.v_a, params.v_b, params.w_thres, params.dv_max)
    return dv, FvbLState(bool(sag), bool(active))


@numba.njit(cache=True)
def deadband(u, eps):
    """Offset dead zone: zero inside +-eps, shifted by eps outside."""
    if u > eps:
        return u - eps
    if u < -eps:
        return u + eps
    return 0.0


@numba.njit(cache=True)
def lowpass_step(x, y_prev, x_prev, t, h):
    """Bilinear discretisation of 1/(1 + s t)."""
    a = (2.0 * t - h) / (2.0 * t + h)
    b = h / (2.0 * t + h)
    return a * y_prev + b * (x + x_prev)


@numba.njit(cache=True)
def washout_step(x, y_prev, x_prev, t, h):
    """Bilinear discretisation of s t/(1 + s t)."""
    a = (2.0 * t - h) / (2.0 * t + h)
    c = 2.0 * t / (2.0 * t + h)
    return a * y_prev + c * (x - x_prev)


@numba.njit(cache=True)
def fvb_wacs_core(u, st, k, t_f, t_w, dv_max, eps, h):
    """One sample of the wide-area booster.

    ``u`` is the (delayed) error w_coi - w_self; ``st`` holds
    [lp_y, lp_x, wo_y, wo_x] and is updated in place. A converter running
    faster than the COI gets a positive boost.
    """
    x = deadband(u, eps)
    lp = lowpass_step(x, st[0], st[1], t_f, h)
    st[0] = lp
    st[1] = x
    wo = washout_step(lp, st[2], st[3], t_w, h)
    st[2] = wo
    st[3] = lp
    out = -k * wo
    if out > dv_max:
        out = dv_max
    elif out < -dv_max:
        out = -dv_max
    return out


def fvb_wacs_step(w_self: float, w_coi: float, state: FvbWacsState, params: FvbWacsParams,
                  step: float) -> tuple[float, FvbWacsState]:
    st = state.as_array()
    dv = fvb_wacs_core(w_coi - w_self, st, params.k, params.t_f, params.t_w,
                       params.dv_max, params.eps, step)
    return dv, FvbWacsState(*(float(v) for v in st))


class DelayLine:
    """Fixed delay of a whole number of steps.

    Until the line has filled, the initial value is returned.
    """

    def __init__(self, tau: float, step: float, initial=0.0):
        self.n = delay_steps(tau, step)
        initial = np.asarray(initial, dtype=float)
        self.buffer = np.repeat(initial[None, ...], self.n + 1, axis=0)
        self.head = 0

    def push(self, sample):
        sample = np.asarray(sample, dtype=float)
        if self.n == 0:
            return sample
        self.buffer[self.head] = sample
        self.head = (self.head + 1) % (self.n + 1)
        # oldest slot is the next one to be overwritten
        return self.buffer[self.head].copy()


@numba.njit(cache=True)
def delay_push(buf, head, sample, out):
    """Ring-buffer delay used inside the engine loop; returns the new head.

    ``buf`` has ``n + 1`` rows for a delay of ``n`` steps.
    """
    rows = buf.shape[0]
    if rows == 1:
        out[:] = sample
        return 0
    buf[head, :] = sample
    head = (head + 1) % rows
    out[:] = buf[head, :]
    return head
