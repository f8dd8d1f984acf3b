"""Average model of a grid-forming VSC with VSM synchronisation.

Every quantity here is per unit on the converter rating. The converter dq
frame has its d axis on the capacitor voltage and rotates at ``1 + dw`` pu;
its angle ``delta`` is measured from a common frame rotating at nominal speed.

The numerical kernels are numba-compiled scalar functions so that the engine
loop and the unit tests exercise the same code.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import asdict, dataclass, fields

import numba
import numpy as np

# state vector layout
X_DELTA = 0
X_DW = 1
X_ISD = 2
X_ISQ = 3
X_VFD = 4
X_VFQ = 5
X_IGD = 6
X_IGQ = 7
X_XVD = 8   # voltage PI integrators
X_XVQ = 9
X_XCD = 10  # current PI integrators
X_XCQ = 11
X_ZD = 12   # virtual-resistance low-pass states
X_ZQ = 13
N_STATE = 14

STATE_NAMES = (
    "delta", "dw", "i_sd", "i_sq", "v_fd", "v_fq", "i_gd", "i_gq",
    "xi_vd", "xi_vq", "xi_cd", "xi_cq", "z_vrd", "z_vrq",
)

# parameter vector layout
P_RF = 0
P_XF = 1
P_CF = 2
P_RC = 3
P_XC = 4
P_KCP = 5
P_KCI = 6
P_KVP = 7
P_KVI = 8
P_RV = 9
P_TVR = 10
P_H = 11
P_D = 12
P_IMAX = 13
P_MMAX = 14
P_VDC = 15
P_VRSRC = 16  # virtual-resistance input: 0 grid current, 1 converter current
N_PARAM = 17

VR_INPUTS = ("i_g", "i_s")

VF_REF_MIN = 0.0
VF_REF_MAX = 1.5


class ConverterConfigError(ValueError):
    pass


def max_modulation_index(v_dc_base_kv: float, v_ac_base_kv: float) -> float:
    """Largest modulation index magnitude in pu for pole-to-pole DC and
    phase-to-phase AC voltage bases."""
    if v_dc_base_kv <= 0 or v_ac_base_kv <= 0:
        raise ValueError("voltage bases must be positive")
    return math.sqrt(1.5) * v_dc_base_kv / (2.0 * v_ac_base_kv)


@dataclass(frozen=True)
class VscParams:
    """Converter data; defaults are the 900 MVA units of the benchmark."""

    rating_mva: float = 900.0
    ac_kv: float = 300.0
    dc_kv: float = 640.0
    r_f: float = 0.005
    x_f: float = 0.15
    c_f: float = 0.15
    r_c: float = 0.005
    x_c: float = 0.15
    k_cp: float = 0.73
    k_ci: float = 1.19
    k_vp: float = 0.52
    k_vi: float = 1.16
    r_v: float = 0.09
    t_vr: float = 0.0167
    h: float = 4.5
    d: float = 20.0
    i_max: float = 1.25
    m_max: float = 1.31
    v_dc: float = 1.0
    vr_input: str = "i_g"

    def __post_init__(self):
        if self.vr_input not in VR_INPUTS:
            raise ConverterConfigError(f"vr_input must be one of {VR_INPUTS}")
        for f in fields(self):
            if f.name != "vr_input" and not getattr(self, f.name) > 0:
                raise ConverterConfigError(f"{f.name} must be positive")
        m = max_modulation_index(self.dc_kv, self.ac_kv)
        if abs(m - self.m_max) > 0.01:
            raise ConverterConfigError(
                f"m_max={self.m_max} inconsistent with the voltage bases ({m:.4f})"
            )

    def as_array(self) -> np.ndarray:
        p = np.empty(N_PARAM)
        p[P_RF], p[P_XF], p[P_CF] = self.r_f, self.x_f, self.c_f
        p[P_RC], p[P_XC] = self.r_c, self.x_c
        p[P_KCP], p[P_KCI], p[P_KVP], p[P_KVI] = self.k_cp, self.k_ci, self.k_vp, self.k_vi
        p[P_RV], p[P_TVR] = self.r_v, self.t_vr
        p[P_H], p[P_D] = self.h, self.d
        p[P_IMAX], p[P_MMAX], p[P_VDC] = self.i_max, self.m_max, self.v_dc
        p[P_VRSRC] = VR_INPUTS.index(self.vr_input)
        return p

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VscState:
    """Named view of a converter state vector."""

    delta: float = 0.0
    dw: float = 0.0
    i_sd: float = 0.0
    i_sq: float = 0.0
    v_fd: float = 0.0
    v_fq: float = 0.0
    i_gd: float = 0.0
    i_gq: float = 0.0
    xi_vd: float = 0.0
    xi_vq: float = 0.0
    xi_cd: float = 0.0
    xi_cq: float = 0.0
    z_vrd: float = 0.0
    z_vrq: float = 0.0

    @classmethod
    def from_array(cls, x) -> "VscState":
        return cls(*(float(v) for v in x))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in STATE_NAMES])


@dataclass(frozen=True)
class VscSetpoints:
    p_g0: float
    v_f0: float
    dv_ts: float = 0.0

    @property
    def v_f_ref(self) -> float:
        return min(max(self.v_f0 + self.dv_ts, VF_REF_MIN), VF_REF_MAX)


# -- control and circuit blocks ---------------------------------------------

@numba.njit(cache=True)
def park(ab, theta):
    """Common-frame phasor -> (d, q) in a frame at angle ``theta``."""
    z = ab * cmath.exp(-1j * theta)
    return z.real, z.imag


@numba.njit(cache=True)
def inverse_park(d, q, theta):
    return complex(d, q) * cmath.exp(1j * theta)


@numba.njit(cache=True)
def vsm_derivative(p_g0, p_g, dw, h, d, w0):
    """Swing equation: returns (d dw/dt in pu/s, d delta/dt in rad/s)."""
    return (p_g0 - p_g - d * dw) / (2.0 * h), w0 * dw


@numba.njit(cache=True)
def current_limiter(i_d, i_q, i_max):
    """Circular saturation; returns (d, q, saturated)."""
    mag = math.hypot(i_d, i_q)
    if mag <= i_max:
        return i_d, i_q, False
    k = i_max / mag
    return i_d * k, i_q * k, True


@numba.njit(cache=True)
def modulation_limit(e_d, e_q, v_dc, m_max):
    """Clamp |e_m| to m_max * v_dc; returns (d, q, saturated)."""
    cap = m_max * v_dc
    mag = math.hypot(e_d, e_q)
    if mag <= cap:
        return e_d, e_q, False
    k = cap / mag
    return e_d * k, e_q * k, True


@numba.njit(cache=True)
def virtual_resistance(i_gd, i_gq, z_d, z_q, r_v, t_vr):
    """High-passed grid-current drop.

    ``z`` is the low-pass companion state of the high-pass s*T/(1+s*T).
    Returns (dv_d, dv_q, dz_d/dt, dz_q/dt).
    """
    hp_d = i_gd - z_d
    hp_q = i_gq - z_q
    return -r_v * hp_d, -r_v * hp_q, hp_d / t_vr, hp_q / t_vr


@numba.njit(cache=True)
def voltage_controller(v_ref_d, v_ref_q, v_fd, v_fq, i_gd, i_gq, w, xi_d, xi_q, k_vp, c_f):
    """PI on the capacitor voltage with grid-current and capacitor feedforward.

    Returns the unlimited converter-current reference (d, q). The integrator
    derivatives are ``k_vi * (v_ref - v_f)``, applied by the caller.
    """
    e_d = v_ref_d - v_fd
    e_q = v_ref_q - v_fq
    i_d = k_vp * e_d + xi_d + i_gd - w * c_f * v_fq
    i_q = k_vp * e_q + xi_q + i_gq + w * c_f * v_fd
    return i_d, i_q


@numba.njit(cache=True)
def current_controller(i_ref_d, i_ref_q, i_sd, i_sq, v_fd, v_fq, w, xi_d, xi_q, k_cp, x_f):
    """PI on the converter current with voltage feedforward and decoupling."""
    e_d = i_ref_d - i_sd
    e_q = i_ref_q - i_sq
    em_d = k_cp * e_d + xi_d + v_fd - w * x_f * i_sq
    em_q = k_cp * e_q + xi_q + v_fq + w * x_f * i_sd
    return em_d, em_q


@numba.njit(cache=True)
def measure_power(v_d, v_q, i_d, i_q):
    """(p, q) with q > 0 for capacitive injection, i.e. S = V conj(I)."""
    return v_d * i_d + v_q * i_q, v_q * i_d - v_d * i_q


@numba.njit(cache=True)
def filter_derivatives(i_sd, i_sq, v_fd, v_fq, i_gd, i_gq, em_d, em_q, v_gd, v_gq, w, w0,
                       r_f, x_f, c_f, r_c, x_c):
    """LC filter and transformer in the rotating frame.

    Returns d/dt of (i_sd, i_sq, v_fd, v_fq, i_gd, i_gq) in pu/s.
    """
    dis_d = w0 / x_f * (em_d - v_fd - r_f * i_sd + w * x_f * i_sq)
    dis_q = w0 / x_f * (em_q - v_fq - r_f * i_sq - w * x_f * i_sd)
    dvf_d = w0 / c_f * (i_sd - i_gd + w * c_f * v_fq)
    dvf_q = w0 / c_f * (i_sq - i_gq - w * c_f * v_fd)
    dig_d = w0 / x_c * (v_fd - v_gd - r_c * i_gd + w * x_c * i_gq)
    dig_q = w0 / x_c * (v_fq - v_gq - r_c * i_gq - w * x_c * i_gd)
    return dis_d, dis_q, dvf_d, dvf_q, dig_d, dig_q


@numba.njit(cache=True)
def _vr_signal(x, p):
    if p[P_VRSRC] > 0.5:
        return x[X_ISD], x[X_ISQ]
    return x[X_IGD], x[X_IGQ]


@numba.njit(cache=True)
def control_outputs(x, p, v_f_ref):
    """Limited current reference and modulated voltage for state ``x``.

    Returns (i_ref_d, i_ref_q, current_saturated, em_d, em_q, modulation_saturated).
    """
    w = 1.0 + x[X_DW]
    s_d, s_q = _vr_signal(x, p)
    dvr_d, dvr_q, _, _ = virtual_resistance(s_d, s_q, x[X_ZD], x[X_ZQ], p[P_RV], p[P_TVR])
    i_d, i_q = voltage_controller(
        v_f_ref + dvr_d, dvr_q, x[X_VFD], x[X_VFQ], x[X_IGD], x[X_IGQ], w,
        x[X_XVD], x[X_XVQ], p[P_KVP], p[P_CF],
    )
    i_d, i_q, isat = current_limiter(i_d, i_q, p[P_IMAX])
    em_d, em_q = current_controller(
        i_d, i_q, x[X_ISD], x[X_ISQ], x[X_VFD], x[X_VFQ], w,
        x[X_XCD], x[X_XCQ], p[P_KCP], p[P_XF],
    )
    em_d, em_q, msat = modulation_limit(em_d, em_q, p[P_VDC], p[P_MMAX])
    return i_d, i_q, isat, em_d, em_q, msat


@numba.njit(cache=True)
def converter_rhs(x, p, v_gd, v_gq, p_g0, v_f_ref, freeze_v, freeze_c, w0, dx):
    """Time derivative of one converter's state, written into ``dx``.

    ``v_g`` is the PCC voltage in the converter frame. ``freeze_v`` and
    ``freeze_c`` hold the voltage and current PI integrators (anti-windup).
    """
    w = 1.0 + x[X_DW]
    s_d, s_q = _vr_signal(x, p)
    dvr_d, dvr_q, dz_d, dz_q = virtual_resistance(s_d, s_q, x[X_ZD], x[X_ZQ], p[P_RV], p[P_TVR])
    v_ref_d = v_f_ref + dvr_d
    v_ref_q = dvr_q
    i_d, i_q = voltage_controller(
        v_ref_d, v_ref_q, x[X_VFD], x[X_VFQ], x[X_IGD], x[X_IGQ], w,
        x[X_XVD], x[X_XVQ], p[P_KVP], p[P_CF],
    )
    i_d, i_q, _ = current_limiter(i_d, i_q, p[P_IMAX])
    em_d, em_q = current_controller(
        i_d, i_q, x[X_ISD], x[X_ISQ], x[X_VFD], x[X_VFQ], w,
        x[X_XCD], x[X_XCQ], p[P_KCP], p[P_XF],
    )
    em_d, em_q, _ = modulation_limit(em_d, em_q, p[P_VDC], p[P_MMAX])

    p_g, _ = measure_power(v_gd, v_gq, x[X_IGD], x[X_IGQ])
    ddw, ddelta = vsm_derivative(p_g0, p_g, x[X_DW], p[P_H], p[P_D], w0)
    dx[X_DELTA] = ddelta
    dx[X_DW] = ddw
    f = filter_derivatives(
        x[X_ISD], x[X_ISQ], x[X_VFD], x[X_VFQ], x[X_IGD], x[X_IGQ], em_d, em_q,
        v_gd, v_gq, w, w0, p[P_RF], p[P_XF], p[P_CF], p[P_RC], p[P_XC],
    )
    dx[X_ISD] = f[0]
    dx[X_ISQ] = f[1]
    dx[X_VFD] = f[2]
    dx[X_VFQ] = f[3]
    dx[X_IGD] = f[4]
    dx[X_IGQ] = f[5]
    if freeze_v:
        dx[X_XVD] = 0.0
        dx[X_XVQ] = 0.0
    else:
        dx[X_XVD] = p[P_KVI] * (v_ref_d - x[X_VFD])
        dx[X_XVQ] = p[P_KVI] * (v_ref_q - x[X_VFQ])
    if freeze_c:
        dx[X_XCD] = 0.0
        dx[X_XCQ] = 0.0
    else:
        dx[X_XCD] = p[P_KCI] * (i_d - x[X_ISD])
        dx[X_XCQ] = p[P_KCI] * (i_q - x[X_ISQ])
    dx[X_ZD] = dz_d
    dx[X_ZQ] = dz_q


def init_from_powerflow(v_g: complex, s_g: complex, params: VscParams) -> tuple[np.ndarray, VscSetpoints]:
    """Back-solve the filter circuit and controllers at a power-flow point.

    ``v_g`` is the PCC voltage phasor (common frame) and ``s_g`` the injected
    complex power, both per unit on the converter rating.
    """
    z_c = complex(params.r_c, params.x_c)
    z_f = complex(params.r_f, params.x_f)
    i_g = (s_g / v_g).conjugate()
    v_f = v_g + z_c * i_g
    i_s = i_g + 1j * params.c_f * v_f
    e_m = v_f + z_f * i_s
    if abs(e_m) > params.m_max * params.v_dc:
        raise ConverterConfigError(
            f"operating point needs |e_m|={abs(e_m):.4f} pu above the modulation limit"
        )
    if abs(i_s) > params.i_max:
        raise ConverterConfigError(f"operating point needs |i_s|={abs(i_s):.4f} pu above i_max")
    delta = cmath.phase(v_f)
    rot = cmath.exp(-1j * delta)
    i_g, v_f, i_s, v_g = i_g * rot, v_f * rot, i_s * rot, v_g * rot
    x = np.zeros(N_STATE)
    x[X_DELTA] = delta
    x[X_ISD], x[X_ISQ] = i_s.real, i_s.imag
    x[X_VFD], x[X_VFQ] = v_f.real, 0.0
    x[X_IGD], x[X_IGQ] = i_g.real, i_g.imag
    # voltage-loop feedforward already yields i_s, the current loop needs the
    # resistive drop
    x[X_XCD], x[X_XCQ] = params.r_f * i_s.real, params.r_f * i_s.imag
    vr = i_s if params.vr_input == "i_s" else i_g
    x[X_ZD], x[X_ZQ] = vr.real, vr.imag
    p_g, _ = measure_power(v_g.real, v_g.imag, i_g.real, i_g.imag)
    return x, VscSetpoints(p_g0=p_g, v_f0=v_f.real)
