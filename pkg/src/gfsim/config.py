"""Run configuration files.

A configuration is a YAML mapping. Every section is optional; missing keys
take the defaults reported by ``defaults_with_provenance``. Unknown keys are rejected with the
line they appear on.

    grid: bundled            # or a path to a .grid file
    scenario: {fault: fault1, strategy: none, clearing_s: 0.15, tau_s: 0.0}
    study: {t0_s: 1.0, horizon_s: 5.0, step_s: 1.0e-4, decimation: 10,
            integrator: rk4, anti_windup: true, fault_admittance: [1.0e4, -1.0e4]}
    converters:
      all: {d: 20.0}         # applied to every converter
      VSC3: {h: 4.175}       # per converter, applied last
    fvb_l: {v_a: 0.75, v_b: 0.9, w_thres: 0.001, dv_max: 0.15}
    fvb_wacs: {k: 50.0, t_f: 0.1, t_w: 10.0, dv_max: 0.15, eps: 0.001}
    cct: {t_max_s: 1.5, verify_steps: 2}
    output: out
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .converter import ConverterConfigError, VscParams
from .fvb import STRATEGIES, FvbConfig, FvbConfigError, FvbLParams, FvbWacsParams, delay_steps
from .powergrid import GridError, GridModel, kundur_4vsc, load_grid
from .stability import FAULTS, StudyConfig

BENCHMARK_INERTIA = {"VSC1": 4.5, "VSC2": 4.5, "VSC3": 4.175, "VSC4": 6.175}

_PUBLISHED = "published converter data"
_BOOSTER = "published booster settings"
_PROTOCOL = "published fault protocol"
_CHOICE = "artifact choice"

# (dotted key, provenance)
_PROVENANCE = {
    "converters.rating_mva": _PUBLISHED, "converters.ac_kv": _PUBLISHED,
    "converters.dc_kv": _PUBLISHED, "converters.r_f": _PUBLISHED, "converters.x_f": _PUBLISHED,
    "converters.c_f": _PUBLISHED, "converters.r_c": _PUBLISHED, "converters.x_c": _PUBLISHED,
    "converters.k_cp": _PUBLISHED, "converters.k_ci": _PUBLISHED, "converters.k_vp": _PUBLISHED,
    "converters.k_vi": _PUBLISHED, "converters.r_v": _PUBLISHED, "converters.t_vr": _PUBLISHED,
    "converters.h": _PUBLISHED + " (per converter, see converters.<name>.h)",
    "converters.d": _PUBLISHED, "converters.i_max": _PUBLISHED,
    "converters.m_max": _PUBLISHED + "; equals sqrt(3/2)*v_dc/(2*v_ac)",
    "converters.v_dc": _CHOICE + "; dc link held at 1 pu",
    "converters.vr_input": _CHOICE + "; virtual resistance acts on the grid-side current",
    **{f"converters.{n}.h": _PUBLISHED for n in BENCHMARK_INERTIA},
    "fvb_l.v_a": _BOOSTER, "fvb_l.v_b": _BOOSTER, "fvb_l.w_thres": _BOOSTER,
    "fvb_l.dv_max": _BOOSTER,
    "fvb_wacs.k": _BOOSTER, "fvb_wacs.t_f": _BOOSTER, "fvb_wacs.t_w": _BOOSTER,
    "fvb_wacs.dv_max": _BOOSTER, "fvb_wacs.eps": _BOOSTER,
    "scenario.fault": _PROTOCOL, "scenario.strategy": _CHOICE,
    "scenario.clearing_s": _PROTOCOL + " (150 ms clearing)",
    "scenario.tau_s": _CHOICE + "; no delay",
    "study.t0_s": _CHOICE + "; 1 s pre-fault window",
    "study.horizon_s": _CHOICE + "; 5 s after clearing",
    "study.step_s": _CHOICE, "study.decimation": _CHOICE, "study.integrator": _CHOICE,
    "study.anti_windup": _CHOICE + "; integrators frozen while saturated",
    "study.fault_admittance": _CHOICE + "; near-bolted fault",
    "cct.t_max_s": _CHOICE, "cct.verify_steps": _CHOICE,
    "grid": _CHOICE + "; line data from the Kundur two-area benchmark",
    "output": _CHOICE,
}


class ConfigError(ValueError):
    """Schema violation; ``field`` and ``line`` locate it when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = ""
        if field:
            where += f"{field}: "
        if line:
            where = f"line {line}: " + where
        super().__init__(where + message)


@dataclass(frozen=True)
class RunManifest:
    grid: str = "bundled"
    fault: str = "fault1"
    strategy: str = "none"
    clearing: float = 0.15
    tau: float = 0.0
    t0: float = 1.0
    horizon: float = 5.0
    step: float = 1e-4
    decimation: int = 10
    integrator: str = "rk4"
    anti_windup: bool = True
    fault_admittance: tuple[float, float] = (1e4, -1e4)
    converters: tuple[tuple[str, tuple[tuple[str, float | str], ...]], ...] = ()
    fvb_l: FvbLParams = field(default_factory=FvbLParams)
    fvb_wacs: FvbWacsParams = field(default_factory=FvbWacsParams)
    t_max: float = 1.5
    verify_steps: int = 2
    output: str | None = None

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "scenario": {"fault": self.fault, "strategy": self.strategy,
                         "clearing_s": self.clearing, "tau_s": self.tau},
            "study": {"t0_s": self.t0, "horizon_s": self.horizon, "step_s": self.step,
                      "decimation": self.decimation, "integrator": self.integrator,
                      "anti_windup": self.anti_windup,
                      "fault_admittance": list(self.fault_admittance)},
            "converters": {name: dict(vals) for name, vals in self.converters},
            "fvb_l": dataclasses.asdict(self.fvb_l),
            "fvb_wacs": {k: v for k, v in dataclasses.asdict(self.fvb_wacs).items() if k != "tau"},
            "cct": {"t_max_s": self.t_max, "verify_steps": self.verify_steps},
            "output": self.output,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def study(self) -> StudyConfig:
        return StudyConfig(t0=self.t0, horizon=self.horizon, step=self.step,
                           decimation=self.decimation, integrator=self.integrator,
                           anti_windup=self.anti_windup,
                           fault_admittance=complex(*self.fault_admittance),
                           fvb_l=self.fvb_l, fvb_wacs=self.fvb_wacs)

    def fvb(self) -> FvbConfig:
        return FvbConfig(self.strategy, self.fvb_l, dataclasses.replace(self.fvb_wacs, tau=self.tau))


@dataclass
class ResolvedConfig:
    manifest: RunManifest
    grid: GridModel
    params: dict[str, VscParams]
    fvb: FvbConfig


_SCHEMA = {
    "grid": str,
    "scenario": {"fault": str, "strategy": str, "clearing_s": float, "tau_s": float},
    "study": {"t0_s": float, "horizon_s": float, "step_s": float, "decimation": int,
              "integrator": str, "anti_windup": bool, "fault_admittance": list},
    "converters": dict,
    "fvb_l": {"v_a": float, "v_b": float, "w_thres": float, "dv_max": float},
    "fvb_wacs": {"k": float, "t_f": float, "t_w": float, "dv_max": float, "eps": float},
    "cct": {"t_max_s": float, "verify_steps": int},
    "output": (str, type(None)),
}
_VSC_FIELDS = {f.name for f in dataclasses.fields(VscParams)}


def _lines(node, prefix="", out=None) -> dict[str, int]:
    """Map dotted keys to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _lines(v, key, out)
    return out


def _check_type(value, kind, key, lines):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}", key,
                          lines.get(key))
    return float(value) if kind is float else value


def parse_config(source: str | Path | dict | None = None) -> ResolvedConfig:
    """Resolve a configuration file, YAML text or mapping into run objects."""
    lines: dict[str, int] = {}
    base_dir = Path.cwd()
    if source is None:
        data: Any = {}
    elif isinstance(source, dict):
        data = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                        and Path(source).is_file()):
            path = Path(source)
            text = path.read_text()
            base_dir = path.parent
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {exc}", line=mark.line + 1 if mark else None)
        lines = _lines(node) if node is not None else {}
        data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")

    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigError("unknown key", str(key), lines.get(str(key)))
        spec = _SCHEMA[key]
        if isinstance(spec, dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", key, lines.get(key))
            for sub, v in value.items():
                dotted = f"{key}.{sub}"
                if sub not in spec:
                    raise ConfigError("unknown key", dotted, lines.get(dotted))
                _check_type(v, spec[sub], dotted, lines)
        else:
            _check_type(value, spec, key, lines)

    sc = data.get("scenario") or {}
    st = data.get("study") or {}
    cc = data.get("cct") or {}
    conv = _parse_converters(data.get("converters") or {}, lines)

    def build(cls, section):
        try:
            return cls(**{k: float(v) for k, v in (data.get(section) or {}).items()})
        except (FvbConfigError, TypeError) as exc:
            raise ConfigError(str(exc), section, lines.get(section))

    fvb_l = build(FvbLParams, "fvb_l")
    fvb_wacs = build(FvbWacsParams, "fvb_wacs")
    fa = st.get("fault_admittance", [1e4, -1e4])
    if len(fa) != 2 or not all(isinstance(x, (int, float)) for x in fa):
        raise ConfigError("expected [real, imag]", "study.fault_admittance",
                          lines.get("study.fault_admittance"))
    m = RunManifest(
        grid=data.get("grid", "bundled"),
        fault=sc.get("fault", "fault1"), strategy=sc.get("strategy", "none"),
        clearing=float(sc.get("clearing_s", 0.15)), tau=float(sc.get("tau_s", 0.0)),
        t0=float(st.get("t0_s", 1.0)), horizon=float(st.get("horizon_s", 5.0)),
        step=float(st.get("step_s", 1e-4)), decimation=st.get("decimation", 10),
        integrator=st.get("integrator", "rk4"), anti_windup=st.get("anti_windup", True),
        fault_admittance=(float(fa[0]), float(fa[1])), converters=conv,
        fvb_l=fvb_l, fvb_wacs=fvb_wacs,
        t_max=float(cc.get("t_max_s", 1.5)), verify_steps=cc.get("verify_steps", 2),
        output=data.get("output"),
    )
    return resolve(m, lines, base_dir)


def _parse_converters(section: dict, lines) -> tuple:
    out = []
    for name, vals in section.items():
        key = f"converters.{name}"
        if not isinstance(vals, dict):
            raise ConfigError("expected a mapping of parameter overrides", key, lines.get(key))
        items = []
        for p, v in vals.items():
            if p not in _VSC_FIELDS:
                raise ConfigError("unknown converter parameter", f"{key}.{p}",
                                  lines.get(f"{key}.{p}"))
            kind = str if p == "vr_input" else float
            items.append((p, _check_type(v, kind, f"{key}.{p}", lines)))
        out.append((str(name), tuple(sorted(items))))
    return tuple(sorted(out, key=lambda t: (t[0] != "all", t[0])))


def resolve(m: RunManifest, lines: dict[str, int] | None = None,
            base_dir: Path | None = None) -> ResolvedConfig:
    """Check a manifest against the grid and build the run objects."""
    lines = lines or {}

    def fail(msg, key):
        raise ConfigError(msg, key, lines.get(key))

    if m.fault not in FAULTS:
        fail(f"unknown fault {m.fault!r}; expected one of {tuple(FAULTS)}", "scenario.fault")
    if m.strategy not in STRATEGIES:
        fail(f"unknown strategy {m.strategy!r}; expected one of {STRATEGIES}", "scenario.strategy")
    if m.clearing < 0:
        fail("must be non-negative", "scenario.clearing_s")
    if m.step <= 0:
        fail("must be positive", "study.step_s")
    if m.horizon <= 0 or m.t0 < 0:
        fail("t0 must be >= 0 and horizon > 0", "study")
    if m.decimation < 1:
        fail("must be >= 1", "study.decimation")
    if m.integrator not in ("rk4", "euler"):
        fail("expected rk4 or euler", "study.integrator")
    if m.t_max <= 0 or m.verify_steps < 0:
        fail("t_max_s must be positive and verify_steps >= 0", "cct")
    try:
        delay_steps(m.tau, m.step)
    except FvbConfigError as exc:
        fail(str(exc), "scenario.tau_s")

    try:
        if m.grid == "bundled":
            grid = kundur_4vsc()
        else:
            path = Path(m.grid)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            grid = load_grid(path)
    except (OSError, GridError) as exc:
        raise ConfigError(str(exc), "grid", lines.get("grid"))

    names = [g.name for g in grid.generators]
    overrides = dict(m.converters)
    for name in overrides:
        if name != "all" and name not in names:
            fail(f"no converter named {name!r} in the grid", f"converters.{name}")
    params = {}
    for name in names:
        kw: dict = {}
        if name in BENCHMARK_INERTIA:
            kw["h"] = BENCHMARK_INERTIA[name]
        kw.update(overrides.get("all", ()))
        kw.update(overrides.get(name, ()))
        try:
            params[name] = VscParams(**kw)
        except ConverterConfigError as exc:
            fail(str(exc), f"converters.{name}")
    return ResolvedConfig(m, grid, params, m.fvb())


def emit_config(m: RunManifest) -> str:
    """YAML text that parses back to ``m``."""
    return yaml.safe_dump(m.to_dict(), sort_keys=False, default_flow_style=False)


def defaults_with_provenance() -> list[tuple[str, Any, str]]:
    """Every default value with where it comes from."""
    m = RunManifest()
    flat: list[tuple[str, Any]] = []
    for sec, val in m.to_dict().items():
        if isinstance(val, dict) and sec != "converters":
            flat += [(f"{sec}.{k}", v) for k, v in val.items()]
        elif sec != "converters":
            flat.append((sec, val))
    vsc = VscParams()
    flat += [(f"converters.{f}", getattr(vsc, f)) for f in sorted(_VSC_FIELDS)]
    flat += [(f"converters.{n}.h", h) for n, h in BENCHMARK_INERTIA.items()]
    return [(k, v, _PROVENANCE.get(k, _CHOICE)) for k, v in flat]
