"""Grid-forming converter transient-stability simulator with fast voltage boosters."""
from .converter import VscParams
from .engine import Event, SimConfig, SimResult, build_system, simulate
from .fvb import FvbConfig, FvbLParams, FvbWacsParams
from .powergrid import GridModel, kundur_4vsc, load_grid, newton_power_flow
from .stability import FAULTS, FaultScenario, StudyConfig, cct_matrix, compute_cct, run_scenario

__version__ = "0.1.0"

__all__ = [
    "FAULTS", "Event", "FaultScenario", "FvbConfig", "FvbLParams", "FvbWacsParams", "GridModel",
    "SimConfig", "SimResult", "StudyConfig", "VscParams", "build_system", "cct_matrix",
    "compute_cct", "kundur_4vsc", "load_grid", "newton_power_flow", "run_scenario", "simulate",
]
