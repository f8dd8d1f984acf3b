"""SVG figures of simulation results (byte-reproducible)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import CHANNELS, SimResult

# derived groups on top of the raw channels
GROUPS = ("angle_difference", "frequency_coi")
PLOTTABLE = CHANNELS + ("w_coi",) + GROUPS

_LABELS = {
    "delta": ("virtual angle", "rad"),
    "dw": ("frequency deviation", "pu"),
    "v_g": ("PCC voltage", "pu"),
    "v_f": ("filter voltage", "pu"),
    "p_g": ("active power", "pu"),
    "q_g": ("reactive power", "pu"),
    "dv_ts": ("supplementary voltage set point", "pu"),
    "i_ref": ("current reference", "pu"),
    "i_s": ("converter current", "pu"),
    "limiting": ("current limiter active", "-"),
    "w_coi": ("COI frequency", "pu"),
    "angle_difference": ("angle difference", "deg"),
    "frequency_coi": ("frequency minus COI frequency", "pu"),
}


class PlotError(ValueError):
    pass


def _series(result: SimResult, channel: str, reference: int) -> tuple[np.ndarray, list[str]]:
    names = list(result.names)
    if channel == "angle_difference":
        d = result.channels["delta"]
        keep = [i for i in range(len(names)) if i != reference]
        data = np.degrees(d[:, keep] - d[:, [reference]])
        return data, [f"{names[i]} - {names[reference]}" for i in keep]
    if channel == "frequency_coi":
        w = 1.0 + result.channels["dw"]
        return w - result.w_coi[:, None], names
    if channel == "w_coi":
        return result.w_coi[:, None], ["COI"]
    return result.channels[channel], names


def emit_plots(result: SimResult, channels: Sequence[str], out_dir: str | Path,
               reference: int = 0, prefix: str = "") -> list[Path]:
    """Write one SVG per requested channel; returns the written paths."""
    for c in channels:
        if c not in PLOTTABLE:
            raise PlotError(f"unknown channel {c!r}; expected one of {PLOTTABLE}")
    if not channels:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "gfsim", "svg.fonttype": "path"}):
        for c in channels:
            data, labels = _series(result, c, reference)
            fig, ax = plt.subplots(figsize=(7, 3.5))
            for k, lab in enumerate(labels):
                ax.plot(result.time, data[:, k], lw=1.0, label=lab)
            name, unit = _LABELS[c]
            ax.set_xlabel("time (s)")
            ax.set_ylabel(f"{name} ({unit})")
            ax.grid(True, lw=0.3)
            ax.legend(fontsize=7, loc="best")
            fig.tight_layout()
            path = out / f"{prefix}{c}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
