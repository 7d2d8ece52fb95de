"""
CSV and plot-data files. Every CSV starts with a `# scenario_hash:` comment
line followed by a header row; numbers are written with `%.17g` so reading a
file back reproduces the arrays bit for bit.
"""

import os
from typing import Dict, List, Sequence, Tuple

import numpy as np

from multiscale_soc.response import NumericalError, StageType


def write_csv(
    path: str,
    columns: Sequence[str],
    data: Sequence[np.ndarray],
    scenario_hash: str,
) -> str:
    table = np.column_stack([np.asarray(col, dtype=float).ravel() for col in data])
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# scenario_hash: {scenario_hash}\n")
        f.write(",".join(columns) + "\n")
        np.savetxt(f, table, fmt="%.17g", delimiter=",")
    return path


def read_csv(path: str) -> Tuple[List[str], Dict[str, np.ndarray]]:
    """Return (columns, column name -> array) of a file written by write_csv."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip() and not line.startswith("#")]
    except OSError as e:
        raise NumericalError(f"cannot read {path}: {e}", StageType.REPORT) from e
    if not lines:
        raise NumericalError(f"{path} has no header row", StageType.REPORT)
    columns = lines[0].strip().split(",")
    body = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if len(lines) > 1 else np.empty((0, len(columns)))
    return columns, {name: body[:, k] for k, name in enumerate(columns)}


def write_plot_data(
    path: str, columns: Sequence[str], data: Sequence[np.ndarray], title: str
) -> str:
    """Whitespace-separated data file readable by gnuplot's `plot ... using`."""
    table = np.column_stack([np.asarray(col, dtype=float).ravel() for col in data])
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {title}\n")
        f.write("# " + " ".join(columns) + "\n")
        np.savetxt(f, table, fmt="%.10g", delimiter=" ")
    return path
