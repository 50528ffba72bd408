"""Per-tick, per-agent run record and its CSV form.

File layout: one header line with the column names below, then one
comma-separated record per (tick, agent) in tick order. Floats are written
with 9 significant digits; ``nan`` marks absent values (no measurement in
that tick).
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = (
    "t", "agent",
    "true_x", "true_y", "true_z",
    "est_x", "est_y", "est_z", "est_vx", "est_vy", "est_vz",
    "cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz",
    "meas_x", "meas_y", "meas_z",
    "roi_left", "roi_top", "roi_right", "roi_bottom",
    "attempted", "succeeded",
    "mav_x", "mav_y", "mav_z", "mav_yaw",
    "rep_x", "rep_y", "rep_z",
    "bias_x", "bias_y", "bias_z",
)
INT_COLUMNS = {"agent", "attempted", "succeeded"}
INDEX = {name: i for i, name in enumerate(COLUMNS)}


def _fmt(name: str, value: float) -> str:
    if name in INT_COLUMNS:
        return str(int(value))
    return f"{value:.9g}"


@dataclass
class RunLog:
    rows: list[tuple] = field(default_factory=list)
    _array: np.ndarray | None = field(default=None, repr=False)

    def append(self, row: tuple) -> None:
        self.rows.append(row)
        self._array = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def array(self) -> np.ndarray:
        if self._array is None:
            self._array = np.array(self.rows, dtype=float).reshape(-1, len(COLUMNS))
        return self._array

    def column(self, name: str, agent: int | None = None) -> np.ndarray:
        a = self.array
        col = a[:, INDEX[name]]
        return col if agent is None else col[a[:, INDEX["agent"]] == agent]

    def columns(self, names, agent: int | None = None) -> np.ndarray:
        a = self.array
        idx = [INDEX[n] for n in names]
        out = a[:, idx]
        return out if agent is None else out[a[:, INDEX["agent"]] == agent]

    def agents(self) -> list[int]:
        return sorted({int(x) for x in self.column("agent")})

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(n, v) for n, v in zip(COLUMNS, row)) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> RunLog:
        lines = text.strip().splitlines()
        header = tuple(lines[0].split(","))
        if header != COLUMNS:
            raise ValueError("unexpected RunLog header")
        rows = [tuple(float(x) for x in line.split(",")) for line in lines[1:]]
        return cls(rows)

    def write(self, path: str | Path) -> None:
        atomic_write(path, self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> RunLog:
        return cls.from_csv(Path(path).read_text())


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
