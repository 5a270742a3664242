"""Time grids, cadlag sample paths, ensembles and seeded random streams.

Paths live on a uniform grid ``t_k = k * dt``. The value held at ``t_k`` is
kept on the whole cell ``[t_k, t_{k+1})``, so every stored path is cadlag and
its left limit at ``t_k`` is approximated by ``values[k - 1]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import InvalidParameter, InvalidStopOrder, OutOfRange

# grid-time rounding slack, in units of dt
_GRID_EPS = 1e-9

# stream ids for the counter-based generator
STREAM_OUTER = 0
STREAM_BRANCH = 1


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidParameter(f"dt must be positive, got {self.dt}", field="dt")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParameter(f"n_steps must be a positive integer, got {self.n_steps}",
                                   field="n_steps")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, dt: float, horizon: float) -> "TimeGrid":
        if not horizon > 0:
            raise InvalidParameter(f"horizon must be positive, got {horizon}", field="horizon")
        if not dt > 0:
            raise InvalidParameter(f"dt must be positive, got {dt}", field="dt")
        return cls(dt, max(1, int(round(horizon / dt))))

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def time(self, k) -> np.ndarray:
        return np.asarray(k) * self.dt

    def index_floor(self, t: float) -> int:
        """Index of the grid cell containing ``t`` (robust to float noise at grid points)."""
        return int(math.floor(t / self.dt + _GRID_EPS))

    def steps_for(self, h: float) -> int:
        """Number of whole grid steps contained in a duration ``h``."""
        return int(math.floor(h / self.dt + _GRID_EPS))

    def extended(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.dt, n_steps)


@dataclass(frozen=True, eq=False)
class SamplePath:
    """One scalar trajectory on a grid; ``latent`` holds the driving base values if any."""

    grid: TimeGrid
    values: np.ndarray
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.shape[0] != self.grid.n_steps + 1:
            raise InvalidParameter(
                f"expected {self.grid.n_steps + 1} values, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return 1

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def __len__(self):
        return self.values.shape[0]

    def to_csv(self, path) -> None:
        write_path_csv(path, self)


@dataclass(frozen=True, eq=False)
class VectorPath:
    """A d-dimensional trajectory; all coordinates share one grid."""

    grid: TimeGrid
    values: np.ndarray  # (n_steps + 1, d)
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != self.grid.n_steps + 1:
            raise InvalidParameter(f"expected ({self.grid.n_steps + 1}, d) values, "
                                   f"got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def coordinate(self, i: int) -> SamplePath:
        return SamplePath(self.grid, self.values[:, i])

    def to_csv(self, path) -> None:
        write_path_csv(path, self)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Paths generated from one master seed; path i depends only on (seed, stream, i)."""

    grid: TimeGrid
    values: np.ndarray  # (n_paths, n_steps + 1) or (n_paths, n_steps + 1, d)
    master_seed: int
    stream_id: int = STREAM_OUTER
    latent: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        lat = None if self.latent is None else self.latent[i]
        if self.values.ndim == 2:
            return SamplePath(self.grid, self.values[i], lat)
        return VectorPath(self.grid, self.values[i], lat)

    def __iter__(self) -> Iterator:
        for i in range(len(self)):
            yield self[i]

    @property
    def paths(self) -> list:
        return list(self)


def path_rng(master_seed: int, stream_id: int, index: int, *extra: int) -> np.random.Generator:
    """Counter-based generator for one (seed, stream, index) triple.

    The key is a hash of the triple, so the draws of path ``index`` never depend
    on how many other paths are generated or in which order.
    """
    if master_seed is None:
        raise InvalidParameter("an explicit seed is required", field="seed")
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                spawn_key=(int(stream_id), int(index), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))


def cadlag_eval(path: SamplePath, t: float) -> float:
    """Value of the path at time ``t``: ``values[floor(t / dt)]``."""
    grid = path.grid
    if not (0.0 <= t <= grid.horizon * (1 + 1e-12)):
        raise OutOfRange(f"t={t} outside [0, {grid.horizon}]", t=t)
    k = min(grid.index_floor(t), grid.n_steps)
    return float(path.values[k])


def left_limit_at_stop(path: SamplePath, s_idx: int, t_idx: int) -> float:
    """Cadlag-adjusted value X_{T-} relative to the anchor S.

    Equal to ``values[t_idx - 1]`` when T > S and to ``values[s_idx]`` when T = S.
    """
    n = path.grid.n_steps
    if not (0 <= s_idx <= t_idx <= n):
        raise InvalidStopOrder(f"need 0 <= s_idx <= t_idx <= {n}, got {s_idx}, {t_idx}",
                               s_idx=s_idx, t_idx=t_idx)
    if t_idx == s_idx:
        return float(path.values[s_idx])
    return float(path.values[t_idx - 1])


def left_values(values: np.ndarray, idx: np.ndarray, s_idx, offset: int = 0) -> np.ndarray:
    """Vectorised ``left_limit_at_stop`` along the time axis (axis 1) of ``values``.

    ``values[:, 0]`` sits at absolute index ``offset``; ``idx`` and ``s_idx`` are
    absolute indices with one entry per row.
    """
    idx = np.asarray(idx)
    rel = idx - offset - (idx > np.asarray(s_idx))
    rows = np.arange(values.shape[0])
    return values[rows, rel]


def write_path_csv(path, p) -> None:
    times = p.grid.times
    vals = p.values if p.values.ndim == 2 else p.values[:, None]
    d = vals.shape[1]
    header = ["t", "x"] if d == 1 else ["t"] + [f"x{i + 1}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(times)):
            w.writerow([_fmt(times[k])] + [_fmt(v) for v in vals[k]])


def read_path_csv(path, dt: Optional[float] = None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(x) for x in r] for r in body])
    if dt is None:
        dt = data[1, 0] - data[0, 0]
    grid = TimeGrid(dt, data.shape[0] - 1)
    if len(header) == 2:
        return SamplePath(grid, data[:, 1])
    return VectorPath(grid, data[:, 1:])


def _fmt(x: float) -> str:
    # shortest string that round-trips exactly
    return repr(float(x))


def fmt_float(x: float) -> str:
    return _fmt(x)


def as_values(path, copy: bool = False) -> np.ndarray:
    if isinstance(path, (SamplePath, VectorPath, Ensemble)):
        v = path.values
    else:
        v = np.asarray(path, dtype=float)
    return v.copy() if copy else v


def stack_paths(paths: Sequence[SamplePath]) -> np.ndarray:
    return np.stack([p.values for p in paths])
