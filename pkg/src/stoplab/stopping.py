"""Stopping rules and their realisation on grid paths.

A rule is realised on a *window* of values whose first column sits at the
conditioning index ``s_idx``; the result is an absolute grid index per row
together with a status code:

* ``HIT``  - the defining event happened inside the window,
* ``CAP``  - the rule's own finite cap fired,
* ``OPEN`` - the window ran out before the rule resolved (the caller either
  extends the window or, at the end of the grid, reports the stop as capped).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import InvalidParameter, InvalidRule, NonPositiveRate, OutOfRange, PartitionViolation
from .paths import SamplePath, TimeGrid, as_values

HIT, CAP, OPEN = 0, 1, 2

DEFAULT_CAP = 1.0


@dataclass(frozen=True)
class RealizedStop:
    index: np.ndarray
    capped: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "index", np.asarray(self.index, dtype=np.int64))
        object.__setattr__(self, "capped", np.asarray(self.capped, dtype=bool))

    def __len__(self):
        return self.index.size

    def to_csv(self, path) -> None:
        idx = np.atleast_1d(self.index)
        cap = np.atleast_1d(self.capped)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_index", "stop_index", "capped"])
            for i in range(idx.size):
                w.writerow([i, int(idx[i]), int(cap[i])])


class StoppingRule:
    """Base class; subclasses implement ``_realize`` on a value window."""

    def _realize(self, values: np.ndarray, s_idx: int, grid: TimeGrid,
                 prefix: Optional[np.ndarray]):
        raise NotImplementedError

    def lookahead(self, grid: TimeGrid, s_idx: int) -> Optional[int]:
        """Steps after ``s_idx`` that always suffice to resolve the rule (None: unbounded)."""
        return None

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class AtTime(StoppingRule):
    t: float

    def __post_init__(self):
        if not self.t >= 0:
            raise InvalidRule(f"AtTime needs t >= 0, got {self.t}")

    def lookahead(self, grid, s_idx):
        return max(0, grid.index_floor(self.t) - s_idx)

    def _realize(self, values, s_idx, grid, prefix):
        target = max(grid.index_floor(self.t), s_idx)
        return _fixed(values, s_idx, target)

    def describe(self):
        return {"kind": "at_time", "t": self.t}


@dataclass(frozen=True)
class OffsetFromS(StoppingRule):
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidRule(f"OffsetFromS needs h > 0, got {self.h}")

    def lookahead(self, grid, s_idx):
        return grid.steps_for(self.h)

    def _realize(self, values, s_idx, grid, prefix):
        return _fixed(values, s_idx, s_idx + grid.steps_for(self.h))

    def describe(self):
        return {"kind": "offset", "h": self.h}


def _fixed(values, s_idx, target):
    n = values.shape[1] - 1
    b = values.shape[0]
    if target <= s_idx + n:
        return np.full(b, target, dtype=np.int64), np.full(b, HIT, dtype=np.int8)
    return np.full(b, s_idx + n, dtype=np.int64), np.full(b, OPEN, dtype=np.int8)


@dataclass(frozen=True)
class FirstExit(StoppingRule):
    """First approach beyond S to ``{x : |x - X_S| >= radius}``, capped at S + cap.

    ``radius`` may be a callable of the prefix (rows, s_idx + 1) returning a
    positive radius per row, i.e. a radius read off the path up to S.
    """

    radius: Union[float, Callable]
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if not callable(self.radius) and not self.radius > 0:
            raise InvalidRule(f"FirstExit needs radius > 0, got {self.radius}")
        if not (self.cap > 0 and np.isfinite(self.cap)):
            raise InvalidRule(f"FirstExit needs a finite positive cap, got {self.cap}")

    def lookahead(self, grid, s_idx):
        return grid.steps_for(self.cap)

    def _radius(self, prefix, rows):
        if callable(self.radius):
            r = np.asarray(self.radius(prefix), dtype=float).reshape(-1)
            if np.any(~(r > 0)):
                raise InvalidRule("FirstExit radius must be positive on every path")
            return np.broadcast_to(r, (rows,))[:, None]
        return self.radius

    def _realize(self, values, s_idx, grid, prefix):
        n = values.shape[1] - 1
        cap_steps = grid.steps_for(self.cap)
        last = min(cap_steps, n)
        eps = self._radius(prefix, values.shape[0])
        dev = np.abs(values[:, : last + 1] - values[:, :1])
        # k hits when the value at k or its left limit reaches the radius
        hit = (dev[:, 1:] >= eps) | (dev[:, :-1] >= eps)
        return _first_hit(hit, s_idx, last, cap_steps <= n)

    def describe(self):
        return {"kind": "first_exit", "radius": self.radius if not callable(self.radius)
                else getattr(self.radius, "__name__", "callable"), "cap": self.cap}


def _first_hit(hit, s_idx, last, cap_in_window):
    b = hit.shape[0]
    if hit.shape[1] == 0:
        found = np.zeros(b, dtype=bool)
        pos = np.zeros(b, dtype=np.int64)
    else:
        found = hit.any(axis=1)
        pos = hit.argmax(axis=1)
    idx = np.where(found, s_idx + 1 + pos, s_idx + last).astype(np.int64)
    status = np.where(found, HIT, CAP if cap_in_window else OPEN).astype(np.int8)
    return idx, status


@dataclass(frozen=True)
class Debut(StoppingRule):
    """First time at or after S with X_t >= level."""

    level: float

    def _realize(self, values, s_idx, grid, prefix):
        n = values.shape[1] - 1
        at = values >= self.level
        found = at.any(axis=1)
        pos = at.argmax(axis=1)
        idx = np.where(found, s_idx + pos, s_idx + n).astype(np.int64)
        status = np.where(found, HIT, OPEN).astype(np.int8)
        return idx, status

    def describe(self):
        return {"kind": "debut", "level": self.level}


@dataclass(frozen=True)
class Min(StoppingRule):
    rules: tuple

    def __init__(self, rules: Sequence[StoppingRule]):
        object.__setattr__(self, "rules", tuple(rules))
        if not self.rules:
            raise InvalidRule("Min of an empty rule list")

    def lookahead(self, grid, s_idx):
        la = [r.lookahead(grid, s_idx) for r in self.rules]
        finite = [x for x in la if x is not None]
        return min(finite) if finite else None

    def _realize(self, values, s_idx, grid, prefix):
        if not self.rules:
            raise InvalidRule("Min of an empty rule list")
        idx, status = self.rules[0]._realize(values, s_idx, grid, prefix)
        for rule in self.rules[1:]:
            i2, s2 = rule._realize(values, s_idx, grid, prefix)
            better = (i2 < idx) | ((i2 == idx) & (s2 < status))
            idx = np.where(better, i2, idx)
            status = np.where(better, s2, status)
        return idx, status

    def describe(self):
        return {"kind": "min", "rules": [r.describe() for r in self.rules]}


@dataclass(frozen=True)
class PartitionGlue(StoppingRule):
    """Per path, the rule whose prefix event holds: sum_i 1_{P_i} T_i.

    Each event is a callable of the prefix array (rows, s_idx + 1) returning a
    boolean per row; events must be pairwise exclusive and exhaustive.
    """

    events: tuple
    rules: tuple

    def __init__(self, events: Sequence[Callable], rules: Sequence[StoppingRule]):
        object.__setattr__(self, "events", tuple(events))
        object.__setattr__(self, "rules", tuple(rules))
        if len(self.events) != len(self.rules) or not self.rules:
            raise InvalidRule("PartitionGlue needs one rule per event and at least one event")

    def lookahead(self, grid, s_idx):
        la = [r.lookahead(grid, s_idx) for r in self.rules]
        return None if any(x is None for x in la) else max(la)

    def masks(self, prefix, rows):
        if prefix is None:
            raise InvalidRule("PartitionGlue needs the path prefix up to S")
        return [np.broadcast_to(np.asarray(ev(prefix), dtype=bool).reshape(-1), (rows,))
                for ev in self.events]

    def _realize(self, values, s_idx, grid, prefix):
        masks = self.masks(prefix, values.shape[0])
        parts = [r._realize(values, s_idx, grid, prefix) for r in self.rules]
        _check_partition(masks)
        idx = np.zeros(values.shape[0], dtype=np.int64)
        status = np.zeros(values.shape[0], dtype=np.int8)
        for m, (i, s) in zip(masks, parts):
            idx = np.where(m, i, idx)
            status = np.where(m, s, status)
        return idx, status

    def describe(self):
        return {"kind": "partition", "rules": [r.describe() for r in self.rules]}


def _check_partition(masks):
    count = np.sum(np.stack(masks), axis=0)
    if np.any(count == 0):
        raise PartitionViolation("no event holds on some path",
                                 path=int(np.argmax(count == 0)))
    if np.any(count > 1):
        raise PartitionViolation("two events hold on some path",
                                 path=int(np.argmax(count > 1)))


def realize(rule: StoppingRule, path, s_idx: int = 0, grid: Optional[TimeGrid] = None) -> RealizedStop:
    """Realise ``rule`` on a whole path (or a stack of paths) from ``s_idx``.

    A rule that has not resolved by the end of the grid is reported as capped
    at ``n_steps``.
    """
    values = as_values(path)
    if grid is None:
        if not hasattr(path, "grid"):
            raise InvalidParameter("a grid is needed for raw value arrays")
        grid = path.grid
    single = values.ndim == 1
    v2 = values[None, :] if single else values
    n = v2.shape[1] - 1
    if not 0 <= s_idx <= n:
        raise OutOfRange(f"s_idx={s_idx} outside [0, {n}]", s_idx=s_idx)
    idx, status = rule._realize(v2[:, s_idx:], s_idx, grid, v2[:, : s_idx + 1])
    rs = RealizedStop(idx, status != HIT)
    if single:
        return RealizedStop(rs.index[0], rs.capped[0])
    return rs


def glue_partition(events: Sequence, realized: Sequence[RealizedStop]) -> RealizedStop:
    """Select per path the realisation whose event holds.

    ``events`` are boolean arrays (one entry per path) already evaluated on
    the prefixes.
    """
    if len(events) != len(realized) or not events:
        raise PartitionViolation("need one realisation per event")
    masks = [np.atleast_1d(np.asarray(e, dtype=bool)) for e in events]
    n = max(m.size for m in masks + [np.atleast_1d(r.index) for r in realized])
    masks = [np.broadcast_to(m, (n,)) for m in masks]
    _check_partition(masks)
    idx = np.zeros(n, dtype=np.int64)
    cap = np.zeros(n, dtype=bool)
    for m, r in zip(masks, realized):
        idx = np.where(m, np.broadcast_to(np.atleast_1d(r.index), (n,)), idx)
        cap = np.where(m, np.broadcast_to(np.atleast_1d(r.capped), (n,)), cap)
    return RealizedStop(idx, cap)


@dataclass(frozen=True, eq=False)
class TimeChangeRealization:
    """Cumulative intrinsic clock of one path and its generalised inverse."""

    grid: TimeGrid
    cum: np.ndarray  # cum[k] = sum_{j<k} a_j dt

    @property
    def total(self) -> float:
        return float(self.cum[-1])

    def index_at(self, s):
        """Smallest grid index k with cum[k] >= s (n_steps where the clock runs out)."""
        s = np.asarray(s, dtype=float)
        k = np.searchsorted(self.cum, s, side="left")
        return np.minimum(k, self.grid.n_steps)

    def capped(self, s):
        return np.asarray(s, dtype=float) > self.cum[-1]

    def R(self, s):
        return self.grid.time(self.index_at(s))


def realize_time_change(a, path, require_positive: bool = True) -> TimeChangeRealization:
    """Integrate the adaptation ``a`` along ``path`` (left Riemann sums).

    With ``require_positive=False`` zero rates are allowed (the clock may stall),
    which is what the indicator adaptation of a stopped process needs.
    """
    values = as_values(path)
    grid = path.grid
    rate = np.asarray(a.along(values[None, :], grid)[0], dtype=float)
    used = rate[:-1]
    if not np.all(np.isfinite(used)):
        raise NonPositiveRate("rate is not finite", index=int(np.argmax(~np.isfinite(used))))
    bad = used <= 0 if require_positive else used < 0
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NonPositiveRate(f"rate {used[k]} at index {k} is not positive", index=k)
    cum = np.concatenate([[0.0], np.cumsum(used)]) * grid.dt
    return TimeChangeRealization(grid, cum)


def rule_from_dict(d: dict) -> StoppingRule:
    kind = d.get("kind")
    try:
        if kind == "at_time":
            return AtTime(float(d["t"]))
        if kind == "offset":
            return OffsetFromS(float(d["h"]))
        if kind == "first_exit":
            return FirstExit(float(d["radius"]), float(d.get("cap", DEFAULT_CAP)))
        if kind == "debut":
            return Debut(float(d["level"]))
        if kind == "min":
            return Min([rule_from_dict(r) for r in d["rules"]])
    except KeyError as exc:
        raise InvalidRule(f"stopping rule {kind!r} is missing {exc.args[0]!r}") from None
    raise InvalidRule(f"unknown stopping rule kind {kind!r}")
