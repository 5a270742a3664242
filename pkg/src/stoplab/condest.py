"""Bundle estimators of conditional moments evaluated at stopping times.

Conditioning on the information at S is realised by branching: every outer
path contributes its prefix up to S and M continuations sharing it, and
``E[. | F_S]`` becomes a mean over those continuations. Values are always the
cadlag-adjusted ``X_{T-}`` (``X_S`` when ``T = S``).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateStoppingFamily, InsufficientBundle, InvalidParameter, OutOfRange
from .paths import TimeGrid, fmt_float
from .processes import Adaptation, Bundle, ProcessSpec, continue_block, simulate_block
from .stopping import OPEN, StoppingRule

# continuation windows start this long (in steps) when a rule has no finite bound
_INITIAL_WINDOW = 1024


@dataclass(frozen=True)
class MomentKind:
    """Which conditional moment a bundle estimate computes.

    ``centre`` (ProjectedCentre) is the drift used for the projected centre
    ``X_S + B_S (T - S)``: a number, a callable of the state at S, or None for
    the drift estimated from the same bundle. ``integrand`` (IntegratedDriftCentre)
    is the drift adaptation whose pathwise integral from S to T is removed.
    """

    name: str
    coord: int = 0
    other: Optional[int] = None
    centre: Union[float, Callable, None] = None
    integrand: Optional[Adaptation] = None

    NAMES = ("cond_exp", "cond_var", "cond_cov", "rel_second_moment",
             "projected_centre", "integrated_drift_centre")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise InvalidParameter(f"unknown moment kind {self.name!r}")
        if self.name == "cond_cov" and self.other is None:
            raise InvalidParameter("cond_cov needs the second coordinate")
        if self.name == "integrated_drift_centre" and self.integrand is None:
            raise InvalidParameter("integrated_drift_centre needs a drift integrand")

    @classmethod
    def cond_exp(cls, coord=0):
        return cls("cond_exp", coord)

    @classmethod
    def cond_var(cls, coord=0):
        return cls("cond_var", coord)

    @classmethod
    def cond_cov(cls, coord=0, other=1):
        return cls("cond_cov", coord, other)

    @classmethod
    def rel_second_moment(cls, coord=0):
        return cls("rel_second_moment", coord)

    @classmethod
    def projected_centre(cls, centre=None, coord=0):
        return cls("projected_centre", coord, centre=centre)

    @classmethod
    def integrated_drift_centre(cls, integrand, coord=0):
        return cls("integrated_drift_centre", coord, integrand=integrand)


@dataclass(frozen=True)
class BundleEstimate:
    """Per outer path: mean over continuations, its standard error, and E[T - S | F_S]."""

    value: np.ndarray
    stderr: np.ndarray
    denominator: np.ndarray
    M: int

    def to_csv(self, path) -> None:
        write_estimates_csv(path, self)


def write_estimates_csv(path, est: BundleEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["outer_index", "value", "stderr", "denominator"])
        for i, (v, s, d) in enumerate(zip(np.atleast_1d(est.value), np.atleast_1d(est.stderr),
                                          np.atleast_1d(est.denominator))):
            w.writerow([i, fmt_float(v), fmt_float(s), fmt_float(d)])


def moment_terms(name: str, x_s, x_tm, elapsed, *, y_s=None, y_tm=None, centre=None,
                 integral=None) -> np.ndarray:
    """Per-continuation terms whose mean over the last axis is the moment.

    ``x_tm`` (..., M) are cadlag-adjusted values, ``x_s`` (...) the anchor
    values and ``elapsed`` (..., M) the times T - S.
    """
    x_s = np.asarray(x_s, dtype=float)[..., None]
    if name == "cond_exp":
        return np.asarray(x_tm, dtype=float)
    if name == "cond_var":
        d = x_tm - x_tm.mean(axis=-1, keepdims=True)
        return d * d
    if name == "cond_cov":
        dx = x_tm - x_tm.mean(axis=-1, keepdims=True)
        dy = y_tm - y_tm.mean(axis=-1, keepdims=True)
        return dx * dy
    if name == "rel_second_moment":
        d = x_tm - x_s
        return d * d
    if name == "projected_centre":
        d = x_tm - x_s - np.asarray(centre, dtype=float)[..., None] * elapsed
        return d * d
    if name == "integrated_drift_centre":
        d = x_tm - x_s - integral
        return d * d
    raise InvalidParameter(f"unknown moment kind {name!r}")


def _summarise(terms):
    m = terms.shape[-1]
    value = terms.mean(axis=-1)
    se = terms.std(axis=-1, ddof=1) / math.sqrt(m)
    return value, se


def _left_rel(idx, s_idx):
    """Window column of X_{T-} for absolute stop indices ``idx``."""
    return idx - s_idx - (idx > s_idx)


def _integral_along(integrand: Adaptation, window: np.ndarray, prefix: np.ndarray,
                    s_idx: int, grid: TimeGrid) -> np.ndarray:
    """Cumulative left Riemann integral of the adaptation from S along each continuation."""
    if integrand.path_dependent and s_idx > 0:
        full = np.concatenate([np.broadcast_to(prefix[:-1], (window.shape[0], s_idx)), window],
                              axis=1)
        rate = integrand.along(full, grid)[:, s_idx:]
    else:
        rate = integrand.along(window, grid, start=s_idx)
    cum = np.zeros_like(rate)
    np.cumsum(rate[:, :-1], axis=1, out=cum[:, 1:])
    return cum * grid.dt


def bundle_moment(kind: MomentKind, bundle: Bundle, rule: StoppingRule,
                  driver: int = 0) -> BundleEstimate:
    """Estimate ``kind`` at the stop ``rule`` realised on every continuation of ``bundle``."""
    if bundle.M < 2:
        raise InsufficientBundle(f"a bundle needs M >= 2 continuations, got {bundle.M}")
    s = bundle.s_idx
    grid = bundle.grid
    drv = bundle.window[:, :, driver]
    idx, status = rule._realize(drv, s, grid, bundle.prefix[None, :, driver])
    if np.any(status == OPEN):
        raise OutOfRange("bundle continuations are too short to realise the stopping rule",
                         n_ahead=bundle.n_ahead)
    if kind.name != "cond_exp" and np.all(idx == s):
        raise DegenerateStoppingFamily("every realised stop equals S")
    rel = _left_rel(idx, s)
    rows = np.arange(bundle.M)
    elapsed = (idx - s) * grid.dt
    x_s = bundle.prefix[-1, kind.coord]
    x_tm = bundle.window[rows, rel, kind.coord]
    extra = {}
    if kind.name == "cond_cov":
        extra["y_s"] = bundle.prefix[-1, kind.other]
        extra["y_tm"] = bundle.window[rows, rel, kind.other]
    if kind.name == "projected_centre":
        c = kind.centre
        if c is None:
            c = (x_tm.mean() - x_s) / elapsed.mean()
        elif callable(c):
            c = c(bundle.prefix[-1])
        extra["centre"] = c
    if kind.name == "integrated_drift_centre":
        cum = _integral_along(kind.integrand, bundle.window[:, :, kind.coord],
                              bundle.prefix[:, kind.coord], s, grid)
        extra["integral"] = cum[rows, rel]
    terms = moment_terms(kind.name, x_s, x_tm, elapsed, **extra)
    value, se = _summarise(terms)
    return BundleEstimate(np.asarray(value), np.asarray(se), np.asarray(elapsed.mean()),
                          bundle.M)


def stopping_continuity_probe(kind: MomentKind, bundle: Bundle,
                              family: Sequence[StoppingRule], driver: int = 0) -> np.ndarray:
    """Per-rule deviation |F[T | F_S] - F[S | F_S]| for CondExp (against X_S) or CondVar (against 0)."""
    if kind.name not in ("cond_exp", "cond_var"):
        raise InvalidParameter("the continuity probe covers cond_exp and cond_var only")
    ref = bundle.prefix[-1, kind.coord] if kind.name == "cond_exp" else 0.0
    return np.array([abs(float(bundle_moment(kind, bundle, r, driver).value) - ref)
                     for r in family])


# ---------------------------------------------------------------------------
# many outer paths at once
# ---------------------------------------------------------------------------

Observable = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def coordinate(i: int) -> Observable:
    def obs(x, t, x_s):
        return x[..., i]
    obs.__name__ = f"x{i}"
    return obs


@dataclass(eq=False)
class BundleSample:
    """Stops and observable values for N outer paths, J stopping rules and M continuations.

    ``obs_s`` (N, q) holds observables at S, ``obs_tm`` (N, J, M, q) at the
    cadlag-adjusted stop X_{T-} and ``obs_t`` (N, J, M, q) at X_T. ``integral``
    (N, J, M) is the drift integrand integrated from S up to the X_{T-} index;
    ``anchor_values`` (N, k) are adaptations evaluated on the prefix at S.
    """

    grid: TimeGrid
    s_idx: np.ndarray
    anchor_capped: np.ndarray
    x_s: np.ndarray
    idx: np.ndarray
    capped: np.ndarray
    obs_s: np.ndarray
    obs_tm: np.ndarray
    obs_t: np.ndarray
    integral: Optional[np.ndarray] = None
    anchor_values: Optional[np.ndarray] = None
    names: tuple = field(default_factory=tuple)

    @property
    def n_outer(self) -> int:
        return self.idx.shape[0]

    @property
    def M(self) -> int:
        return self.idx.shape[2]

    @property
    def elapsed(self) -> np.ndarray:
        return (self.idx - self.s_idx[:, None, None]) * self.grid.dt

    @property
    def denominator(self) -> np.ndarray:
        """E[T - S | F_S] per outer path and rule, (N, J)."""
        return self.elapsed.mean(axis=-1)

    def degenerate_fraction(self) -> np.ndarray:
        """Fraction of continuations per rule whose stop collapsed onto S, (J,)."""
        return (self.idx == self.s_idx[:, None, None]).mean(axis=(0, 2))

    def moment(self, kind: MomentKind) -> BundleEstimate:
        """Bundle estimate (N, J) of ``kind`` over the observables' coordinates."""
        x_s = self.obs_s[:, kind.coord][:, None]
        x_tm = self.obs_tm[..., kind.coord]
        extra = {}
        if kind.name == "cond_cov":
            extra["y_s"] = self.obs_s[:, kind.other][:, None]
            extra["y_tm"] = self.obs_tm[..., kind.other]
        if kind.name == "projected_centre":
            c = kind.centre
            if c is None:
                c = (x_tm.mean(axis=-1) - x_s) / self.denominator
            elif callable(c):
                c = np.array([c(x) for x in self.x_s])[:, None] * np.ones(self.idx.shape[1])
            extra["centre"] = np.broadcast_to(np.asarray(c, dtype=float), self.idx.shape[:2])
        if kind.name == "integrated_drift_centre":
            if self.integral is None:
                raise InvalidParameter("sample was drawn without a drift integrand")
            extra["integral"] = self.integral
        terms = moment_terms(kind.name, x_s, x_tm, self.elapsed, **extra)
        value, se = _summarise(terms)
        return BundleEstimate(value, se, self.denominator, self.M)


def sample_bundles(spec: ProcessSpec, grid: TimeGrid, anchor: StoppingRule,
                   rules: Sequence[StoppingRule], n_outer: int, M: int, seed: int, *,
                   observables: Optional[Sequence[Observable]] = None, driver: int = 0,
                   integrand: Optional[Adaptation] = None, threads: int = 1,
                   first_outer: int = 0,
                   at_anchor: Sequence[Adaptation] = ()) -> BundleSample:
    """Simulate outer paths, realise the anchor S on each and branch M continuations.

    ``grid`` bounds the anchor: outer paths run to the anchor's grid index (or
    the end of the grid for unbounded anchors). Continuations run as far past
    S as the rules need, even beyond the grid horizon.
    """
    if M < 2:
        raise InsufficientBundle(f"a bundle needs M >= 2 continuations, got {M}", M=M)
    if n_outer < 1:
        raise InvalidParameter("n_outer must be at least 1")
    rules = list(rules)
    if observables is None:
        observables = [coordinate(i) for i in range(spec.dim)]
    n_out = grid.n_steps
    la = anchor.lookahead(grid, 0)
    if la is not None:
        n_out = min(n_out, max(la, 0))
    obs_paths, latent = simulate_block(spec, grid, seed, range(first_outer, first_outer + n_outer),
                                       n_steps=max(n_out, 1))
    drv = obs_paths[:, :, driver]
    s_idx, st = anchor._realize(drv, 0, grid, drv[:, :1])
    s_idx = np.minimum(s_idx, n_out)

    def one(i):
        return _one_bundle(spec, grid, latent[i, : s_idx[i] + 1], int(s_idx[i]), rules, M,
                           seed, first_outer + i, observables, driver, integrand, at_anchor)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(n_outer)))
    else:
        parts = [one(i) for i in range(n_outer)]
    x_s = obs_paths[np.arange(n_outer), s_idx]
    return BundleSample(
        grid=grid, s_idx=np.asarray(s_idx, dtype=np.int64), anchor_capped=st == OPEN,
        x_s=x_s,
        idx=np.stack([p[0] for p in parts]),
        capped=np.stack([p[1] for p in parts]),
        obs_s=np.stack([p[2] for p in parts]),
        obs_tm=np.stack([p[3] for p in parts]),
        obs_t=np.stack([p[4] for p in parts]),
        integral=None if integrand is None else np.stack([p[5] for p in parts]),
        anchor_values=None if not at_anchor else np.stack([p[6] for p in parts]),
        names=tuple(getattr(o, "__name__", f"obs{k}") for k, o in enumerate(observables)),
    )


def _one_bundle(spec, grid, latent_prefix, s, rules, M, seed, bundle_index, observables,
                driver, integrand, at_anchor):
    bounds = [r.lookahead(grid, s) for r in rules]
    limit = None if any(b is None for b in bounds) else max(bounds)
    n = limit if limit is not None and limit <= 4 * _INITIAL_WINDOW else _INITIAL_WINDOW
    n = max(n, 1)
    while True:
        block = continue_block(spec, latent_prefix, M, n, seed, bundle_index, grid)
        win = block.window
        drv = win[:, :, driver]
        pre = block.prefix[:, :, driver]
        real = [r._realize(drv, s, grid, pre) for r in rules]
        still_open = any(np.any(stt == OPEN) for _, stt in real)
        if not still_open or (limit is not None and n >= limit):
            break
        n = 2 * n if limit is None else min(2 * n, limit)
    idx = np.stack([i for i, _ in real])            # (J, M)
    capped = np.stack([stt != 0 for _, stt in real])
    rows = np.arange(M)[None, :]
    t_rel = idx - s
    tm_rel = _left_rel(idx, s)
    x_prefix_end = block.prefix[0, -1]
    t_s = s * grid.dt
    obs_s = np.array([float(np.asarray(o(x_prefix_end, np.asarray(t_s), x_prefix_end)))
                      for o in observables])
    x_tm = win[rows, tm_rel]                        # (J, M, d)
    x_t = win[rows, t_rel]
    tm_time = (s + tm_rel) * grid.dt
    t_time = idx * grid.dt
    obs_tm = np.stack([np.asarray(o(x_tm, tm_time, x_prefix_end), dtype=float)
                       for o in observables], axis=-1)
    obs_t = np.stack([np.asarray(o(x_t, t_time, x_prefix_end), dtype=float)
                      for o in observables], axis=-1)
    integral = None
    if integrand is not None:
        cum = _integral_along(integrand, win[:, :, driver], block.prefix[0, :, driver], s, grid)
        # aligned with X_{T-}: the integral runs to the same grid index
        integral = cum[rows, tm_rel]
    anchor_vals = None
    if at_anchor:
        full_pre = block.prefix[:, :, driver]
        anchor_vals = np.array([float(np.asarray(a(full_pre, t_s)).reshape(-1)[0])
                                for a in at_anchor])
    return idx, capped, obs_s, obs_tm, obs_t, integral, anchor_vals
