"""Process specifications, Euler-Maruyama simulation and branched bundles.

A specification is either a *base* process, which owns the random dynamics
(Brownian motion, Ito processes, correlated Brownian motion, deterministic
paths), or a *wrapper* applying a non-anticipating transformation to the path
of its inner specification (stopping, scaling, pointwise maps, drift
compensation). Branching always continues the base dynamics from the shared
prefix and re-applies the wrappers, so path-dependent specifications condition
correctly on the information up to S.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (ConfigError, InsufficientBundle, InvalidParameter, NumericalBlowup,
                     OutOfRange, ScenarioInvalid)
from .paths import (STREAM_BRANCH, STREAM_OUTER, Ensemble, SamplePath, TimeGrid, VectorPath,
                    path_rng)
from .stopping import HIT, OPEN, StoppingRule, rule_from_dict

# continuation noise is drawn in fixed-size blocks so longer windows extend
# shorter ones bit-identically
NOISE_BLOCK = 256


# ---------------------------------------------------------------------------
# adaptations
# ---------------------------------------------------------------------------

class Adaptation:
    """Non-anticipating path functional ``a(f, t)``.

    ``__call__`` receives ``prefix`` of shape (rows, k + 1), the values on
    grid indices 0..k, and the time ``t_k``; it returns one value per row.
    Adaptations with ``path_dependent = False`` only ever look at the last
    column, and the simulator may hand them a single-column prefix.
    """

    path_dependent = True

    def __call__(self, prefix: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def along(self, values: np.ndarray, grid: TimeGrid, start: int = 0) -> np.ndarray:
        """Evaluate at every index of ``values`` (rows, n + 1); column 0 is index ``start``."""
        out = np.empty(values.shape, dtype=float)
        for k in range(values.shape[1]):
            out[:, k] = self(values[:, : k + 1], (start + k) * grid.dt)
        return out


class StateFunction(Adaptation):
    """``a(f, t) = fn(f(t), t)`` for a vectorised ``fn``."""

    path_dependent = False

    def __init__(self, fn: Callable, name: str = "state_function"):
        self.fn = fn
        self.name = name

    def __call__(self, prefix, t):
        return np.broadcast_to(np.asarray(self.fn(prefix[..., -1], t), dtype=float),
                               prefix.shape[:-1])

    def along(self, values, grid, start=0):
        t = (start + np.arange(values.shape[1])) * grid.dt
        return np.broadcast_to(np.asarray(self.fn(values, t), dtype=float), values.shape)

    def __repr__(self):
        return f"StateFunction({self.name})"


class Constant(StateFunction):
    def __init__(self, value: float):
        self.value = float(value)
        super().__init__(lambda x, t: np.full(np.shape(x), self.value), f"constant({value})")

    def __repr__(self):
        return f"Constant({self.value})"


class Linear(StateFunction):
    """``coef * f(t) + intercept``."""

    def __init__(self, coef: float, intercept: float = 0.0):
        self.coef, self.intercept = float(coef), float(intercept)
        super().__init__(lambda x, t: self.coef * np.asarray(x) + self.intercept,
                         f"linear({coef}, {intercept})")


class AbsAffine(StateFunction):
    """``clip(base + slope * |f(t)|, lo, hi)``."""

    def __init__(self, base: float = 1.0, slope: float = 0.5,
                 lo: float = -np.inf, hi: float = np.inf):
        self.base, self.slope, self.lo, self.hi = float(base), float(slope), float(lo), float(hi)
        super().__init__(
            lambda x, t: np.clip(self.base + self.slope * np.abs(x), self.lo, self.hi),
            f"abs_affine({base}, {slope}, [{lo}, {hi}])")


class Sqrt(Adaptation):
    """Pointwise square root of another adaptation (diffusion from a variance rate)."""

    def __init__(self, inner: Adaptation):
        self.inner = inner
        self.path_dependent = inner.path_dependent

    def __call__(self, prefix, t):
        return np.sqrt(self.inner(prefix, t))

    def along(self, values, grid, start=0):
        return np.sqrt(self.inner.along(values, grid, start))


class RunningMaxBelow(Adaptation):
    """``1`` while ``max f`` on [0, t] stays below ``level``, ``0`` afterwards."""

    def __init__(self, level: float = 1.0):
        self.level = float(level)

    def __call__(self, prefix, t):
        return (prefix.max(axis=-1) < self.level).astype(float)

    def along(self, values, grid, start=0):
        return (np.maximum.accumulate(values, axis=-1) < self.level).astype(float)


class PathFunction(Adaptation):
    """Wrap an arbitrary ``fn(prefix, t)``; the caller vouches for non-anticipation."""

    def __init__(self, fn: Callable, name: str = "path_function"):
        self.fn = fn
        self.name = name

    def __call__(self, prefix, t):
        return np.asarray(self.fn(prefix, t), dtype=float)


def as_adaptation(x) -> Adaptation:
    if isinstance(x, Adaptation):
        return x
    if isinstance(x, (int, float)):
        return Constant(x)
    raise InvalidParameter(f"cannot use {x!r} as an adaptation")


# ---------------------------------------------------------------------------
# blocks of simulated values
# ---------------------------------------------------------------------------

@dataclass
class Block:
    """Rows of values over a window starting at grid index ``start``.

    ``prefix`` (P, start + 1, d) holds the history up to ``start`` (P is 1 when
    all rows share it); ``window`` (B, n + 1, d) has ``window[:, 0] == prefix[:, -1]``.
    """

    prefix: np.ndarray
    window: np.ndarray
    start: int

    def full(self) -> np.ndarray:
        if self.start == 0:
            return self.window
        b, _, d = self.window.shape
        pre = np.broadcast_to(self.prefix[:, :-1], (b, self.start, d))
        return np.concatenate([pre, self.window], axis=1)

    def with_values(self, prefix, window) -> "Block":
        return Block(prefix, window, self.start)


# ---------------------------------------------------------------------------
# specifications
# ---------------------------------------------------------------------------

class ProcessSpec:
    dim = 1
    noise_dim = 1

    def base(self) -> "ProcessSpec":
        return self

    @property
    def is_base(self) -> bool:
        return self.base() is self

    def initial(self) -> np.ndarray:
        raise NotImplementedError

    def advance(self, prefix: np.ndarray, n_steps: int, normals, grid: TimeGrid) -> np.ndarray:
        """Continue the base dynamics for ``n_steps`` from the last column of ``prefix``."""
        raise NotImplementedError

    def observe(self, block: Block, grid: TimeGrid) -> Block:
        return block

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


@dataclass(frozen=True)
class BrownianMotion(ProcessSpec):
    x0: float = 0.0

    def initial(self):
        return np.array([self.x0], dtype=float)

    def advance(self, prefix, n_steps, normals, grid):
        b = normals.shape[0]
        out = np.empty((b, n_steps + 1, 1))
        out[:, 0] = prefix[:, -1]
        np.cumsum(normals[:, :, 0] * math.sqrt(grid.dt), axis=1, out=out[:, 1:, 0])
        out[:, 1:, 0] += out[:, :1, 0]
        return out

    def describe(self):
        return {"kind": "brownian", "x0": self.x0}


@dataclass(frozen=True)
class ItoProcess(ProcessSpec):
    """``X_{k+1} = X_k + b(prefix, k) dt + sigma(prefix, k) sqrt(dt) xi_k``."""

    x0: float
    drift: Adaptation
    diffusion: Adaptation

    def __post_init__(self):
        object.__setattr__(self, "drift", as_adaptation(self.drift))
        object.__setattr__(self, "diffusion", as_adaptation(self.diffusion))

    def initial(self):
        return np.array([self.x0], dtype=float)

    def advance(self, prefix, n_steps, normals, grid):
        b_fn, s_fn = self.drift, self.diffusion
        rows = normals.shape[0]
        s = prefix.shape[1] - 1
        dt, sq = grid.dt, math.sqrt(grid.dt)
        xi = normals[:, :, 0]
        if b_fn.path_dependent or s_fn.path_dependent:
            buf = np.empty((rows, s + 1 + n_steps))
            buf[:, : s + 1] = prefix[:, :, 0]
            for j in range(n_steps):
                k = s + j
                view = buf[:, : k + 1]
                t = k * dt
                bv, sv = b_fn(view, t), s_fn(view, t)
                buf[:, k + 1] = buf[:, k] + bv * dt + sv * sq * xi[:, j]
                if not np.all(np.isfinite(buf[:, k + 1])):
                    raise NumericalBlowup(f"non-finite value at grid index {k + 1}", index=k + 1)
            return buf[:, s:, None]
        out = np.empty((rows, n_steps + 1))
        out[:, 0] = prefix[:, -1, 0]
        cur = out[:, :1]
        for j in range(n_steps):
            t = (s + j) * dt
            nxt = cur[:, 0] + b_fn(cur, t) * dt + s_fn(cur, t) * sq * xi[:, j]
            out[:, j + 1] = nxt
            cur = out[:, j + 1: j + 2]
        if not np.all(np.isfinite(out)):
            bad = np.argmax(~np.all(np.isfinite(out), axis=0))
            raise NumericalBlowup(f"non-finite value at grid index {s + bad}", index=int(s + bad))
        return out[:, :, None]

    def describe(self):
        return {"kind": "ito", "x0": self.x0, "drift": repr(self.drift),
                "diffusion": repr(self.diffusion)}


@dataclass(frozen=True)
class Deterministic(ProcessSpec):
    f: Callable
    name: str = "f"
    noise_dim = 0

    def initial(self):
        return np.array([float(_call_time_fn(self.f, np.array([0.0]))[0])])

    def advance(self, prefix, n_steps, normals, grid):
        s = prefix.shape[1] - 1
        rows = prefix.shape[0] if normals is None else normals.shape[0]
        t = (s + np.arange(n_steps + 1)) * grid.dt
        v = _call_time_fn(self.f, t)
        return np.broadcast_to(v, (rows, n_steps + 1))[:, :, None].copy()

    def describe(self):
        return {"kind": "deterministic", "function": self.name}


def _call_time_fn(f, t):
    try:
        v = np.asarray(f(t), dtype=float)
        if v.shape == t.shape:
            return v
    except (TypeError, ValueError):
        pass
    return np.array([float(f(float(x))) for x in t])


def staircase_value(t: float) -> float:
    """0 at t = 0; n^-2 on [1/n, 1/(n-1)) for integers n > 0 (1/0 read as infinity)."""
    t = float(t)
    if t < 0:
        raise InvalidParameter(f"staircase needs t >= 0, got {t}")
    if t == 0:
        return 0.0
    if t >= 1.0:
        return 1.0
    n = max(2, math.ceil(1.0 / t))
    while n > 1 and t >= 1.0 / (n - 1):
        n -= 1
    while t < 1.0 / n:
        n += 1
    return 1.0 / (n * n)


def staircase_values(t) -> np.ndarray:
    return np.array([staircase_value(x) for x in np.ravel(t)]).reshape(np.shape(t))


@dataclass(frozen=True)
class Staircase(ProcessSpec):
    """Deterministic cadlag zero-drift process that is not a local martingale."""

    noise_dim = 0

    def initial(self):
        return np.array([0.0])

    def advance(self, prefix, n_steps, normals, grid):
        s = prefix.shape[1] - 1
        rows = prefix.shape[0] if normals is None else normals.shape[0]
        t = (s + np.arange(n_steps + 1)) * grid.dt
        return np.broadcast_to(staircase_values(t), (rows, n_steps + 1))[:, :, None].copy()

    def describe(self):
        return {"kind": "staircase"}


def psd_cholesky(c: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular L with L L^T = c for symmetric PSD c (zero columns on null pivots)."""
    n = c.shape[0]
    low = np.zeros_like(c, dtype=float)
    for j in range(n):
        d = c[j, j] - low[j, :j] @ low[j, :j]
        if d <= tol:
            if d < -1e-9:
                raise InvalidParameter("matrix is not positive semi-definite")
            continue
        low[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            low[i, j] = (c[i, j] - low[i, :j] @ low[j, :j]) / low[j, j]
    return low


@dataclass(frozen=True, eq=False)
class CorrelatedBM(ProcessSpec):
    corr: np.ndarray
    x0: Optional[np.ndarray] = None
    factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.corr, dtype=float))
        if c.shape[0] != c.shape[1]:
            raise InvalidParameter("correlation matrix must be square")
        if not np.allclose(c, c.T, atol=1e-12) or not np.allclose(np.diag(c), 1.0):
            raise InvalidParameter("correlation matrix must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-10:
            raise InvalidParameter("correlation matrix must be positive semi-definite")
        object.__setattr__(self, "corr", c)
        x0 = np.zeros(c.shape[0]) if self.x0 is None else np.asarray(self.x0, dtype=float)
        if x0.shape != (c.shape[0],):
            raise InvalidParameter("x0 must have one entry per coordinate")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "factor", psd_cholesky(c))

    @classmethod
    def pair(cls, rho: float, x0=None) -> "CorrelatedBM":
        return cls(np.array([[1.0, rho], [rho, 1.0]]), x0)

    @property
    def dim(self):
        return self.corr.shape[0]

    @property
    def noise_dim(self):
        return self.corr.shape[0]

    def initial(self):
        return self.x0.copy()

    def advance(self, prefix, n_steps, normals, grid):
        inc = (normals @ self.factor.T) * math.sqrt(grid.dt)
        out = np.empty((normals.shape[0], n_steps + 1, self.dim))
        out[:, 0] = prefix[:, -1]
        np.cumsum(inc, axis=1, out=out[:, 1:])
        out[:, 1:] += out[:, :1]
        return out

    def describe(self):
        return {"kind": "correlated_bm", "corr": self.corr.tolist(), "x0": self.x0.tolist()}


class Wrapper(ProcessSpec):
    inner: ProcessSpec

    def base(self):
        return self.inner.base()

    @property
    def noise_dim(self):
        return self.base().noise_dim

    def initial(self):
        return self.base().initial()

    def observe(self, block, grid):
        return self.transform(self.inner.observe(block, grid), grid)

    def transform(self, block: Block, grid: TimeGrid) -> Block:
        raise NotImplementedError


def _pointwise(block, fn, grid):
    s = block.start
    tp = np.arange(s + 1) * grid.dt
    tw = (s + np.arange(block.window.shape[1])) * grid.dt
    return block.with_values(fn(block.prefix, tp[None, :]), fn(block.window, tw[None, :]))


@dataclass(frozen=True)
class Stopped(Wrapper):
    """The inner process frozen at the realised stop of ``rule`` (anchored at t = 0)."""

    inner: ProcessSpec
    rule: StoppingRule

    @property
    def dim(self):
        return self.inner.dim

    def transform(self, block, grid):
        s = block.start
        pre = block.prefix[:, :, 0]
        idx_p, st_p = self.rule._realize(pre, 0, grid, pre[:, :1])
        done_p = (st_p != OPEN) & (idx_p <= s)
        prefix = _freeze(block.prefix, idx_p, done_p, 0)
        if np.all(done_p):
            held = prefix[:, -1:]
            window = np.broadcast_to(held, (block.window.shape[0],) + held.shape[1:])
            window = np.repeat(window, block.window.shape[1], axis=1)
            return block.with_values(prefix, window)
        full = block.full()
        idx, st = self.rule._realize(full[:, :, 0], 0, grid, full[:, :1, 0])
        window = _freeze(full, idx, st != OPEN, 0)[:, s:]
        return block.with_values(prefix, window)

    def describe(self):
        return {"kind": "stopped", "inner": self.inner.describe(), "rule": self.rule.describe()}


def _freeze(values, idx, active, offset):
    """values[:, k] -> values[:, min(k, idx)] on rows where ``active``."""
    n = values.shape[1]
    cols = np.arange(offset, offset + n)[None, :]
    src = np.where(active[:, None], np.minimum(cols, idx[:, None]), cols) - offset
    src = np.broadcast_to(src, (values.shape[0], n))
    return np.take_along_axis(values, src[:, :, None], axis=1)


@dataclass(frozen=True)
class Negated(Wrapper):
    inner: ProcessSpec

    @property
    def dim(self):
        return self.inner.dim

    def transform(self, block, grid):
        return block.with_values(-block.prefix, -block.window)

    def describe(self):
        return {"kind": "negated", "inner": self.inner.describe()}


@dataclass(frozen=True)
class Scaled(Wrapper):
    """``a * X + c``."""

    inner: ProcessSpec
    a: float = 1.0
    c: float = 0.0

    @property
    def dim(self):
        return self.inner.dim

    def transform(self, block, grid):
        return block.with_values(self.a * block.prefix + self.c, self.a * block.window + self.c)

    def describe(self):
        return {"kind": "scaled", "inner": self.inner.describe(), "a": self.a, "c": self.c}


@dataclass(frozen=True)
class Mapped(Wrapper):
    """Pointwise ``fn(x, t)`` of the inner state; ``x`` has a trailing coordinate axis."""

    inner: ProcessSpec
    fn: Callable
    out_dim: int = 1
    name: str = "mapped"

    @property
    def dim(self):
        return self.out_dim

    def transform(self, block, grid):
        def apply(v, t):
            out = np.asarray(self.fn(v, t), dtype=float)
            return out[..., None] if self.out_dim == 1 and out.ndim == v.ndim - 1 else out
        return _pointwise(block, apply, grid)

    def describe(self):
        return {"kind": "mapped", "inner": self.inner.describe(), "function": self.name}


@dataclass(frozen=True)
class Compensated(Wrapper):
    """``X_t - int_0^t b(X, u) du`` with left Riemann sums on the grid."""

    inner: ProcessSpec
    drift: Adaptation

    def __post_init__(self):
        object.__setattr__(self, "drift", as_adaptation(self.drift))

    def transform(self, block, grid):
        s, dt = block.start, grid.dt
        pre = block.prefix[:, :, 0]
        bp = self.drift.along(pre, grid)
        cum_p = np.concatenate([np.zeros((pre.shape[0], 1)), np.cumsum(bp[:, :-1], axis=1) * dt],
                               axis=1)
        win = block.window[:, :, 0]
        if self.drift.path_dependent and s > 0:
            bw = self.drift.along(block.full()[:, :, 0], grid)[:, s:]
        else:
            bw = self.drift.along(win, grid, start=s)
        cum_w = cum_p[:, -1:] + np.concatenate(
            [np.zeros((win.shape[0], 1)), np.cumsum(bw[:, :-1], axis=1) * dt], axis=1)
        return block.with_values((pre - cum_p)[:, :, None], (win - cum_w)[:, :, None])

    def describe(self):
        return {"kind": "compensated", "inner": self.inner.describe(),
                "drift": repr(self.drift)}


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _outer_normals(spec, n_steps, seed, stream, indices):
    k = spec.noise_dim
    if k == 0:
        return None
    return np.stack([path_rng(seed, stream, int(i)).standard_normal((n_steps, k))
                     for i in indices])


def simulate_block(spec: ProcessSpec, grid: TimeGrid, seed: int, indices,
                   stream: int = STREAM_OUTER, n_steps: Optional[int] = None):
    """Simulate paths ``indices`` from t = 0; returns (observed, base) arrays (B, n + 1, d)."""
    n = grid.n_steps if n_steps is None else n_steps
    base = spec.base()
    indices = list(indices)
    x0 = base.initial()[None, None, :]
    normals = _outer_normals(base, n, seed, stream, indices)
    if normals is None:
        x0 = np.broadcast_to(x0, (len(indices), 1, x0.shape[-1]))
    latent = base.advance(x0, n, normals, grid)
    obs = spec.observe(Block(latent[:, :1], latent, 0), grid).window
    return np.ascontiguousarray(obs), latent


def simulate_ensemble(spec: ProcessSpec, grid: TimeGrid, n_paths: int, seed: int,
                      stream: int = STREAM_OUTER, first_index: int = 0) -> Ensemble:
    obs, latent = simulate_block(spec, grid, seed, range(first_index, first_index + n_paths),
                                 stream)
    if spec.dim == 1:
        obs = obs[:, :, 0]
    return Ensemble(grid, obs, seed, stream, latent)


def simulate(spec: ProcessSpec, grid: TimeGrid, seed: int, index: int = 0):
    """One path (``SamplePath`` or ``VectorPath``), identical to path ``index`` of an ensemble."""
    obs, latent = simulate_block(spec, grid, seed, [index])
    if spec.dim == 1:
        return SamplePath(grid, obs[0, :, 0], latent[0])
    return VectorPath(grid, obs[0], latent[0])


def continuation_normals(spec, n_rows, n_steps, seed, bundle_index):
    k = spec.base().noise_dim
    if k == 0 or n_steps == 0:
        return None if k == 0 else np.zeros((n_rows, 0, k))
    n_blocks = -(-n_steps // NOISE_BLOCK)
    parts = [path_rng(seed, STREAM_BRANCH, bundle_index, j).standard_normal(
        (n_rows, NOISE_BLOCK, k)) for j in range(n_blocks)]
    return np.concatenate(parts, axis=1)[:, :n_steps]


def continue_block(spec: ProcessSpec, latent_prefix: np.ndarray, n_rows: int, n_steps: int,
                   seed: int, bundle_index: int, grid: TimeGrid) -> Block:
    """Branch ``n_rows`` continuations of the base dynamics and observe them through ``spec``."""
    base = spec.base()
    prefix = latent_prefix[None] if latent_prefix.ndim == 2 else latent_prefix
    normals = continuation_normals(spec, n_rows, n_steps, seed, bundle_index)
    if normals is None:
        pfx = np.broadcast_to(prefix, (n_rows,) + prefix.shape[1:])
        window = base.advance(pfx, n_steps, None, grid)
    else:
        window = base.advance(prefix, n_steps, normals, grid)
    s = prefix.shape[1] - 1
    return spec.observe(Block(prefix, window, s), grid)


@dataclass(frozen=True, eq=False)
class Bundle:
    """A path prefix up to ``s_idx`` plus M continuations branched from it."""

    grid: TimeGrid
    s_idx: int
    prefix: np.ndarray       # (s_idx + 1, d) observed values
    window: np.ndarray       # (M, n_ahead + 1, d) observed values from s_idx on
    latent_prefix: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.window.shape[0]

    @property
    def dim(self) -> int:
        return self.window.shape[2]

    @property
    def n_ahead(self) -> int:
        return self.window.shape[1] - 1

    @property
    def x_s(self) -> np.ndarray:
        return self.prefix[-1]

    def continuations(self) -> np.ndarray:
        """Full continuation paths (M, s_idx + n_ahead + 1[, d])."""
        full = Block(self.prefix[None], self.window, self.s_idx).full()
        return full[:, :, 0] if self.dim == 1 else full

    def continuation(self, m: int):
        grid = self.grid.extended(self.s_idx + self.n_ahead)
        full = np.concatenate([self.prefix[:-1], self.window[m]], axis=0)
        return SamplePath(grid, full[:, 0]) if self.dim == 1 else VectorPath(grid, full)


def branch_continuations(spec: ProcessSpec, prefix, s_idx: int, M: int, seed: int,
                         n_ahead: Optional[int] = None, bundle_index: int = 0) -> Bundle:
    """M continuations of ``spec`` from grid index ``s_idx`` of ``prefix``.

    ``prefix`` is a path produced by :func:`simulate` (its latent base values
    are used to continue the dynamics).
    """
    if M < 2:
        raise InsufficientBundle(f"a bundle needs M >= 2 continuations, got {M}", M=M)
    grid = prefix.grid
    if not 0 <= s_idx <= grid.n_steps:
        raise OutOfRange(f"s_idx={s_idx} outside [0, {grid.n_steps}]", s_idx=s_idx)
    latent = prefix.latent
    if latent is None:
        if not spec.is_base:
            raise ScenarioInvalid("prefix carries no base values for a wrapped specification")
        latent = np.asarray(prefix.values, dtype=float)
    latent = latent.reshape(latent.shape[0], -1)
    n = grid.n_steps - s_idx if n_ahead is None else int(n_ahead)
    block = continue_block(spec, latent[: s_idx + 1], M, n, seed, bundle_index, grid)
    return Bundle(grid, s_idx, np.ascontiguousarray(block.prefix[0]),
                  np.ascontiguousarray(block.window), latent[: s_idx + 1])


# ---------------------------------------------------------------------------
# configuration documents
# ---------------------------------------------------------------------------

MAPPED_FUNCTIONS = {
    "square": (lambda x, t: x[..., 0] ** 2, 1),
    "square_minus_t": (lambda x, t: x[..., 0] ** 2 - t, 1),
    "log": (lambda x, t: np.log(x[..., 0]), 1),
    "exp": (lambda x, t: np.exp(x[..., 0]), 1),
    "product": (lambda x, t: x[..., 0] * x[..., 1], 1),
    "sum": (lambda x, t: x.sum(axis=-1), 1),
}


def adaptation_from_dict(d) -> Adaptation:
    if isinstance(d, (int, float)):
        return Constant(d)
    kind = d.get("kind")
    if kind == "constant":
        return Constant(float(d["value"]))
    if kind == "linear":
        return Linear(float(d["coef"]), float(d.get("intercept", 0.0)))
    if kind == "abs_affine":
        return AbsAffine(float(d.get("base", 1.0)), float(d.get("slope", 0.5)),
                         float(d.get("lo", -np.inf)), float(d.get("hi", np.inf)))
    if kind == "running_max_below":
        return RunningMaxBelow(float(d.get("level", 1.0)))
    if kind == "sqrt":
        return Sqrt(adaptation_from_dict(d["inner"]))
    raise ConfigError(f"unknown adaptation kind {kind!r}", field="adaptation")


def spec_from_dict(d: dict) -> ProcessSpec:
    """Build a specification from its configuration-document form."""
    if not isinstance(d, dict):
        raise ConfigError("process must be an object", field="process")
    kind = d.get("kind")
    try:
        if kind == "brownian":
            return BrownianMotion(float(d.get("x0", 0.0)))
        if kind == "ito":
            return ItoProcess(float(d.get("x0", 0.0)), adaptation_from_dict(d["drift"]),
                              adaptation_from_dict(d["diffusion"]))
        if kind == "gbm":
            return ItoProcess(float(d.get("x0", 1.0)), Linear(float(d["mu"])),
                              Linear(float(d["vol"])))
        if kind == "deterministic":
            slope, intercept = float(d.get("slope", 1.0)), float(d.get("intercept", 0.0))
            return Deterministic(lambda t: slope * np.asarray(t) + intercept,
                                 f"{slope}*t+{intercept}")
        if kind == "staircase":
            return Staircase()
        if kind == "correlated_bm":
            return CorrelatedBM(np.asarray(d["corr"], dtype=float), d.get("x0"))
        if kind == "stopped":
            return Stopped(spec_from_dict(d["inner"]), rule_from_dict(d["rule"]))
        if kind == "negated":
            return Negated(spec_from_dict(d["inner"]))
        if kind == "scaled":
            return Scaled(spec_from_dict(d["inner"]), float(d.get("a", 1.0)),
                          float(d.get("c", 0.0)))
        if kind == "mapped":
            name = d["function"]
            if name not in MAPPED_FUNCTIONS:
                raise ConfigError(f"unknown mapped function {name!r}", field="process.function")
            fn, dim = MAPPED_FUNCTIONS[name]
            return Mapped(spec_from_dict(d["inner"]), fn, dim, name)
        if kind == "compensated":
            return Compensated(spec_from_dict(d["inner"]), adaptation_from_dict(d["drift"]))
    except KeyError as exc:
        raise ConfigError(f"process {kind!r} is missing {exc.args[0]!r}",
                          field=f"process.{exc.args[0]}") from None
    except InvalidParameter as exc:
        raise ConfigError(str(exc), field="process") from None
    raise ConfigError(f"unknown process kind {kind!r}", field="process.kind")
