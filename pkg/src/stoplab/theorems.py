"""Verification harness: finite-scale checks of stopping-derivative identities.

Each check estimates both sides of an identity (or an estimate and its closed
form) on a shared bundle sample and compares them inside a band

    |left - right| <= max(tol_abs, z * combined stderr)

at the finest scale and at the Richardson extrapolation.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .condest import BundleSample, sample_bundles
from .errors import (InsufficientIntrinsicTime, InvalidParameter, NonPositiveRate,
                     ScenarioInvalid, StoplabError)
from .paths import SamplePath, TimeGrid
from .processes import (AbsAffine, Adaptation, BrownianMotion, Constant, CorrelatedBM,
                        ItoProcess, Linear, Mapped, Negated, ProcessSpec,
                        RunningMaxBelow, Sqrt, Staircase, Stopped, simulate_block)
from .stats import ks_normal, ks_two_sample, normal_cdf, pooled_stderr
from .stopderiv import (DerivEstimate, ShrinkFamily, _clean, characteristic_at,
                        check_degenerate, drift_at)
from .stopping import AtTime, Debut, FirstExit, Min, OffsetFromS, StoppingRule, realize_time_change

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"

VARIANCE_VARIANTS = ("cond_var", "rel_second_moment", "projected_centre")

# separate generator streams for the two samples of a distribution comparison
STREAM_SAMPLE_A = 10
STREAM_SAMPLE_B = 11
STREAM_SPOT = 12


class RuleId(str, enum.Enum):
    LINEARITY = "linearity"
    PRODUCT_RULE = "product_rule"
    CHAIN_RULE = "chain_rule"
    TIME_CHANGE_RULE = "time_change_rule"
    ITO1D_DRIFT = "ito1d_drift"
    ITO1D_VAR = "ito1d_var"
    ITOND_DRIFT = "itond_drift"
    ITOND_VAR = "itond_var"
    VARIANCE_SUM = "variance_sum"
    PRODUCT_DRIFT = "product_drift"
    VARIANCE_PRESERVED = "variance_preserved"
    KILL_DRIFT = "kill_drift"
    STOPPED_ZERO_DRIFT = "stopped_zero_drift"


IDENTITIES = {
    RuleId.LINEARITY: "E'(aX + cY) = a E'X + c E'Y",
    RuleId.PRODUCT_RULE: "(FG)' = F[S] G' + G[S] F'",
    RuleId.CHAIN_RULE: "(f o F)' = f'(F[S]) F'",
    RuleId.TIME_CHANGE_RULE: "(F o R)' = F' D_S",
    RuleId.ITO1D_DRIFT: "E'f(X) = f'(X_S) E'X + f''(X_S) Var'X / 2",
    RuleId.ITO1D_VAR: "Var'f(X) = f'(X_S)^2 Var'X",
    RuleId.ITOND_DRIFT: "E'f(X) = grad f . E'X + tr(H Cov') / 2",
    RuleId.ITOND_VAR: "Var'f(X) = grad f' Cov' grad f",
    RuleId.VARIANCE_SUM: "Var'(X + Y) = Var'X + 2 Cov'(X, Y) + Var'Y",
    RuleId.PRODUCT_DRIFT: "E'(XY) = X_S E'Y + Y_S E'X + Cov'(X, Y)",
    RuleId.VARIANCE_PRESERVED: "Var'(X + Y) = Var'X for right path-differentiable Y",
    RuleId.KILL_DRIFT: "E'(X - int B) = 0",
    RuleId.STOPPED_ZERO_DRIFT: "E'(X^T) = 0 for zero-drift X",
}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _se(x) -> float:
    x = float(x)
    return 0.0 if not math.isfinite(x) else x


@dataclass
class Comparison:
    """One ``left == right`` assertion, at the finest scale and extrapolated."""

    name: str
    left: float
    right: float
    left_stderr: float = 0.0
    right_stderr: float = 0.0
    left_finest: Optional[float] = None
    right_finest: Optional[float] = None
    left_finest_stderr: float = 0.0
    right_finest_stderr: float = 0.0
    tol_abs: float = 0.02
    z: float = 3.0
    expected: Optional[float] = None

    @classmethod
    def of(cls, name, left, right, *, tol_abs: float, z: float,
           expected: Optional[float] = None) -> "Comparison":
        """Build from DerivEstimates or plain numbers (a number has zero stderr)."""
        def parts(e):
            if isinstance(e, DerivEstimate):
                return (e.extrapolated, _se(e.extrapolated_stderr), e.finest,
                        _se(e.finest_stderr))
            return float(e), 0.0, float(e), 0.0
        lv, ls, lf, lfs = parts(left)
        rv, rs, rf, rfs = parts(right)
        return cls(name, lv, rv, ls, rs, lf, rf, lfs, rfs, tol_abs, z, expected)

    @property
    def stderr(self) -> float:
        return math.hypot(self.left_stderr, self.right_stderr)

    @property
    def finest_stderr(self) -> float:
        return math.hypot(self.left_finest_stderr, self.right_finest_stderr)

    @property
    def band(self) -> float:
        return max(self.tol_abs, self.z * self.stderr)

    def _pairs(self):
        yield self.left, self.right, self.stderr
        if self.left_finest is not None:
            yield self.left_finest, self.right_finest, self.finest_stderr

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for a, b, s in self._pairs() for v in (a, b))

    @property
    def passed(self) -> bool:
        return self.finite and all(abs(a - b) <= max(self.tol_abs, self.z * s)
                                   for a, b, s in self._pairs())

    @property
    def verdict(self) -> str:
        if not self.finite:
            return INCONCLUSIVE
        return PASS if self.passed else FAIL

    def to_dict(self) -> dict:
        return {"name": self.name, "left": self.left, "right": self.right,
                "left_stderr": self.left_stderr, "right_stderr": self.right_stderr,
                "left_finest": self.left_finest, "right_finest": self.right_finest,
                "left_finest_stderr": self.left_finest_stderr,
                "right_finest_stderr": self.right_finest_stderr,
                "stderr": self.stderr, "band": self.band, "verdict": self.verdict,
                "expected": self.expected}


@dataclass
class CheckReport:
    id: str
    comparisons: list
    seed: int
    runtime_s: float = 0.0
    tolerances: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    verdict_override: Optional[str] = None

    @property
    def verdict(self) -> str:
        if self.verdict_override is not None:
            return self.verdict_override
        if not self.comparisons:
            return INCONCLUSIVE
        vs = [c.verdict for c in self.comparisons]
        if FAIL in vs:
            return FAIL
        if INCONCLUSIVE in vs:
            return INCONCLUSIVE
        return PASS

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    @property
    def primary(self) -> Optional[Comparison]:
        """The first failing comparison, else the first one."""
        for c in self.comparisons:
            if c.verdict != PASS:
                return c
        return self.comparisons[0] if self.comparisons else None

    def comparison(self, name: str) -> Comparison:
        for c in self.comparisons:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def left(self) -> float:
        p = self.primary
        return math.nan if p is None else p.left

    @property
    def right(self) -> float:
        p = self.primary
        return math.nan if p is None else p.right

    @property
    def stderr(self) -> float:
        p = self.primary
        return math.nan if p is None else p.stderr

    def to_dict(self, include_runtime: bool = False) -> dict:
        p = self.primary
        z = p.z if p is not None else 3.0
        ci = None
        if p is not None:
            ci = {"left": [p.left - z * p.left_stderr, p.left + z * p.left_stderr],
                  "right": [p.right - z * p.right_stderr, p.right + z * p.right_stderr]}
        return _clean({
            "id": self.id, "verdict": self.verdict, "left": self.left, "right": self.right,
            "stderr": self.stderr, "ci": ci, "tolerances": self.tolerances, "seed": self.seed,
            "runtime_s": self.runtime_s if include_runtime else None,
            "comparisons": [c.to_dict() for c in self.comparisons],
            "details": self.details,
        })


def _timed(fn):
    """Decorator filling ``runtime_s`` of the returned report."""
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        rep = fn(*args, **kwargs)
        rep.runtime_s = time.perf_counter() - t0
        return rep
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    wrapper.__wrapped__ = fn
    return wrapper


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Sizes, grid, anchor and tolerances shared by the checks.

    ``process`` overrides the canonical process of an identity check;
    ``n_paths`` sizes the checks that work on plain path ensembles.
    """

    seed: int = 42
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(1e-4, 10_000))
    anchor: StoppingRule = AtTime(0.5)
    family: ShrinkFamily = field(default_factory=ShrinkFamily)
    n_outer: int = 200
    M: int = 1000
    threads: int = 1
    z: float = 3.0
    tol_abs: float = 0.02
    n_paths: int = 2000
    process: Optional[ProcessSpec] = None

    def __post_init__(self):
        for name in ("n_outer", "M", "threads", "n_paths"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be positive", field=name)
        if not self.z > 0 or not self.tol_abs >= 0:
            raise InvalidParameter("z must be positive and tol_abs non-negative")

    def tolerances(self, **extra) -> dict:
        return {"z": self.z, "tol_abs": self.tol_abs, **extra}

    def sample(self, spec, observables, *, anchor=None, rules=None, integrand=None,
               at_anchor=(), driver=0, seed=None) -> BundleSample:
        smp = sample_bundles(spec, self.grid, self.anchor if anchor is None else anchor,
                             self.family.rules() if rules is None else rules, self.n_outer,
                             self.M, self.seed if seed is None else seed,
                             observables=observables, driver=driver, integrand=integrand,
                             threads=self.threads, at_anchor=at_anchor)
        check_degenerate(smp)
        return smp


def _est(sc: Scenario, ratios, label="") -> DerivEstimate:
    return DerivEstimate.from_ratios(sc.family.scales, ratios, sc.family.factor, label=label)


# per-path conditional moments on a sample; everything is (N, J)

def _mean(smp, q):
    return smp.obs_tm[..., q].mean(axis=-1)


def _x_s(smp, q):
    return smp.obs_s[:, q][:, None]


def _drift(smp, q):
    return (_mean(smp, q) - _x_s(smp, q)) / smp.denominator


def _centre(smp, q, variant):
    x = smp.obs_tm[..., q]
    if variant == "cond_var":
        return x.mean(axis=-1, keepdims=True)
    if variant == "rel_second_moment":
        return _x_s(smp, q)[..., None]
    if variant == "projected_centre":
        return _x_s(smp, q)[..., None] + _drift(smp, q)[..., None] * smp.elapsed
    raise InvalidParameter(f"unknown variance variant {variant!r}")


def _second(smp, i, j, variant="cond_var"):
    """Second-moment rate of coordinates i, j about the variant's centre."""
    di = smp.obs_tm[..., i] - _centre(smp, i, variant)
    dj = smp.obs_tm[..., j] - _centre(smp, j, variant)
    return (di * dj).mean(axis=-1) / smp.denominator


def _obs(fn, name):
    fn.__name__ = name
    return fn


def _require_dim(spec, dim, rule):
    if spec.dim != dim:
        raise ScenarioInvalid(f"{rule} needs a {dim}-dimensional process, got {spec.dim}",
                              rule=str(rule), dim=spec.dim)


# ---------------------------------------------------------------------------
# identities
# ---------------------------------------------------------------------------

def _linearity(sc):
    spec = sc.process or Mapped(CorrelatedBM.pair(0.3, (0.5, -0.5)),
                                lambda x, t: x + np.stack([0.5 * t, -0.3 * t], axis=-1),
                                2, "drifted_pair")
    _require_dim(spec, 2, RuleId.LINEARITY)

    def a_of(x_s):
        return 1.0 + x_s[..., 0] ** 2
    c = -0.5
    obs = [_obs(lambda x, t, xs: x[..., 0], "x"), _obs(lambda x, t, xs: x[..., 1], "y"),
           _obs(lambda x, t, xs: a_of(xs) * x[..., 0] + c * x[..., 1], "ax_plus_cy")]
    smp = sc.sample(spec, obs)
    a = a_of(smp.x_s)[:, None]
    left = _drift(smp, 2)
    right = a * _drift(smp, 0) + c * _drift(smp, 1)
    expected = None
    if sc.process is None:
        expected = float(np.mean(a_of(smp.x_s) * 0.5 + c * -0.3))
    return [("drift", left, right, expected)]


def _product_rule(sc):
    spec = sc.process or BrownianMotion(2.0)
    _require_dim(spec, 1, RuleId.PRODUCT_RULE)
    anchor = sc.anchor if sc.process is not None else AtTime(0.0)
    smp = sc.sample(spec, [_obs(lambda x, t, xs: x[..., 0], "x")], anchor=anchor)
    m, xs, den = _mean(smp, 0), _x_s(smp, 0), smp.denominator
    left = (m * m - xs * xs) / den
    right = 2 * xs * (m - xs) / den
    return [("product", left, right, 0.0 if sc.process is None else None)]


def _chain_rule(sc):
    spec = sc.process or ItoProcess(0.0, Constant(0.3), Constant(0.7))
    _require_dim(spec, 1, RuleId.CHAIN_RULE)
    smp = sc.sample(spec, [_obs(lambda x, t, xs: x[..., 0], "x")])
    m, xs, den = _mean(smp, 0), _x_s(smp, 0), smp.denominator
    left = (np.exp(m) - np.exp(xs)) / den
    right = np.exp(xs) * (m - xs) / den
    expected = None if sc.process is not None else float(np.mean(np.exp(smp.x_s[:, 0]) * 0.3))
    return [("chain", left, right, expected)]


TIME_CHANGE_RATE = 2.0


def _time_change_rule(sc):
    """Linear clock R = R_S + c (s - S): stops S + c h in real time against S + h."""
    spec = sc.process or ItoProcess(0.0, Constant(0.3), Constant(0.7))
    _require_dim(spec, 1, RuleId.TIME_CHANGE_RULE)
    c = TIME_CHANGE_RATE
    hs = sc.family.scales
    rules = [OffsetFromS(h) for h in hs] + [OffsetFromS(c * h) for h in hs]
    smp = sc.sample(spec, [_obs(lambda x, t, xs: x[..., 0], "x")], rules=rules)
    J = len(hs)
    m, xs, den = _mean(smp, 0), _x_s(smp, 0), smp.denominator
    # clock derivative from the realised grid offsets
    d_s = den[:, J:] / den[:, :J]
    left = (m[:, J:] - xs) / den[:, :J]
    right = d_s * (m[:, :J] - xs) / den[:, :J]
    return [("time_change", left, right, c * 0.3 if sc.process is None else None)]


def _gbm():
    return ItoProcess(1.0, Linear(0.5), Linear(0.4))


def _ito1d_sample(sc):
    spec = sc.process or _gbm()
    _require_dim(spec, 1, "ito1d")
    if sc.process is None:
        f, f1, f2 = np.log, (lambda x: 1 / x), (lambda x: -1 / x ** 2)
    else:
        f, f1, f2 = np.exp, np.exp, np.exp
    obs = [_obs(lambda x, t, xs: x[..., 0], "x"), _obs(lambda x, t, xs: f(x[..., 0]), "f")]
    return sc.sample(spec, obs), f1, f2


def _ito1d_drift(sc):
    smp, f1, f2 = _ito1d_sample(sc)
    xs = _x_s(smp, 0)
    left = _drift(smp, 1)
    right = f1(xs) * _drift(smp, 0) + 0.5 * f2(xs) * _second(smp, 0, 0)
    return [("drift", left, right, 0.42 if sc.process is None else None)]


def _ito1d_var(sc):
    smp, f1, _ = _ito1d_sample(sc)
    xs = _x_s(smp, 0)
    out = []
    for v in VARIANCE_VARIANTS:
        left = _second(smp, 1, 1, v)
        right = f1(xs) ** 2 * _second(smp, 0, 0, v)
        out.append((f"variance[{v}]", left, right, 0.16 if sc.process is None else None))
    return out


def _itond_sample(sc):
    spec = sc.process or CorrelatedBM(np.eye(2), (1.0, -0.5))
    _require_dim(spec, 2, "itond")
    obs = [_obs(lambda x, t, xs: x[..., 0], "x"), _obs(lambda x, t, xs: x[..., 1], "y"),
           _obs(lambda x, t, xs: x[..., 0] * x[..., 1], "xy")]
    return sc.sample(spec, obs)


def _itond_drift(sc):
    smp = _itond_sample(sc)
    x, y = _x_s(smp, 0), _x_s(smp, 1)
    left = _drift(smp, 2)
    # grad f = (y, x); Hessian off-diagonal 1
    right = y * _drift(smp, 0) + x * _drift(smp, 1) + _second(smp, 0, 1)
    return [("drift", left, right, 0.0 if sc.process is None else None)]


def _itond_var(sc):
    smp = _itond_sample(sc)
    x, y = _x_s(smp, 0), _x_s(smp, 1)
    out = []
    for v in VARIANCE_VARIANTS:
        left = _second(smp, 2, 2, v)
        right = (y * y * _second(smp, 0, 0, v) + x * x * _second(smp, 1, 1, v)
                 + 2 * x * y * _second(smp, 0, 1, v))
        exp = float(np.mean(smp.x_s[:, 0] ** 2 + smp.x_s[:, 1] ** 2)) \
            if sc.process is None else None
        out.append((f"variance[{v}]", left, right, exp))
    return out


def _pair_sample(sc, fn, name):
    spec = sc.process or CorrelatedBM.pair(0.7, (1.0, 2.0))
    _require_dim(spec, 2, name)
    obs = [_obs(lambda x, t, xs: x[..., 0], "x"), _obs(lambda x, t, xs: x[..., 1], "y"),
           _obs(fn, name)]
    return sc.sample(spec, obs)


def _variance_sum(sc):
    smp = _pair_sample(sc, lambda x, t, xs: x[..., 0] + x[..., 1], "sum")
    out = []
    for v in VARIANCE_VARIANTS:
        left = _second(smp, 2, 2, v)
        right = _second(smp, 0, 0, v) + 2 * _second(smp, 0, 1, v) + _second(smp, 1, 1, v)
        out.append((f"variance[{v}]", left, right, 3.4 if sc.process is None else None))
    return out


def _product_drift(sc):
    smp = _pair_sample(sc, lambda x, t, xs: x[..., 0] * x[..., 1], "product")
    left = _drift(smp, 2)
    right = (_x_s(smp, 0) * _drift(smp, 1) + _x_s(smp, 1) * _drift(smp, 0)
             + _second(smp, 0, 1))
    return [("drift", left, right, 0.7 if sc.process is None else None)]


def _variance_preserved(sc):
    spec = sc.process or BrownianMotion(0.0)
    _require_dim(spec, 1, RuleId.VARIANCE_PRESERVED)
    obs = [_obs(lambda x, t, xs: x[..., 0], "x"),
           _obs(lambda x, t, xs: x[..., 0] + np.asarray(t) ** 2, "x_plus_t2")]
    smp = sc.sample(spec, obs)
    out = []
    for v in VARIANCE_VARIANTS:
        out.append((f"variance[{v}]", _second(smp, 1, 1, v), _second(smp, 0, 0, v),
                    1.0 if sc.process is None else None))
    return out


def _kill_drift(sc):
    spec = sc.process or ItoProcess(0.5, Linear(-1.0, 1.0), Constant(0.5))
    if not isinstance(spec, ItoProcess):
        raise ScenarioInvalid("kill_drift needs an Ito process carrying its drift adaptation")
    obs = [_obs(lambda x, t, xs: x[..., 0], "x")]
    smp = sc.sample(spec, obs, integrand=spec.drift)
    # per path: (E[X_{T-} - int_S^{T-} b] - X_S) / E[T - S]
    left = (smp.obs_tm[..., 0] - smp.integral).mean(axis=-1) - _x_s(smp, 0)
    left = left / smp.denominator
    return [("drift", left, np.zeros_like(left), 0.0)]


def _stopped_zero_drift(sc):
    inner = sc.process or BrownianMotion(0.0)
    _require_dim(inner, 1, RuleId.STOPPED_ZERO_DRIFT)
    spec = Stopped(inner, Debut(float(inner.base().initial()[0]) + 0.3))
    smp = sc.sample(spec, [_obs(lambda x, t, xs: x[..., 0], "x")])
    left = _drift(smp, 0)
    return [("drift", left, np.zeros_like(left), 0.0)]


_RULES = {
    RuleId.LINEARITY: _linearity,
    RuleId.PRODUCT_RULE: _product_rule,
    RuleId.CHAIN_RULE: _chain_rule,
    RuleId.TIME_CHANGE_RULE: _time_change_rule,
    RuleId.ITO1D_DRIFT: _ito1d_drift,
    RuleId.ITO1D_VAR: _ito1d_var,
    RuleId.ITOND_DRIFT: _itond_drift,
    RuleId.ITOND_VAR: _itond_var,
    RuleId.VARIANCE_SUM: _variance_sum,
    RuleId.PRODUCT_DRIFT: _product_drift,
    RuleId.VARIANCE_PRESERVED: _variance_preserved,
    RuleId.KILL_DRIFT: _kill_drift,
    RuleId.STOPPED_ZERO_DRIFT: _stopped_zero_drift,
}


@_timed
def check_identity(rule, scenario: Optional[Scenario] = None) -> CheckReport:
    """Estimate both sides of ``rule`` on one shared sample and compare them.

    Without ``scenario.process`` the rule's canonical process is used and the
    closed-form limit is recorded as ``expected`` on each comparison.
    """
    sc = scenario or Scenario()
    try:
        rule = RuleId(rule)
    except ValueError:
        raise InvalidParameter(f"unknown rule {rule!r}") from None
    comps = []
    ests = {}
    for name, left, right, expected in _RULES[rule](sc):
        le, re_ = _est(sc, left, f"left:{name}"), _est(sc, right, f"right:{name}")
        ests[name] = (le, re_)
        comps.append(Comparison.of(name, le, re_, tol_abs=sc.tol_abs, z=sc.z,
                                   expected=expected))
    details = {"identity": IDENTITIES[rule],
               "left_pooled": {k: v[0].pooled.tolist() for k, v in ests.items()},
               "right_pooled": {k: v[1].pooled.tolist() for k, v in ests.items()},
               "scales": sc.family.scales.tolist()}
    return CheckReport(rule.value, comps, sc.seed, tolerances=sc.tolerances(),
                       details=details)


# ---------------------------------------------------------------------------
# theorem checks
# ---------------------------------------------------------------------------

def _ensemble_chunks(spec, grid, n, seed, stream, chunk=250):
    """Yield (observed, latent) blocks of an ensemble without holding it all in memory."""
    for lo in range(0, n, chunk):
        yield simulate_block(spec, grid, seed, range(lo, min(n, lo + chunk)), stream)


def optional_stopping_gap(spec: ProcessSpec, grid: TimeGrid, rule: StoppingRule, n_paths: int,
                          seed: int, stream: int = STREAM_SPOT):
    """Mean and stderr of X_T - X_0 over an ensemble, T realised by ``rule`` on the grid."""
    gaps = []
    for obs, _ in _ensemble_chunks(spec, grid, n_paths, seed, stream):
        v = obs[:, :, 0]
        idx, _st = rule._realize(v, 0, grid, v[:, :1])
        gaps.append(v[np.arange(v.shape[0]), idx] - v[:, 0])
    g = np.concatenate(gaps)
    return float(g.mean()), float(pooled_stderr(g))


@_timed
def check_zero_drift(spec: ProcessSpec, anchors: Sequence[StoppingRule],
                     scenario: Optional[Scenario] = None, *,
                     spot_checks: Optional[bool] = None, coord: int = 0) -> CheckReport:
    """Drift at every anchor against 0, plus optional-stopping spot checks.

    Spot checks compare E[X_{T ^ b}] with X_0 for T the debut of X_0 + 0.5 and
    b the grid horizon; they run by default for random processes only.
    """
    sc = scenario or Scenario()
    comps = []
    details = {}
    for k, anchor in enumerate(anchors):
        est = drift_at(spec, anchor, sc.family, sc.n_outer, sc.M, sc.seed, sc.grid,
                       coord=coord, threads=sc.threads)
        name = f"drift@{k}:{anchor.describe()['kind']}"
        comps.append(Comparison.of(name, est, 0.0, tol_abs=sc.tol_abs, z=sc.z, expected=0.0))
        details[name] = {"pooled": est.pooled.tolist(), "anchor": anchor.describe()}
    if spot_checks is None:
        spot_checks = spec.base().noise_dim > 0
    if spot_checks and spec.dim == 1:
        x0 = float(simulate_block(spec, TimeGrid(sc.grid.dt, 1), sc.seed, [0])[0][0, 0, 0])
        rule = Min([Debut(x0 + 0.5), AtTime(sc.grid.horizon)])
        m, se = optional_stopping_gap(spec, sc.grid, rule, sc.n_paths, sc.seed)
        comps.append(Comparison("optional_stopping", m, 0.0, se, 0.0, tol_abs=sc.tol_abs,
                                z=sc.z, expected=0.0))
    return CheckReport("zero_drift", comps, sc.seed, tolerances=sc.tolerances(),
                       details=details)


@_timed
def check_ftc(C0: float, b, sigma, anchors: Sequence[StoppingRule],
              scenario: Optional[Scenario] = None) -> CheckReport:
    """Simulate ``C0 + int b + int sigma dW`` and recover b and sigma^2 at each anchor.

    The right-hand sides are b and sigma^2 evaluated on each outer prefix at S;
    every variance variant is compared separately.
    """
    sc = scenario or Scenario()
    b, sigma = _adapt(b), _adapt(sigma)
    spec = ItoProcess(float(C0), b, sigma)
    comps = []
    details = {}
    obs = [_obs(lambda x, t, xs: x[..., 0], "x")]
    for k, anchor in enumerate(anchors):
        smp = sc.sample(spec, obs, anchor=anchor, at_anchor=(b, sigma))
        b_s = smp.anchor_values[:, 0][:, None] * np.ones(smp.idx.shape[1])
        v_s = smp.anchor_values[:, 1][:, None] ** 2 * np.ones(smp.idx.shape[1])
        tag = f"@{k}"
        d = _est(sc, _drift(smp, 0))
        comps.append(Comparison.of("drift" + tag, d, _est(sc, b_s), tol_abs=sc.tol_abs,
                                   z=sc.z))
        for v in VARIANCE_VARIANTS:
            e = _est(sc, _second(smp, 0, 0, v))
            comps.append(Comparison.of(f"variance[{v}]{tag}", e, _est(sc, v_s),
                                       tol_abs=sc.tol_abs, z=sc.z))
        details["anchor" + tag] = anchor.describe()
        details["drift_pooled" + tag] = d.pooled.tolist()
    return CheckReport("ftc", comps, sc.seed, tolerances=sc.tolerances(), details=details)


def _adapt(x) -> Adaptation:
    if isinstance(x, Adaptation):
        return x
    if isinstance(x, (int, float)):
        return Constant(float(x))
    raise InvalidParameter(f"cannot use {x!r} as an adaptation")


def realized_qv(values: np.ndarray) -> np.ndarray:
    """Sum of squared increments along the last axis."""
    d = np.diff(np.asarray(values, dtype=float), axis=-1)
    return np.sum(d * d, axis=-1)


@_timed
def check_quadratic_variation(spec: ProcessSpec, a, scenario: Optional[Scenario] = None, *,
                              t: Optional[float] = None, n_paths: int = 100,
                              anchors: Sequence[StoppingRule] = (),
                              rel_tol: float = 0.05) -> CheckReport:
    """Realised QV on [0, t] against the path integral of ``a``, then the drift of X^2 - int a.

    The QV comparison uses a relative floor ``rel_tol * |int a|``.
    """
    sc = scenario or Scenario()
    a = _adapt(a)
    t = sc.grid.horizon if t is None else t
    grid = TimeGrid(sc.grid.dt, sc.grid.steps_for(t))
    obs, _ = simulate_block(spec, grid, sc.seed, range(n_paths))
    v = obs[:, :, 0]
    qv = realized_qv(v)
    rate = a.along(v, grid)
    integral = rate[:, :-1].sum(axis=1) * grid.dt
    diff = qv - integral
    right = float(integral.mean())
    comps = [Comparison("qv", float(qv.mean()), right, float(pooled_stderr(diff)), 0.0,
                        tol_abs=max(rel_tol * abs(right), 1e-3), z=sc.z,
                        expected=right)]
    details = {"qv_mean": float(qv.mean()), "integral_mean": right, "n_paths": n_paths,
               "t": grid.horizon}
    sq = [_obs(lambda x, t, xs: x[..., 0] ** 2, "x2")]
    for k, anchor in enumerate(anchors):
        smp = sc.sample(spec, sq, anchor=anchor, integrand=a)
        r = ((smp.obs_tm[..., 0] - smp.integral).mean(axis=-1) - _x_s(smp, 0)) / smp.denominator
        comps.append(Comparison.of(f"compensated_square_drift@{k}", _est(sc, r), 0.0,
                                   tol_abs=sc.tol_abs, z=sc.z, expected=0.0))
    return CheckReport("quadratic_variation", comps, sc.seed, tolerances=sc.tolerances(
        rel_tol=rel_tol), details=details)


# ---------------------------------------------------------------------------
# time change
# ---------------------------------------------------------------------------

def phi_apply(a, f: SamplePath, s_max: Optional[float] = None, dt: Optional[float] = None,
              on_exhaustion: str = "raise", require_positive: bool = True) -> SamplePath:
    """``Phi_a(f)(s) = f(R_s)`` on a grid of intrinsic times ``0, dt, ..., s_max``.

    ``R`` inverts the clock ``int_0^t a(f, u) du``. With ``s_max`` beyond the
    clock's total, ``on_exhaustion="raise"`` raises InsufficientIntrinsicTime and
    ``"freeze"`` holds the last value.
    """
    if on_exhaustion not in ("raise", "freeze"):
        raise InvalidParameter(f"on_exhaustion must be 'raise' or 'freeze', got {on_exhaustion!r}")
    a = _adapt(a)
    tc = realize_time_change(a, f, require_positive=require_positive)
    dt = f.grid.dt if dt is None else float(dt)
    if s_max is None:
        s_max = tc.total
    if s_max > tc.total * (1 + 1e-12) and on_exhaustion == "raise":
        raise InsufficientIntrinsicTime(
            f"intrinsic clock reaches {tc.total:.6g} < requested {s_max:.6g}",
            total=tc.total, requested=s_max)
    n = max(1, int(math.floor(s_max / dt + 1e-9)))
    s = np.arange(n + 1) * dt
    return SamplePath(TimeGrid(dt, n), f.values[tc.index_at(s)])


def phi_invert(a, g: SamplePath, dt: Optional[float] = None,
               n_steps: Optional[int] = None) -> SamplePath:
    """Rebuild ``f`` from ``g = Phi_a(f)`` by running forward: ``f(t) = g(int_0^t a(f, u) du)``.

    ``g`` is read with linear interpolation; the output stops where the clock
    leaves ``g``'s grid (or after ``n_steps``).
    """
    a = _adapt(a)
    dt = g.grid.dt if dt is None else float(dt)
    gv, gt, g_end = g.values, g.grid.times, g.grid.horizon
    limit = n_steps if n_steps is not None else 10 ** 9
    vals = [float(gv[0])]
    cum = 0.0
    k = 0
    buf = np.empty(1024)
    buf[0] = vals[0]
    while k < limit:
        if k + 1 >= buf.size:
            buf = np.concatenate([buf, np.empty(buf.size)])
        rate = float(np.asarray(a(buf[None, : k + 1], k * dt)).reshape(-1)[0])
        if not rate > 0:
            raise InvalidParameter(f"rate {rate} at step {k} is not positive")
        cum += rate * dt
        if cum > g_end * (1 + 1e-12):
            break
        buf[k + 1] = float(np.interp(cum, gt, gv))
        k += 1
    if k == 0:
        raise InsufficientIntrinsicTime("g is too short for a single step", horizon=g_end)
    return SamplePath(TimeGrid(dt, k), buf[: k + 1].copy())


def levy_increments(spec: ProcessSpec, a, grid: TimeGrid, n_paths: int, seed: int,
                    s_max: int, on_exhaustion: str = "raise",
                    require_positive: bool = True) -> np.ndarray:
    """W = Phi_a(X) read at intrinsic times 0, 1, ..., s_max; returns (n_paths, s_max + 1)."""
    a = _adapt(a)
    out = np.empty((n_paths, s_max + 1))
    s = np.arange(s_max + 1, dtype=float)
    row = 0
    for obs, _ in _ensemble_chunks(spec, grid, n_paths, seed, STREAM_SAMPLE_A):
        v = obs[:, :, 0]
        rate = a.along(v, grid)
        used = rate[:, :-1]
        bad = used <= 0 if require_positive else used < 0
        if np.any(bad) or not np.all(np.isfinite(used)):
            raise NonPositiveRate("rate is not positive along some path")
        cum = np.concatenate([np.zeros((v.shape[0], 1)), np.cumsum(used, axis=1) * grid.dt],
                             axis=1)
        total = cum[:, -1]
        if on_exhaustion == "raise" and np.any(total < s_max):
            i = int(np.argmax(total < s_max))
            raise InsufficientIntrinsicTime(
                f"path {row + i} reaches intrinsic time {total[i]:.4g} < {s_max}",
                path=row + i, total=float(total[i]), requested=s_max)
        for i in range(v.shape[0]):
            k = np.minimum(np.searchsorted(cum[i], s, side="left"), grid.n_steps)
            out[row + i] = v[i, k]
        row += v.shape[0]
    return out


@_timed
def check_levy_time_change(spec: ProcessSpec, a, scenario: Optional[Scenario] = None, *,
                           s_max: int = 4, horizon: Optional[float] = None, dt: float = 1e-3,
                           n_paths: Optional[int] = None, alpha: float = 0.01,
                           corr_tol: float = 0.05, var_rel_tol: float = 0.10,
                           on_exhaustion: str = "raise",
                           require_positive: bool = True) -> CheckReport:
    """W = Phi_a(X) should be a standard Brownian motion in intrinsic time.

    (i) unit increments pass a KS test against N(0, 1), (ii) adjacent
    increments are uncorrelated within ``corr_tol``, (iii) Var W_s is within
    ``var_rel_tol`` of s for s = 1..s_max.
    """
    sc = scenario or Scenario()
    n = sc.n_paths if n_paths is None else n_paths
    a = _adapt(a)
    if horizon is None:
        lo = _rate_floor(a)
        horizon = (s_max / lo if lo else 4.0 * s_max) * 1.05
    grid = TimeGrid.from_horizon(dt, horizon)
    w = levy_increments(spec, a, grid, n, sc.seed, s_max, on_exhaustion, require_positive)
    w = w - w[:, :1]
    inc = np.diff(w, axis=1)
    ks = ks_normal(inc.ravel(), 0.0, 1.0, alpha)
    comps = [Comparison("ks_statistic", ks.statistic, 0.0, tol_abs=ks.critical, z=sc.z)]
    if s_max >= 2:
        r = float(np.corrcoef(inc[:, :-1].ravel(), inc[:, 1:].ravel())[0, 1])
        comps.append(Comparison("adjacent_correlation", r, 0.0, tol_abs=corr_tol, z=sc.z,
                                expected=0.0))
    variances = w[:, 1:].var(axis=0)
    # normal-theory standard error of a sample variance
    var_se = variances * math.sqrt(2.0 / max(n - 1, 1))
    for s in range(1, s_max + 1):
        comps.append(Comparison(f"variance@{s}", float(variances[s - 1]), float(s),
                                float(var_se[s - 1]), tol_abs=var_rel_tol * s, z=sc.z,
                                expected=float(s)))
    details = {"ks_statistic": ks.statistic, "ks_critical": ks.critical, "ks_reject": ks.reject,
               "n_increments": int(inc.size), "variances": variances.tolist(),
               "horizon": grid.horizon, "dt": dt}
    return CheckReport("levy_time_change", comps, sc.seed,
                       tolerances=sc.tolerances(alpha=alpha, corr_tol=corr_tol,
                                                var_rel_tol=var_rel_tol),
                       details=details)


def _rate_floor(a) -> Optional[float]:
    """A known positive lower bound of the rate, if the adaptation exposes one."""
    if isinstance(a, Constant):
        return a.value if a.value > 0 else None
    lo = getattr(a, "lo", None)
    if lo is not None and np.isfinite(lo) and lo > 0:
        return float(lo)
    return None


# ---------------------------------------------------------------------------
# laws
# ---------------------------------------------------------------------------

def marginal_samples(spec: ProcessSpec, t: float, n: int, seed: int, stream: int,
                     dt: float = 1e-3) -> np.ndarray:
    grid = TimeGrid.from_horizon(dt, t)
    return np.concatenate([obs[:, -1, 0] for obs, _ in
                           _ensemble_chunks(spec, grid, n, seed, stream)])


@_timed
def check_distinct_distributions(specA: ProcessSpec, specB: ProcessSpec, t: float,
                                 n_samples: int, scenario: Optional[Scenario] = None, *,
                                 dt: float = 1e-3, alpha: float = 0.01,
                                 compare_rates: bool = False,
                                 rate_anchor: StoppingRule = AtTime(0.5)) -> CheckReport:
    """Passes when a two-sample KS test separates the marginals at ``t``.

    With ``compare_rates`` the drift and variance rate of both processes at
    ``rate_anchor`` must also agree (independent samples, z-band).
    """
    sc = scenario or Scenario()
    xa = marginal_samples(specA, t, n_samples, sc.seed, STREAM_SAMPLE_A, dt)
    xb = marginal_samples(specB, t, n_samples, sc.seed, STREAM_SAMPLE_B, dt)
    ks = ks_two_sample(xa, xb, alpha)
    details = {"ks_statistic": ks.statistic, "ks_critical": ks.critical,
               "ks_reject": ks.reject, "n": n_samples, "t": t,
               "p_a_at_least_1": float(np.mean(xa >= 1.0)),
               "p_b_at_least_1": float(np.mean(xb >= 1.0))}
    comps = []
    if compare_rates:
        obs = [_obs(lambda x, t, xs: x[..., 0], "x")]
        sa = sc.sample(specA, obs, anchor=rate_anchor)
        sb = sc.sample(specB, obs, anchor=rate_anchor, seed=sc.seed + 1)
        comps.append(Comparison.of("drift", _est(sc, _drift(sa, 0)), _est(sc, _drift(sb, 0)),
                                   tol_abs=sc.tol_abs, z=sc.z))
        comps.append(Comparison.of("variance_rate", _est(sc, _second(sa, 0, 0)),
                                   _est(sc, _second(sb, 0, 0)), tol_abs=sc.tol_abs, z=sc.z))
    rates_ok = all(c.passed for c in comps)
    verdict = PASS if ks.reject and rates_ok else FAIL
    rep = CheckReport("distinct_distributions", comps, sc.seed,
                      tolerances=sc.tolerances(alpha=alpha), details=details,
                      verdict_override=verdict)
    # headline numbers: the KS distance against its critical value
    rep.comparisons.insert(0, Comparison("ks_statistic", ks.statistic, ks.critical, 0.0, 0.0,
                                         tol_abs=math.inf, z=sc.z))
    return rep


def reflection_hit_probability(t: float, level: float = 1.0) -> float:
    """P(sup_{s <= t} W_s >= level) = 2 (1 - Phi(level / sqrt(t)))."""
    return float(2.0 * (1.0 - normal_cdf(level / math.sqrt(t))))


# ---------------------------------------------------------------------------
# first exits and the characteristic operator
# ---------------------------------------------------------------------------

@_timed
def check_first_exit_mean(eps: float = 0.1, scenario: Optional[Scenario] = None, *,
                          dt: float = 1e-5, n_paths: int = 10_000,
                          rel_tol: float = 0.05) -> CheckReport:
    """Mean first-exit time of BM from (-eps, eps) against eps^2."""
    sc = scenario or Scenario()
    grid = TimeGrid.from_horizon(dt, 1.0)
    n_outer = max(1, n_paths // 1000)
    M = n_paths // n_outer
    smp = sample_bundles(BrownianMotion(0.0), grid, AtTime(0.0), [FirstExit(eps, 1.0)],
                         n_outer, M, sc.seed, threads=sc.threads)
    tau = smp.elapsed[:, 0, :].ravel()
    m, se = float(tau.mean()), float(pooled_stderr(tau))
    comps = [Comparison("mean_exit_time", m, eps * eps, se, 0.0,
                        tol_abs=rel_tol * eps * eps, z=0.0, expected=eps * eps)]
    details = {"n_paths": int(tau.size), "capped": int(smp.capped.sum()),
               "overshoot_corrected": (eps + 0.5826 * math.sqrt(dt)) ** 2}
    return CheckReport("first_exit_mean", comps, sc.seed,
                       tolerances=sc.tolerances(rel_tol=rel_tol), details=details)


@_timed
def check_characteristic(scenario: Optional[Scenario] = None, *, x0: float = 0.0,
                         f: Callable = np.square, generator_value: float = 1.0,
                         rel_tol: float = 0.10) -> CheckReport:
    """Stopping-limit operator of BM on ``f`` against the classical generator f''/2.

    The default ``f = x^2`` at 0 has generator value 1.
    """
    sc = scenario or Scenario()
    fam = replace(sc.family, kind="first_exit")
    est = characteristic_at(BrownianMotion(x0), f, fam, sc.n_outer, sc.M, sc.seed, sc.grid,
                            threads=sc.threads)
    comps = [Comparison.of("characteristic", est, generator_value,
                           tol_abs=rel_tol * abs(generator_value), z=sc.z,
                           expected=generator_value)]
    return CheckReport("characteristic", comps, sc.seed,
                       tolerances=sc.tolerances(rel_tol=rel_tol),
                       details={"pooled": est.pooled.tolist()})


# ---------------------------------------------------------------------------
# canonical suite
# ---------------------------------------------------------------------------

def stopped_debut_pair(level: float = 1.0):
    """W^T and -W^T for T the debut of ``level``."""
    wt = Stopped(BrownianMotion(0.0), Debut(level))
    return wt, Negated(wt)


def levy_process(a=None):
    """Zero-drift Ito process with variance rate ``a`` (default 1 + |x|/2 clipped to [0.5, 2])."""
    a = AbsAffine(1.0, 0.5, 0.5, 2.0) if a is None else a
    return ItoProcess(0.0, Constant(0.0), Sqrt(a)), a


def exit_indicator_fixture(level: float = 1.0):
    """BM stopped at the debut of ``level``, with the not-yet-hit indicator as its rate."""
    return Stopped(BrownianMotion(0.0), Debut(level)), RunningMaxBelow(level)


def _suite_checks(sc: Scenario):
    small = sc
    yield "zero_drift_brownian", lambda: _renamed(check_zero_drift(
        BrownianMotion(0.0), [AtTime(0.3), Debut(0.5)], small), "zero_drift_brownian")
    yield "zero_drift_square_minus_t", lambda: _renamed(check_zero_drift(
        Mapped(BrownianMotion(0.0), lambda x, t: x[..., 0] ** 2 - t, 1, "square_minus_t"),
        [AtTime(0.5)], small), "zero_drift_square_minus_t")
    yield "zero_drift_staircase", lambda: _renamed(check_zero_drift(
        Staircase(), [AtTime(0.0)], small), "zero_drift_staircase")
    yield "ftc", lambda: check_ftc(0.0, 0.3, 0.7, [sc.anchor], small)
    yield "ftc_path_dependent", lambda: _renamed(check_ftc(
        0.0, 0.0, AbsAffine(1.0, 0.5), [sc.anchor], small), "ftc_path_dependent")
    yield "quadratic_variation", lambda: check_quadratic_variation(
        BrownianMotion(0.0), 1.0, small, n_paths=min(100, sc.n_paths), anchors=[sc.anchor])
    spec, a = levy_process()
    yield "levy_time_change", lambda: check_levy_time_change(spec, a, small)
    wt, neg = stopped_debut_pair()
    yield "distinct_distributions", lambda: check_distinct_distributions(
        wt, neg, 20.0, sc.n_paths, small, compare_rates=True)
    yield "first_exit_mean", lambda: check_first_exit_mean(
        0.1, small, n_paths=max(1000, 5 * sc.n_paths))
    yield "characteristic", lambda: check_characteristic(small)
    for rule in RuleId:
        yield rule.value, (lambda r=rule: check_identity(r, sc))


def _renamed(rep: CheckReport, new_id: str) -> CheckReport:
    rep.id = new_id
    return rep


def suite_ids() -> list:
    return sorted(name for name, _ in _suite_checks(Scenario()))


def run_suite(scenario: Optional[Scenario] = None, only: Optional[Sequence[str]] = None,
              on_error: Optional[Callable] = None) -> list:
    """Run every canonical check (or those named in ``only``), sorted by id.

    An estimator error inside one check becomes an inconclusive report when
    ``on_error`` is None; otherwise ``on_error(name, exc)`` is called and the
    error propagates.
    """
    sc = scenario or Scenario()
    reports = []
    wanted = None if only is None else set(only)
    for name, job in _suite_checks(sc):
        if wanted is not None and name not in wanted:
            continue
        try:
            reports.append(job())
        except StoplabError as exc:
            if on_error is not None:
                on_error(name, exc)
                raise
            reports.append(CheckReport(name, [], sc.seed, details={"error": exc.record()},
                                       verdict_override=INCONCLUSIVE))
    if wanted is not None and len(reports) < len(wanted):
        missing = sorted(wanted - {r.id for r in reports})
        raise InvalidParameter(f"unknown check ids {missing}", field="checks")
    return sorted(reports, key=lambda r: r.id)
