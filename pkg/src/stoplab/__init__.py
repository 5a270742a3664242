"""Monte Carlo estimation of stopping derivatives (drift, variance rate, covariance rate)."""

from .condest import BundleSample, MomentKind, bundle_moment, sample_bundles
from .errors import StoplabError
from .paths import Ensemble, SamplePath, TimeGrid, VectorPath
from .processes import (AbsAffine, BrownianMotion, Compensated, Constant, CorrelatedBM,
                        Deterministic, ItoProcess, Linear, Mapped, Negated, Scaled, Staircase,
                        Stopped, branch_continuations, simulate, simulate_ensemble)
from .stopderiv import (DerivEstimate, ShrinkFamily, characteristic_at, covariance_matrix_at,
                        covariance_rate_at, drift_at, variance_rate_at)
from .stopping import AtTime, Debut, FirstExit, Min, OffsetFromS, PartitionGlue, realize
from .theorems import CheckReport, RuleId, Scenario, check_identity, run_suite

__version__ = "0.1.0"
