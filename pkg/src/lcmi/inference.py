"""Tests of moment inequality hypotheses and confidence sets by test inversion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .covariance import MatchingConfig, estimate_sigma
from .critical_values import (
    BoundsError,
    SimDraws,
    SimulationCache,
    TruncationBounds,
    conditional_critical_value,
    hybrid_upper_bound,
    truncation_bounds_bisection,
    truncation_bounds_closed_form,
)
from .lp import (
    FAILED,
    TRIVIAL_NULL,
    DualPolytope,
    EmptyFeasibleSet,
    max_linear_objective,
)
from .moments import NormalModel, ObservationSet, build_normal_model

METHODS = ("lfp", "lf", "conditional", "hybrid")
_ALIASES = {"cond": "conditional", "c": "conditional", "h": "hybrid"}
DEGENERATE_VAR_RTOL = 1e-10


class EmptyConfidenceSet(ValueError):
    pass


def canonical_method(method: str) -> str:
    m = _ALIASES.get(method.lower(), method.lower())
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return m


@dataclass(frozen=True)
class TestSpec:
    """Which test to run and at what level.

    ``kappa`` is the first-stage level of the hybrid test (default
    ``alpha / 10``).  ``floor_c`` is the floor below which the conditional and
    hybrid tests never reject.  ``lfp_sim_count`` defaults to ``sim_count``.
    """

    __test__ = False

    method: str = "hybrid"
    alpha: float = 0.05
    kappa: float | None = None
    floor_c: float = 100.0
    sim_count: int = 1000
    seed: int = 0
    lfp_sim_count: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.kappa is None:
            object.__setattr__(self, "kappa", self.alpha / 10.0)
        if not 0.0 < self.kappa < self.alpha:
            raise ValueError("kappa must lie in (0, alpha)")
        if self.floor_c <= 0:
            raise ValueError("floor_c must be positive")
        if self.sim_count < 1:
            raise ValueError("sim_count must be positive")

    @property
    def hybrid_level(self) -> float:
        return (self.alpha - self.kappa) / (1.0 - self.kappa)

    @property
    def max_sims(self) -> int:
        return max(self.sim_count, self.lfp_sim_count or 0)

    def draws(self, k: int) -> SimDraws:
        return SimDraws.generate(k, self.max_sims, self.seed)

    def cache(self, draws: SimDraws) -> SimulationCache:
        return SimulationCache(draws.head(self.sim_count), draws.head(self.lfp_sim_count or self.sim_count))


@dataclass(frozen=True)
class TestDecision:
    __test__ = False

    reject: bool
    statistic: float
    critical_value: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def record(self) -> dict:
        b = self.diagnostics.get("bounds")
        return {
            "method": self.method,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "vertex_ok": self.diagnostics.get("vertex_ok"),
            "v_lo": b.v_lo if b is not None else math.nan,
            "v_up": b.v_up if b is not None else math.nan,
        }


class _Solved:
    """LP solution and truncation bounds of one model, shared across tests."""

    def __init__(self, model: NormalModel):
        self.model = model
        self.poly = DualPolytope.from_model(model)
        self.sol = self.poly.solve(model.y_n)
        self._bounds: TruncationBounds | None = None
        self._var: float | None = None

    @property
    def gamma_variance(self) -> float:
        if self._var is None:
            g = self.sol.gamma_hat
            self._var = float(g @ self.model.sigma @ g)
        return self._var

    @property
    def degenerate(self) -> bool:
        return self.gamma_variance <= DEGENERATE_VAR_RTOL * float(np.diag(self.model.sigma).max())

    @property
    def bounds(self) -> TruncationBounds:
        if self._bounds is None:
            if self.sol.vertex_ok:
                try:
                    self._bounds = truncation_bounds_closed_form(self.model, self.sol)
                except (BoundsError, np.linalg.LinAlgError):
                    self._bounds = None
            if self._bounds is None:
                self._bounds = truncation_bounds_bisection(self.model, self.sol, polytope=self.poly)
        return self._bounds


def _conditional_stage(
    solved: _Solved, level: float, c_kappa: float | None, diagnostics: dict
) -> tuple[bool, float]:
    eta = solved.sol.eta_hat
    diagnostics["gamma_variance"] = solved.gamma_variance
    if solved.degenerate:
        diagnostics["degenerate_variance"] = True
        return eta > 0.0, 0.0
    bounds = solved.bounds
    if c_kappa is not None:
        bounds = hybrid_upper_bound(bounds, c_kappa)
    diagnostics["bounds"] = bounds
    cv = conditional_critical_value(solved.gamma_variance, bounds, level)
    return eta > cv, cv


def _decide(solved: _Solved, spec: TestSpec, cache: SimulationCache) -> TestDecision:
    model, sol = solved.model, solved.sol
    diagnostics: dict = {"lp_status": sol.status, "vertex_ok": sol.vertex_ok}
    method = spec.method
    if sol.status == TRIVIAL_NULL:
        diagnostics["lp_status"] = "trivially_satisfied_null"
        return TestDecision(False, -math.inf, math.nan, method, diagnostics)
    if sol.status == FAILED:
        return TestDecision(False, math.nan, math.nan, method, diagnostics)
    eta = sol.eta_hat
    if method == "lfp":
        cv = cache.lfp(model.sigma, spec.alpha)
        return TestDecision(bool(eta > cv), eta, cv, method, diagnostics)
    if method == "lf":
        cv = cache.lf(model, spec.alpha)
        return TestDecision(bool(eta > cv), eta, cv, method, diagnostics)
    if eta < -spec.floor_c:
        diagnostics["below_floor"] = True
        return TestDecision(False, eta, -spec.floor_c, method, diagnostics)
    if method == "conditional":
        reject, cv = _conditional_stage(solved, spec.alpha, None, diagnostics)
        return TestDecision(bool(reject), eta, cv, method, diagnostics)
    c_kappa = cache.lf(model, spec.kappa)
    diagnostics["c_kappa"] = c_kappa
    if eta > c_kappa:
        diagnostics["stage"] = 1
        return TestDecision(True, eta, c_kappa, method, diagnostics)
    diagnostics["stage"] = 2
    reject, cv = _conditional_stage(solved, spec.hybrid_level, c_kappa, diagnostics)
    return TestDecision(bool(reject), eta, cv, method, diagnostics)


def run_test(
    model: NormalModel,
    spec: TestSpec,
    draws: SimDraws | None = None,
    cache: SimulationCache | None = None,
) -> TestDecision:
    """Test the null that some nuisance value satisfies every moment inequality."""
    if cache is None:
        cache = spec.cache(draws if draws is not None else spec.draws(model.k))
    return _decide(_Solved(model), spec, cache)


def run_tests(model: NormalModel, specs: Iterable[TestSpec], cache: SimulationCache) -> list[TestDecision]:
    """Several tests of the same null, sharing the LP solve and truncation bounds."""
    solved = _Solved(model)
    return [_decide(solved, spec, cache) for spec in specs]


@dataclass(frozen=True)
class ConfidenceSet:
    grid: np.ndarray
    accepted: np.ndarray
    decisions: tuple[TestDecision | None, ...] = ()

    @property
    def points(self) -> np.ndarray:
        return self.grid[self.accepted]

    @property
    def is_empty(self) -> bool:
        return not bool(self.accepted.any())

    @property
    def hull(self) -> tuple[float, float] | None:
        pts = self.points
        if pts.size == 0:
            return None
        return float(pts.min()), float(pts.max())

    @property
    def length(self) -> float:
        h = self.hull
        return 0.0 if h is None else h[1] - h[0]

    @property
    def touches_grid_edge(self) -> bool:
        """True when an end point of the grid is accepted, so the set may
        extend past the grid."""
        return bool(self.accepted.size and (self.accepted[0] or self.accepted[-1]))

    def write_records(self, path: str | Path) -> None:
        cols = ["beta", "method", "statistic", "critical_value", "reject", "vertex_ok", "v_lo", "v_up"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for b, d in zip(self.grid, self.decisions):
                if d is None:
                    continue
                w.writerow({"beta": float(b), **d.record()})


ProblemAt = Callable[[float], "ObservationSet | NormalModel"]


def _as_model(problem, sigma, matching) -> NormalModel:
    if isinstance(problem, NormalModel):
        return problem
    s = sigma if sigma is not None else estimate_sigma(problem, matching)
    return build_normal_model(problem, s)


def invert_grid(
    problem_at: ProblemAt,
    grid: Iterable[float],
    spec: TestSpec,
    draws: SimDraws | None = None,
    sigma: np.ndarray | None = None,
    matching: MatchingConfig | None = None,
    cache: SimulationCache | None = None,
) -> ConfidenceSet:
    """Collect the grid points the test does not reject.

    ``problem_at`` returns either observations, in which case ``Sigma`` is
    estimated at every point unless ``sigma`` is given, or a ready model.
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ValueError("grid is empty")
    decisions = []
    for beta in grid:
        model = _as_model(problem_at(float(beta)), sigma, matching)
        if cache is None:
            cache = spec.cache(draws if draws is not None else spec.draws(model.k))
        decisions.append(run_test(model, spec, cache=cache))
    accepted = np.array([not d.reject for d in decisions])
    cs = ConfidenceSet(grid, accepted, tuple(decisions))
    if cs.touches_grid_edge:
        warnings.warn("confidence set reaches the edge of the grid and may be truncated", stacklevel=2)
    return cs


def linear_ci_bound(model: NormalModel, l: np.ndarray, c_alpha: float, direction: str = "upper") -> float:
    """End point of ``{l'delta : (Y_j - X_j delta)/sqrt(Sigma_jj) <= c_alpha}``."""
    if not math.isfinite(c_alpha):
        raise ValueError("c_alpha must be finite")
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    try:
        return max_linear_objective(model, l, c_alpha, "max" if direction == "upper" else "min")
    except EmptyFeasibleSet as exc:
        raise EmptyConfidenceSet(str(exc)) from None


def project_nonlinear_nuisance(
    problem_at: Callable[[float, float], "ObservationSet | NormalModel"],
    grid1: Iterable[float],
    grid2: Iterable[float],
    spec: TestSpec,
    draws: SimDraws | None = None,
    sigma: np.ndarray | None = None,
    matching: MatchingConfig | None = None,
) -> ConfidenceSet:
    """Accept ``beta1`` when the test accepts ``(beta1, beta2)`` for some ``beta2``."""
    grid1 = np.asarray(list(grid1), dtype=float)
    grid2 = np.asarray(list(grid2), dtype=float)
    if grid1.size == 0 or grid2.size == 0:
        raise ValueError("grids must be non-empty")
    cache = None
    accepted = np.zeros(grid1.size, dtype=bool)
    decisions: list[TestDecision | None] = []
    for i, b1 in enumerate(grid1):
        d = None
        for b2 in grid2:
            model = _as_model(problem_at(float(b1), float(b2)), sigma, matching)
            if cache is None:
                cache = spec.cache(draws if draws is not None else spec.draws(model.k))
            d = run_test(model, spec, cache=cache)
            if not d.reject:
                accepted[i] = True
                break
        decisions.append(d)
    return ConfidenceSet(grid1, accepted, tuple(decisions))
