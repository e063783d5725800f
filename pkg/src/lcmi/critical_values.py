"""Critical values for the max statistic.

Least favorable critical values are simulated from a fixed matrix of standard
normal draws.  Conditional critical values are quantiles of a normal
distribution truncated to ``[v_lo, v_up]``, with the truncation bounds found
in closed form at a nondegenerate vertex or by bisection on the dual program
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from .lp import OPTIMAL, DualPolytope, LpSolution
from .moments import NormalModel

EIG_RTOL = 1e-12
PSD_TOL = 1e-8
V_ZERO_TOL = 1e-7
ZERO_SLOPE_TOL = 1e-10
CLOSED_FORM = "closed_form"
BISECTION = "bisection"


class NotPSDError(ValueError):
    pass


class BoundsError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimDraws:
    """``k x S`` standard normal draws shared across tests and grid points."""

    xi: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        if xi.shape[1] < 1:
            raise ValueError("need at least one simulation draw")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def generate(cls, k: int, sims: int, seed: int) -> "SimDraws":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(rng.standard_normal((k, sims)), seed)

    @property
    def k(self) -> int:
        return self.xi.shape[0]

    @property
    def sims(self) -> int:
        return self.xi.shape[1]

    def head(self, sims: int) -> "SimDraws":
        return SimDraws(self.xi[:, : min(sims, self.sims)], self.seed)


@dataclass(frozen=True)
class TruncationBounds:
    v_lo: float
    v_up: float
    v_zero_ok: bool = True
    method: str = CLOSED_FORM
    v_zero: float = math.inf

    def contains(self, value: float, tol: float = 1e-6) -> bool:
        scale = tol * (1.0 + abs(value))
        return self.v_lo - scale <= value <= self.v_up + scale


def sqrtm_psd(sigma: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    top = max(vals.max(), 0.0)
    if vals.min() < -PSD_TOL * max(top, 1.0):
        raise NotPSDError(f"matrix has eigenvalue {vals.min():.3g}")
    vals = np.where(vals > EIG_RTOL * top, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def empirical_quantile(values: np.ndarray, level: float) -> float:
    """Order statistic of rank ``ceil(level * S)``."""
    values = np.asarray(values, dtype=float).reshape(-1)
    s = values.shape[0]
    rank = math.ceil(level * s - 1e-9)
    rank = min(max(rank, 1), s)
    return float(np.partition(values, rank - 1)[rank - 1])


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _normal_draws(sigma: np.ndarray, draws: SimDraws) -> np.ndarray:
    if draws.k != sigma.shape[0]:
        raise ValueError(f"draws have k={draws.k}, sigma is {sigma.shape}")
    return sqrtm_psd(sigma) @ draws.xi


def lfp_statistics(sigma: np.ndarray, draws: SimDraws) -> np.ndarray:
    """``max_j (Sigma^{1/2} xi_s)_j / sqrt(Sigma_jj)`` for each draw."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    sd = np.sqrt(np.diag(sigma))
    return (_normal_draws(sigma, draws) / sd[:, None]).max(axis=0)


def lfp_critical_value(sigma: np.ndarray, alpha: float, draws: SimDraws) -> float:
    _check_alpha(alpha)
    return empirical_quantile(lfp_statistics(sigma, draws), 1.0 - alpha)


def lf_statistics(model: NormalModel, draws: SimDraws, polytope: DualPolytope | None = None) -> np.ndarray:
    """Optimal value of the max-statistic program with ``Sigma^{1/2} xi_s`` in
    place of ``Y_n``.

    Since ``delta = 0`` is feasible in the primal, each value is capped at the
    projection statistic of the same draw, which removes roundoff from the
    ordering ``c_LF <= c_LFP``.  A failed solve takes that cap, the most
    conservative value consistent with the ordering.
    """
    poly = polytope or DualPolytope.from_model(model)
    sims = _normal_draws(model.sigma, draws)
    if not poly.feasible:
        return np.full(draws.sims, -np.inf)
    cap = (sims / model.sd[:, None]).max(axis=0)
    out = np.empty(draws.sims)
    basis = None
    for s in range(draws.sims):
        res = poly.maximize(sims[:, s], basis)
        if res.status == OPTIMAL:
            out[s] = min(res.value, cap[s])
            basis = res.basis
        else:
            out[s] = cap[s]
    return out


def lf_critical_value(model: NormalModel, alpha: float, draws: SimDraws) -> float:
    _check_alpha(alpha)
    return empirical_quantile(lf_statistics(model, draws), 1.0 - alpha)


class SimulationCache:
    """Memoizes simulated statistics by ``(X_n, Sigma)`` for one set of draws.

    Grid inversion over a linear target keeps ``X_n`` and ``Sigma`` fixed, so
    the least favorable distribution needs to be simulated only once.
    """

    def __init__(self, draws: SimDraws, lfp_draws: SimDraws | None = None):
        self.draws = draws
        self.lfp_draws = lfp_draws or draws
        self._lf: dict[bytes, np.ndarray] = {}
        self._lfp: dict[bytes, np.ndarray] = {}

    @staticmethod
    def _key(*arrays: np.ndarray) -> bytes:
        return b"|".join(np.ascontiguousarray(a).tobytes() + str(a.shape).encode() for a in arrays)

    def lf(self, model: NormalModel, alpha: float) -> float:
        _check_alpha(alpha)
        key = self._key(model.x_n, model.sigma)
        if key not in self._lf:
            self._lf[key] = lf_statistics(model, self.draws)
        return empirical_quantile(self._lf[key], 1.0 - alpha)

    def lfp(self, sigma: np.ndarray, alpha: float) -> float:
        _check_alpha(alpha)
        key = self._key(sigma)
        if key not in self._lfp:
            self._lfp[key] = lfp_statistics(sigma, self.lfp_draws)
        return empirical_quantile(self._lfp[key], 1.0 - alpha)


def _decompose(model: NormalModel, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    sg = model.sigma @ gamma
    var = float(gamma @ sg)
    if var <= 0.0:
        raise BoundsError("gamma' Sigma gamma is not positive")
    delta = sg / var
    s = model.y_n - delta * float(gamma @ model.y_n)
    return delta, s, var


def truncation_bounds_closed_form(model: NormalModel, sol: LpSolution) -> TruncationBounds:
    """Bounds on ``gamma'Y`` that keep the binding rows of ``sol`` optimal.

    With ``B`` the rows where ``gamma > 0`` and ``Lambda = I - W W_B^{-1} M_B``,
    write ``Y = S + Delta c``; the optimality conditions become
    ``Lambda S + (Lambda Delta) c <= 0``.
    """
    if not sol.vertex_ok:
        raise BoundsError("closed-form bounds need a nondegenerate vertex")
    gamma = sol.gamma_hat
    delta, s, var = _decompose(model, gamma)
    sd = model.sd
    w = np.column_stack([sd, model.x_n])
    rows = np.flatnonzero(gamma * sd > 1e-9)
    proj = w @ np.linalg.solve(w[rows], np.eye(len(rows)))
    lam_delta = delta - proj @ delta[rows]
    lam_s = s - proj @ s[rows]
    # compare slopes in units where c and each constraint are standardized
    slope = lam_delta * math.sqrt(var) / sd
    lam_delta[rows] = 0.0
    lam_s[rows] = 0.0
    slope[rows] = 0.0
    neg = slope < -ZERO_SLOPE_TOL
    pos = slope > ZERO_SLOPE_TOL
    zero = ~(neg | pos)
    zero[rows] = False
    v_lo = float(np.max(-lam_s[neg] / lam_delta[neg])) if neg.any() else -math.inf
    v_up = float(np.min(-lam_s[pos] / lam_delta[pos])) if pos.any() else math.inf
    v_zero = float(np.min(-lam_s[zero])) if zero.any() else math.inf
    v_zero_ok = bool(np.all(-lam_s[zero] / sd[zero] >= -V_ZERO_TOL * (1.0 + abs(sol.eta_hat))))
    return TruncationBounds(v_lo, v_up, v_zero_ok, CLOSED_FORM, v_zero)


def bisection_cap(eta_hat: float, gamma_variance: float) -> tuple[float, float]:
    """Search limits for the bisection bounds: at least 20 standard deviations
    of ``gamma'Y`` on either side of the statistic and never inside
    ``[-100, 100]``."""
    spread = 20.0 * math.sqrt(gamma_variance)
    return min(-100.0, eta_hat - spread), max(100.0, eta_hat + spread)


def truncation_bounds_bisection(
    model: NormalModel,
    sol: LpSolution,
    m_cap: float | None = None,
    tol_v: float = 1e-6,
    tol_lp: float = 1e-6,
    polytope: DualPolytope | None = None,
) -> TruncationBounds:
    """Truncation bounds from the set ``{c : c = max_g g'(S + Delta c)}``.

    ``g = gamma_hat`` attains ``c`` for every ``c``, so the set is the interval
    of ``c`` on which ``gamma_hat`` stays optimal.  Each end is located by
    bisection between the statistic and the cap, then polished to the exact
    crossing.  When the cap itself is in the set, a recession check decides
    between an infinite bound and a wider bracket.  ``m_cap`` overrides the
    upper cap; the lower cap is its mirror image about the statistic.
    """
    if sol.status != OPTIMAL:
        raise BoundsError("bisection needs a finite statistic")
    poly = polytope or DualPolytope.from_model(model)
    delta, s, var = _decompose(model, sol.gamma_hat)
    eta = sol.eta_hat
    lo_cap, up_cap = bisection_cap(eta, var)
    if m_cap is not None:
        up_cap = m_cap
        lo_cap = min(-m_cap, 2.0 * eta - m_cap)
    basis = [sol.basis or None]
    last = {}

    def member(c: float) -> bool:
        res = poly.maximize(s + delta * c, basis[0])
        if res.status != OPTIMAL:
            raise BoundsError(f"dual program ended with status {res.status}")
        basis[0] = res.basis
        last[c] = res.x / poly.sd
        return abs(c - res.value) < tol_lp * (1.0 + abs(c))

    if not member(eta):
        raise BoundsError("the statistic is not in its own conditioning set")

    def unbounded(direction: float) -> bool:
        # For |c| large LPValue(c) grows like c * max_g direction * g'Delta,
        # and gamma_hat attains direction * 1, so the set is unbounded in
        # this direction exactly when that maximum equals direction.
        res = poly.maximize(direction * delta)
        return res.status == OPTIMAL and res.value <= direction + 1e-9

    def search(inside: float, outside: float) -> float:
        if member(outside):
            direction = 1.0 if outside > inside else -1.0
            if unbounded(direction):
                return direction * math.inf
            for _ in range(64):
                inside, outside = outside, eta + 2.0 * (outside - eta)
                if not member(outside):
                    break
            else:
                return direction * math.inf
        while abs(outside - inside) > tol_v:
            mid = 0.5 * (inside + outside)
            if member(mid):
                inside = mid
            else:
                outside = mid
        # The membership test cannot resolve the boundary more finely than
        # tol_lp over the slope gap.  LPValue(c) - c is convex and piecewise
        # linear, so Newton steps from the outside end land on or outside the
        # boundary and stop there exactly.
        c = outside
        for _ in range(50):
            g = last[c]
            denom = 1.0 - float(g @ delta)
            if abs(denom) <= 1e-12:
                break
            nxt = float(g @ s) / denom
            lo, hi = sorted((eta, c))
            if not lo <= nxt <= hi:
                break
            res = poly.maximize(s + delta * nxt, basis[0])
            if res.status != OPTIMAL:
                break
            last[nxt] = res.x / poly.sd
            if res.value - nxt <= 1e-12 * (1.0 + abs(nxt)):
                return nxt
            if nxt == c:
                break
            c = nxt
        return 0.5 * (inside + outside)

    v_up = search(eta, up_cap)
    v_lo = search(eta, lo_cap)
    return TruncationBounds(v_lo, v_up, True, BISECTION)


def conditional_critical_value(
    gamma_variance: float, bounds: TruncationBounds, alpha: float
) -> float:
    """``1 - alpha`` quantile of ``N(0, gamma_variance)`` truncated to the bounds.

    The inverse CDF is evaluated in log space, on whichever side of the
    distribution has the smaller tail probability.  Returns ``-inf`` when
    ``v_lo > v_up`` and the common value when the interval is a single point.
    """
    _check_alpha(alpha)
    if gamma_variance <= 0.0:
        raise BoundsError("gamma' Sigma gamma is not positive")
    if bounds.v_lo > bounds.v_up:
        return -math.inf
    if bounds.v_lo == bounds.v_up:
        return float(bounds.v_lo)
    sd = math.sqrt(gamma_variance)
    a, b = bounds.v_lo / sd, bounds.v_up / sd
    log_lower = np.logaddexp(math.log1p(-alpha) + log_ndtr(b), math.log(alpha) + log_ndtr(a))
    log_upper = np.logaddexp(math.log1p(-alpha) + log_ndtr(-b), math.log(alpha) + log_ndtr(-a))
    if log_lower <= log_upper:
        x = float(ndtri_exp(log_lower))
    else:
        x = -float(ndtri_exp(log_upper))
    return float(np.clip(sd * x, bounds.v_lo, bounds.v_up))


def hybrid_upper_bound(bounds: TruncationBounds, c_kappa_lf: float) -> TruncationBounds:
    return TruncationBounds(
        bounds.v_lo, min(bounds.v_up, c_kappa_lf), bounds.v_zero_ok, bounds.method, bounds.v_zero
    )
