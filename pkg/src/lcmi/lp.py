"""Linear programming for the max statistic.

The primal program is

    min_{eta, delta} eta   s.t.  (Y_j - X_j delta) / sqrt(Sigma_jj) <= eta  for all j,

and its dual is ``max gamma'Y`` over ``{gamma >= 0, W'gamma = e1}`` with row
``j`` of ``W`` equal to ``(sqrt(Sigma_jj), X_j)``.  Both are solved together by
a dense revised simplex on the dual, which returns a basic (vertex) dual
solution and recovers the primal point from the simplex multipliers.

The dual feasible set does not depend on ``Y``, so phase one is run once per
``(X, Sigma)`` and phase two is warm-started for every new objective.  This is
what makes the least favorable simulation and the bisection bounds cheap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .moments import NormalModel

OPTIMAL = "optimal"
UNBOUNDED = "unbounded"
INFEASIBLE = "infeasible"
FAILED = "failed"

# eta_hat = -inf: the column span of X contains a strictly positive vector
TRIVIAL_NULL = "trivial_null"

BINDING_RTOL = 1e-7
RANK_RTOL = 1e-9
POSITIVE_TOL = 1e-9
MAX_ENUM_K = 20


class LPError(RuntimeError):
    pass


@dataclass(frozen=True)
class StandardFormResult:
    status: str
    value: float
    x: np.ndarray | None
    multipliers: np.ndarray | None
    basis: tuple[int, ...]


def _independent_rows(a: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    if a.shape[0] == 0:
        return np.arange(0)
    _, r, piv = linalg.qr(a.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return np.arange(0)
    rank = int(np.sum(diag > rtol * diag[0]))
    return np.sort(piv[:rank])


def _iterate(a, b, c, basis, tol, max_iter):
    """Revised simplex, phase two, from a primal feasible basis.

    Dantzig pricing with a switch to Bland's rule once degenerate pivots
    start repeating, so the method cannot cycle.
    """
    m, n = a.shape
    basis = list(basis)
    if m == 0:
        # no equality rows: every x >= 0 is feasible
        if np.any(c > tol):
            return UNBOUNDED, basis, np.zeros(0), np.zeros(0)
        return OPTIMAL, basis, np.zeros(0), np.zeros(0)
    dtol = tol * (1.0 + float(np.max(np.abs(c))))
    bland = False
    stall = 0
    x_b = pi = None
    for _ in range(max_iter):
        try:
            binv = np.linalg.inv(a[:, basis])
        except np.linalg.LinAlgError:
            return FAILED, basis, x_b, pi
        x_b = binv @ b
        pi = c[basis] @ binv
        reduced = c - pi @ a
        reduced[basis] = 0.0
        entering = np.flatnonzero(reduced > dtol)
        if entering.size == 0:
            return OPTIMAL, basis, x_b, pi
        q = int(entering[0]) if bland else int(entering[np.argmax(reduced[entering])])
        d = binv @ a[:, q]
        rows = np.flatnonzero(d > tol)
        if rows.size == 0:
            return UNBOUNDED, basis, x_b, pi
        ratios = np.maximum(x_b[rows], 0.0) / d[rows]
        theta = ratios.min()
        ties = rows[ratios <= theta + 1e-12 * (1.0 + theta)]
        if bland:
            leave = int(ties[np.argmin([basis[i] for i in ties])])
        else:
            leave = int(ties[np.argmax(d[ties])])
        basis[leave] = q
        if theta <= tol:
            stall += 1
            if stall > m:
                bland = True
        else:
            stall = 0
    return FAILED, basis, x_b, pi


class StandardFormLP:
    """``max c'x`` subject to ``A x = b, x >= 0`` for a fixed ``(A, b)``.

    Redundant equality rows are removed up front and phase one is solved
    once; :meth:`maximize` then runs phase two for any objective, optionally
    warm-started from a previously optimal basis.
    """

    def __init__(self, a, b, tol: float = 1e-9, max_iter: int | None = None):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float).reshape(-1)
        if a.shape[0] != b.shape[0]:
            raise ValueError("A and b have incompatible shapes")
        self.n = a.shape[1]
        self.tol = tol
        self.max_iter = max_iter or 50 * (a.shape[0] + a.shape[1] + 10)
        self.rows = _independent_rows(a) if a.shape[0] else np.arange(0)
        self.m_full = a.shape[0]
        self.feasible = True
        dropped = np.setdiff1d(np.arange(a.shape[0]), self.rows)
        if dropped.size:
            keep = a[self.rows]
            coef, *_ = np.linalg.lstsq(keep.T, a[dropped].T, rcond=None)
            implied = coef.T @ b[self.rows]
            if np.any(np.abs(implied - b[dropped]) > 1e-8 * (1.0 + np.abs(b).max())):
                self.feasible = False
        self.a = a[self.rows]
        self.b = b[self.rows]
        self.basis: tuple[int, ...] = ()
        if self.feasible:
            self._phase_one()

    def _phase_one(self) -> None:
        m, n = self.a.shape
        if m == 0:
            return
        sign = np.where(self.b < 0, -1.0, 1.0)
        a1 = np.hstack([self.a * sign[:, None], np.eye(m)])
        b1 = self.b * sign
        c1 = np.concatenate([np.zeros(n), -np.ones(m)])
        status, basis, x_b, _ = _iterate(a1, b1, c1, list(range(n, n + m)), self.tol, self.max_iter)
        if status != OPTIMAL:
            raise LPError(f"phase one did not converge ({status})")
        if c1[basis] @ x_b < -1e-8 * (1.0 + np.abs(b1).max()):
            self.feasible = False
            return
        for r in range(m):
            if basis[r] < n:
                continue
            binv = np.linalg.inv(a1[:, basis])
            row = binv[r] @ a1[:, :n]
            row[[j for j in basis if j < n]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) <= self.tol:
                raise LPError("could not drive artificial variable out of the basis")
            basis[r] = j
        self.basis = tuple(basis)

    def maximize(self, c, basis=None) -> StandardFormResult:
        c = np.asarray(c, dtype=float)
        if not self.feasible:
            return StandardFormResult(INFEASIBLE, -math.inf, None, None, ())
        start = list(basis) if basis is not None else list(self.basis)
        status, basis, x_b, pi = _iterate(self.a, self.b, c, start, self.tol, self.max_iter)
        if status == FAILED and basis is not None:
            # retry from the phase-one basis before giving up
            status, basis, x_b, pi = _iterate(
                self.a, self.b, c, list(self.basis), self.tol, self.max_iter
            )
        if status != OPTIMAL:
            value = math.inf if status == UNBOUNDED else math.nan
            return StandardFormResult(status, value, None, None, tuple(basis))
        x = np.zeros(self.n)
        x[basis] = np.maximum(x_b, 0.0)
        multipliers = np.zeros(self.m_full)
        multipliers[self.rows] = pi
        return StandardFormResult(OPTIMAL, float(c @ x), x, multipliers, tuple(basis))


@dataclass(frozen=True)
class LpSolution:
    """Joint primal/dual solution of the max-statistic program.

    ``eta_hat`` is ``-inf`` exactly when ``status == TRIVIAL_NULL``; callers
    should branch on ``status`` rather than on the float.
    """

    status: str
    eta_hat: float
    delta_hat: np.ndarray | None
    gamma_hat: np.ndarray | None
    binding_set: tuple[int, ...]
    vertex_ok: bool
    basis: tuple[int, ...] = ()

    @property
    def finite(self) -> bool:
        return self.status == OPTIMAL


class DualPolytope:
    """The dual feasible set ``{gamma >= 0, W'gamma = e1}`` for fixed ``X_n`` and
    ``diag(Sigma)``.

    Internally each constraint is divided by ``sqrt(Sigma_jj)`` and each column
    of ``X`` by its largest absolute entry, so the rescaled multipliers live
    on the unit simplex and all tolerances are in standard-deviation units.
    """

    def __init__(self, x_n: np.ndarray, sd: np.ndarray, tol: float = 1e-9):
        x_n = np.asarray(x_n, dtype=float)
        sd = np.asarray(sd, dtype=float)
        self.k = sd.shape[0]
        self.p = x_n.shape[1] if x_n.ndim == 2 else 0
        self.sd = sd
        xs = x_n.reshape(self.k, self.p) / sd[:, None]
        scale = np.abs(xs).max(axis=0) if self.p else np.zeros(0)
        self.col_scale = np.where(scale > 0, scale, 1.0)
        self.xs = xs / self.col_scale
        a = np.vstack([np.ones((1, self.k)), self.xs.T])
        b = np.zeros(self.p + 1)
        b[0] = 1.0
        self.lp = StandardFormLP(a, b, tol=tol)
        self._w = np.column_stack([sd, x_n.reshape(self.k, self.p)])

    @classmethod
    def from_model(cls, model: NormalModel) -> "DualPolytope":
        return cls(model.x_n, np.sqrt(np.diag(model.sigma)))

    @property
    def feasible(self) -> bool:
        return self.lp.feasible

    def maximize(self, y: np.ndarray, basis=None) -> StandardFormResult:
        """``max gamma'y`` over the polytope; ``x`` in the result is the
        rescaled multiplier ``gamma * sd``."""
        return self.lp.maximize(np.asarray(y, dtype=float) / self.sd, basis)

    def value(self, y: np.ndarray, basis=None) -> tuple[float, tuple[int, ...]]:
        res = self.maximize(y, basis)
        if res.status == INFEASIBLE:
            return -math.inf, ()
        if res.status != OPTIMAL:
            raise LPError(f"dual program ended with status {res.status}")
        return res.value, res.basis

    def solve(self, y: np.ndarray, basis=None) -> LpSolution:
        y = np.asarray(y, dtype=float)
        if not self.feasible:
            return LpSolution(TRIVIAL_NULL, -math.inf, None, None, (), False)
        res = self.maximize(y, basis)
        if res.status != OPTIMAL:
            return LpSolution(FAILED, math.nan, None, None, (), False, res.basis)
        eta = res.value
        delta_scaled = res.multipliers[1:]
        delta = delta_scaled / self.col_scale
        gamma = res.x / self.sd
        slack = eta - (y / self.sd - self.xs @ delta_scaled)
        binding = np.flatnonzero(slack <= BINDING_RTOL * (1.0 + abs(eta)))
        positive = np.flatnonzero(res.x > POSITIVE_TOL)
        vertex_ok = positive.size == self.p + 1 and _full_rank(self._w[positive])
        return LpSolution(
            OPTIMAL,
            float(eta),
            delta,
            gamma,
            tuple(int(j) for j in binding),
            bool(vertex_ok),
            res.basis,
        )


def _full_rank(m: np.ndarray) -> bool:
    if m.size == 0:
        return True
    s = np.linalg.svd(m, compute_uv=False)
    return bool(s[-1] > RANK_RTOL * s[0]) and m.shape[0] == m.shape[1]


def solve_primal_dual(model: NormalModel) -> LpSolution:
    """Solve the max-statistic program for ``model`` from scratch."""
    return DualPolytope.from_model(model).solve(model.y_n)


def enumerate_dual_vertices(model: NormalModel, tol: float = 1e-8) -> list[np.ndarray]:
    """All basic feasible solutions of ``{gamma >= 0, W'gamma = e1}``.

    Brute force over row subsets; intended as a test oracle for small ``k``.
    """
    k = model.k
    if k > MAX_ENUM_K:
        raise ValueError(f"vertex enumeration is limited to k <= {MAX_ENUM_K}")
    w = np.column_stack([np.sqrt(np.diag(model.sigma)), model.x_n.reshape(k, model.p)])
    e1 = np.zeros(w.shape[1])
    e1[0] = 1.0
    rank = np.linalg.matrix_rank(w)
    vertices: list[np.ndarray] = []
    for subset in itertools.combinations(range(k), rank):
        sub = w[list(subset)]
        if np.linalg.matrix_rank(sub) < rank:
            continue
        g, *_ = np.linalg.lstsq(sub.T, e1, rcond=None)
        if np.abs(sub.T @ g - e1).max() > tol or g.min() < -tol:
            continue
        gamma = np.zeros(k)
        gamma[list(subset)] = np.maximum(g, 0.0)
        if not any(np.abs(gamma - v).max() <= tol for v in vertices):
            vertices.append(gamma)
    return vertices


def max_linear_objective(
    model: NormalModel, l: np.ndarray, level: float, sense: str = "max"
) -> float:
    """Optimize ``l'delta`` over ``{delta : (Y_j - X_j delta)/sqrt(Sigma_jj) <= level}``.

    Returns ``+-inf`` when unbounded in the requested direction and raises
    :class:`EmptyFeasibleSet` when no ``delta`` satisfies the constraints.
    """
    l = np.asarray(l, dtype=float).reshape(-1)
    if l.shape[0] != model.p:
        raise ValueError("objective length must equal the nuisance dimension")
    sol = solve_primal_dual(model)
    if sol.status == FAILED:
        raise LPError("max-statistic program failed")
    if sol.status == OPTIMAL and sol.eta_hat > level + BINDING_RTOL * (1.0 + abs(level)):
        raise EmptyFeasibleSet(f"level {level:.6g} is below the minimal statistic {sol.eta_hat:.6g}")
    sign = 1.0 if sense == "max" else -1.0
    sd = np.sqrt(np.diag(model.sigma))
    g = -model.x_n / sd[:, None]
    h = level - model.y_n / sd
    # dual of max (sign*l)'delta s.t. g delta <= h is min h'gamma s.t. g'gamma = sign*l
    res = StandardFormLP(g.T, sign * l).maximize(-h)
    if res.status == INFEASIBLE:
        return sign * math.inf
    if res.status == UNBOUNDED:
        raise EmptyFeasibleSet(f"no delta satisfies the constraints at level {level:.6g}")
    if res.status != OPTIMAL:
        raise LPError(f"objective program ended with status {res.status}")
    return sign * -res.value


class EmptyFeasibleSet(ValueError):
    pass
