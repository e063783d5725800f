"""Monte Carlo experiments: rejection curves, size and excess length."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..covariance import estimate_sigma
from ..critical_values import SimDraws, SimulationCache
from ..inference import TestSpec, run_tests
from ..lp import OPTIMAL, TRIVIAL_NULL, DualPolytope, EmptyFeasibleSet, max_linear_objective
from ..moments import NormalModel, build_normal_model, linear_target_parts
from .dgp import DgpParams, MarketPanel, simulate_chain, simulate_parallel_chains
from .moments import SpecConfig, beta_rows, build_moments, moment_arrays

METHODS = ("lfp", "lf", "conditional", "hybrid")
COLUMNS = ("LFP", "LF", "Conditional", "Hybrid")


@dataclass(frozen=True)
class IdentifiedSet:
    """Parameter values satisfying the sample moments of a very large sample,
    relaxed by ``correction``."""

    lo: float
    hi: float
    correction: float
    n: int
    grid: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def empty(self) -> bool:
        return not (self.lo <= self.hi)

    @property
    def length(self) -> float:
        return self.hi - self.lo if not self.empty else 0.0


def correction_factor(n: int, log_base: float = 10.0) -> float:
    return math.log(n) / math.log(log_base) / math.sqrt(n)


def _mean_moments(spec, params, n_large, n_chains, burnout, seed):
    """Sample means of ``Y`` and of ``X`` at ``beta = 0`` and ``beta = 1``."""
    per_chain = -(-n_large // n_chains)
    rows = beta_rows(spec)
    y_sum = x_sum = None
    count = 0
    for panel in simulate_parallel_chains(params, n_chains, burnout + per_chain, burnout, seed):
        y, x = moment_arrays(panel, spec, 1.0)
        if y_sum is None:
            y_sum, x_sum = y.sum(axis=0), x.sum(axis=0)
        else:
            y_sum += y.sum(axis=0)
            x_sum += x.sum(axis=0)
        count += len(y)
    x1 = x_sum / count
    x0 = x1.copy()
    x0[rows] = 0.0
    return y_sum / count, (x0, x1), count


def estimate_identified_set(
    spec: SpecConfig,
    params: DgpParams | None = None,
    n_large: int = 1_000_000,
    grid: np.ndarray | None = None,
    seed: int | np.random.SeedSequence = 0,
    log_base: float = 10.0,
    n_chains: int = 100,
    burnout: int = 1000,
) -> IdentifiedSet:
    """Approximate the identified set from ``n_large`` stationary markets.

    Linear targets get exact end points from two linear programs; ``beta``
    is checked point by point on ``grid``.  Moments are linear in ``beta``, so
    two evaluations of ``X`` suffice for every grid point.
    """
    params = params or DgpParams()
    y_bar, (x0, x1), n = _mean_moments(spec, params, n_large, n_chains, burnout, seed)
    corr = correction_factor(n, log_base)
    k = y_bar.shape[0]
    if spec.target != "beta":
        x_bar = x0 + params.beta * (x1 - x0)
        model = NormalModel(y_bar, x_bar, np.eye(k))
        l = spec.target_vector(params)
        try:
            lo = max_linear_objective(model, l, corr, "min")
            hi = max_linear_objective(model, l, corr, "max")
        except EmptyFeasibleSet:
            lo, hi = math.inf, -math.inf
        mask = None
        if grid is not None:
            grid = np.asarray(grid, dtype=float)
            mask = (grid >= lo) & (grid <= hi)
        return IdentifiedSet(lo, hi, corr, n, grid, mask)
    if grid is None:
        raise ValueError("the beta target needs a grid")
    grid = np.asarray(grid, dtype=float)
    mask = np.zeros(grid.size, dtype=bool)
    for i, b in enumerate(grid):
        poly = DualPolytope(x0 + b * (x1 - x0), np.ones(k))
        sol = poly.solve(y_bar)
        mask[i] = sol.status == TRIVIAL_NULL or (sol.status == OPTIMAL and sol.eta_hat <= corr)
    pts = grid[mask]
    lo, hi = (float(pts.min()), float(pts.max())) if pts.size else (math.inf, -math.inf)
    return IdentifiedSet(lo, hi, corr, n, grid, mask)


@dataclass(frozen=True)
class MonteCarloConfig:
    """Settings for one experiment.

    When ``grid_lo``/``grid_hi`` are not given, a linear-target grid spans
    the estimated identified set widened by ``grid_margin`` times its length
    on each side, and the ``beta`` grid spans ``[0.02, 1.0]``.
    """

    grouping: str = "one_group"
    instruments: str = "constant_only"
    target: str = "mean_weight_cost"
    alpha: float = 0.05
    kappa: float | None = None
    floor_c: float = 100.0
    n_markets: int = 500
    reps: int = 100
    chain_length: int = 51000
    burnout: int = 1000
    lf_sims: int = 1000
    lfp_sims: int = 10000
    grid_n: int | None = None
    grid_lo: float | None = None
    grid_hi: float | None = None
    grid_margin: float = 0.15
    idset_n: int = 1_000_000
    idset_chains: int = 100
    log_base: float = 10.0
    seed: int = 0
    threads: int = 1
    params: DgpParams = field(default_factory=DgpParams)

    @property
    def spec(self) -> SpecConfig:
        return SpecConfig(self.grouping, self.instruments, self.target)

    def test_specs(self) -> list[TestSpec]:
        return [
            TestSpec(m, self.alpha, self.kappa, self.floor_c, self.lf_sims, self.seed, self.lfp_sims)
            for m in METHODS
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = asdict(self.params)
        d["params"]["mu_f"] = list(self.params.mu_f)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MonteCarloConfig":
        d = dict(d)
        params = d.pop("params", None)
        if params is not None:
            params = dict(params)
            if "mu_f" in params:
                params["mu_f"] = tuple(params["mu_f"])
            d["params"] = DgpParams(**params)
        return cls(**d)


@dataclass
class MonteCarloResult:
    config: MonteCarloConfig
    grid: np.ndarray
    identified: IdentifiedSet
    rejections: np.ndarray  # reps x methods x grid
    true_value: float
    timings: dict = field(default_factory=dict)

    @property
    def rejection_curves(self) -> np.ndarray:
        return self.rejections.mean(axis=0)

    def ci_lengths(self) -> np.ndarray:
        """Hull length of the accepted grid points, reps x methods."""
        acc = ~self.rejections
        out = np.zeros(acc.shape[:2])
        for r in range(acc.shape[0]):
            for m in range(acc.shape[1]):
                pts = self.grid[acc[r, m]]
                out[r, m] = pts.max() - pts.min() if pts.size else 0.0
        return out

    def identified_length(self) -> float:
        mask = self.identified_mask()
        pts = self.grid[mask]
        return float(pts.max() - pts.min()) if pts.size else 0.0

    def identified_mask(self) -> np.ndarray:
        if self.identified.mask is not None and self.identified.mask.shape == self.grid.shape:
            return self.identified.mask
        return (self.grid >= self.identified.lo) & (self.grid <= self.identified.hi)

    def excess_lengths(self) -> np.ndarray:
        return self.ci_lengths() - self.identified_length()

    def median_excess_length(self) -> dict:
        med = np.median(self.excess_lengths(), axis=0)
        return dict(zip(COLUMNS, med.tolist()))

    def size(self) -> dict:
        mask = self.identified_mask()
        curves = self.rejection_curves
        if not mask.any():
            return dict.fromkeys(COLUMNS, math.nan)
        return dict(zip(COLUMNS, curves[:, mask].max(axis=1).tolist()))

    def coverage(self) -> dict:
        """Share of reps whose confidence set contains the grid point nearest
        the true value."""
        i = int(np.argmin(np.abs(self.grid - self.true_value)))
        return dict(zip(COLUMNS, (1.0 - self.rejections[:, :, i].mean(axis=0)).tolist()))

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        spec = self.config.spec
        dims = {"n_params": spec.n_params, "n_moments": spec.n_moments}
        paths = []

        def table(name, header, rows):
            path = out / name
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            paths.append(path)

        mask = self.identified_mask()
        curves = self.rejection_curves
        table(
            "rejection_curves.csv",
            ["parameter", "in_identified_set", *COLUMNS],
            [[repr(float(b)), int(mask[i]), *map(repr, curves[:, i].tolist())] for i, b in enumerate(self.grid)],
        )
        med = self.median_excess_length()
        table("excess_length.csv", ["n_params", "n_moments", *COLUMNS],
              [[dims["n_params"], dims["n_moments"], *(repr(med[c]) for c in COLUMNS)]])
        ex = self.excess_lengths()
        table("excess_length_by_rep.csv", ["rep", *COLUMNS],
              [[r, *map(repr, ex[r].tolist())] for r in range(ex.shape[0])])
        size = self.size()
        table("size.csv", ["n_params", "n_moments", *COLUMNS],
              [[dims["n_params"], dims["n_moments"], *(repr(size[c]) for c in COLUMNS)]])
        idset = self.identified
        table("identified_set.csv", ["lo", "hi", "correction", "n"],
              [[repr(idset.lo), repr(idset.hi), repr(idset.correction), idset.n]])
        return paths


def _linear_rep_decisions(sub: MarketPanel, cfg: MonteCarloConfig, grid, draws: SimDraws):
    spec = cfg.spec
    specs = cfg.test_specs()
    obs = build_moments(sub, spec)
    # Y does not depend on the target value and X is a function of the
    # instruments, so Sigma is estimated once
    sigma = estimate_sigma(obs)
    base = build_normal_model(obs, sigma)
    slope, x_tilde = linear_target_parts(base.x_n, spec.target_vector(cfg.params))
    cache = SimulationCache(draws.head(cfg.lf_sims), draws.head(cfg.lfp_sims))
    out = np.zeros((len(specs), grid.size), dtype=bool)
    for i, b in enumerate(grid):
        model = NormalModel(base.y_n - slope * b, x_tilde, sigma)
        out[:, i] = [d.reject for d in run_tests(model, specs, cache)]
    return out


def _beta_rep_decisions(sub: MarketPanel, cfg: MonteCarloConfig, grid, draws: SimDraws):
    spec = cfg.spec
    specs = cfg.test_specs()
    cache = SimulationCache(draws.head(cfg.lf_sims), draws.head(cfg.lfp_sims))
    out = np.zeros((len(specs), grid.size), dtype=bool)
    for i, b in enumerate(grid):
        obs = build_moments(sub, spec, float(b))
        model = build_normal_model(obs, estimate_sigma(obs))
        out[:, i] = [d.reject for d in run_tests(model, specs, cache)]
    return out


_STATE: dict = {}


def _init_worker(chain, cfg, grid, draws):
    _STATE.update(chain=chain, cfg=cfg, grid=grid, draws=draws)


def _run_rep(seed_seq) -> np.ndarray:
    chain, cfg, grid, draws = (_STATE[k] for k in ("chain", "cfg", "grid", "draws"))
    rng = np.random.default_rng(seed_seq)
    sub = chain.subsample(cfg.n_markets, rng)
    if cfg.target == "beta":
        return _beta_rep_decisions(sub, cfg, grid, draws)
    return _linear_rep_decisions(sub, cfg, grid, draws)


def make_grid(cfg: MonteCarloConfig, identified: IdentifiedSet | None) -> np.ndarray:
    n = cfg.grid_n or (100 if cfg.target == "beta" else 1001)
    lo, hi = cfg.grid_lo, cfg.grid_hi
    if cfg.target == "beta":
        lo = 0.02 if lo is None else lo
        hi = 1.0 if hi is None else hi
    elif lo is None or hi is None:
        if identified is None or identified.empty:
            raise ValueError("grid bounds are needed when the identified set is unavailable")
        pad = cfg.grid_margin * max(identified.length, 1.0)
        lo = identified.lo - pad if lo is None else lo
        hi = identified.hi + pad if hi is None else hi
    return np.linspace(lo, hi, n)


def run_monte_carlo(cfg: MonteCarloConfig, progress=None) -> MonteCarloResult:
    """Simulate ``cfg.reps`` data sets of ``cfg.n_markets`` markets and test
    every grid value with all four methods.

    All randomness derives from ``cfg.seed``: the long chain, the
    identified-set sample, the critical-value draws (shared by all reps) and
    one subsampling stream per rep.
    """
    import time

    if cfg.reps < 1:
        raise ValueError("reps must be positive")
    timings = {}
    t0 = time.perf_counter()
    chain_ss, idset_ss, draws_ss, reps_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    spec = cfg.spec
    chain = simulate_chain(cfg.params, cfg.chain_length, cfg.burnout, chain_ss)
    timings["chain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.target == "beta":
        grid = make_grid(cfg, None)
        identified = estimate_identified_set(
            spec, cfg.params, cfg.idset_n, grid, idset_ss, cfg.log_base, cfg.idset_chains, cfg.burnout
        )
    else:
        identified = estimate_identified_set(
            spec, cfg.params, cfg.idset_n, None, idset_ss, cfg.log_base, cfg.idset_chains, cfg.burnout
        )
        grid = make_grid(cfg, identified)
        identified = IdentifiedSet(
            identified.lo, identified.hi, identified.correction, identified.n, grid,
            (grid >= identified.lo) & (grid <= identified.hi),
        )
    timings["identified_set"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    draws = SimDraws.generate(spec.n_moments, max(cfg.lf_sims, cfg.lfp_sims), draws_ss)
    rep_seeds = reps_ss.spawn(cfg.reps)
    threads = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    if threads == 1 or cfg.reps == 1:
        _init_worker(chain, cfg, grid, draws)
        results = []
        for r, ss in enumerate(rep_seeds):
            results.append(_run_rep(ss))
            if progress is not None:
                progress(r + 1, cfg.reps)
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(chain, cfg, grid, draws)) as ex:
            results = list(ex.map(_run_rep, rep_seeds))
    timings["reps"] = time.perf_counter() - t0
    return MonteCarloResult(
        cfg, grid, identified, np.stack(results), spec.true_value(cfg.params), timings
    )
