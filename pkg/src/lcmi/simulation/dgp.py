"""Product entry model for a panel of truck manufacturers.

Each firm decides every period which of ``G`` weight classes to offer.  A
product already on the market stays iff expected profit beats the discounted
fixed cost ``beta (theta_c + theta_g g)``; a product not on the market enters
iff expected profit beats the full cost ``theta_c + theta_g g``.  Expected
profit is ``pi* = eta + eps`` with ``eta`` common to all firms, and the
econometrician sees ``pi = pi* + nu_j + nu_jf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FIRMS = (
    "Chrysler",
    "Ford",
    "Daimler",
    "GM",
    "Hino",
    "International",
    "Isuzu",
    "Paccar",
    "Volvo",
)
MU_F = (74.31, 98.36, 114.69, 80.11, 67.71, 110.63, 80.15, 114.63, 94.17)


@dataclass(frozen=True)
class DgpParams:
    """Calibrated primitives.

    Weights enter costs in units of ``weight_unit`` pounds; with 10,000 lb
    units the fixed costs of all weight classes are positive.  ``initial``
    is the state of every firm before the first period, ``"empty"`` or
    ``"full"``.
    """

    theta_c: float = 129.73
    theta_g: float = -21.38
    beta: float = 0.386
    n_firms: int = 9
    n_weights: int = 22
    weight_lo: float = 12700.0
    weight_hi: float = 54277.0
    weight_unit: float = 10000.0
    mu_f: tuple[float, ...] = MU_F
    sigma_eta: float = 30.0
    sigma_eps: float = 30.0
    sigma_nu: float = 57.96
    initial: str = "empty"

    def __post_init__(self):
        if len(self.mu_f) != self.n_firms:
            raise ValueError(f"mu_f has {len(self.mu_f)} entries, expected {self.n_firms}")
        if min(self.sigma_eta, self.sigma_eps, self.sigma_nu) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.initial not in ("empty", "full"):
            raise ValueError("initial must be 'empty' or 'full'")

    @property
    def g(self) -> np.ndarray:
        return np.linspace(self.weight_lo, self.weight_hi, self.n_weights) / self.weight_unit

    @property
    def mean_weight(self) -> float:
        return float(self.g.mean())

    def entry_cost(self) -> np.ndarray:
        return self.theta_c + self.theta_g * self.g

    def mean_weight_cost(self) -> float:
        return self.theta_c + self.theta_g * self.mean_weight


@dataclass(frozen=True)
class MarketDraw:
    """One market: product sets in the previous and current period, shocks
    and profits.  Arrays are ``F x G`` except ``eta`` which is ``G``."""

    offered_prev: np.ndarray
    offered_cur: np.ndarray
    pi_star: np.ndarray
    pi_obs: np.ndarray
    eta: np.ndarray


@dataclass(frozen=True)
class MarketPanel:
    """A stack of markets with a leading market axis.

    Indexing with an integer gives a :class:`MarketDraw`; indexing with an
    array or slice gives another panel.
    """

    offered_prev: np.ndarray
    offered_cur: np.ndarray
    pi_star: np.ndarray
    pi_obs: np.ndarray
    eta: np.ndarray
    params: DgpParams = field(default_factory=DgpParams)

    def __len__(self) -> int:
        return self.offered_cur.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return MarketDraw(
                self.offered_prev[idx],
                self.offered_cur[idx],
                self.pi_star[idx],
                self.pi_obs[idx],
                self.eta[idx],
            )
        return MarketPanel(
            self.offered_prev[idx],
            self.offered_cur[idx],
            self.pi_star[idx],
            self.pi_obs[idx],
            self.eta[idx],
            self.params,
        )

    def subsample(self, size: int, rng: np.random.Generator) -> "MarketPanel":
        """Markets drawn without replacement."""
        if size > len(self):
            raise ValueError(f"cannot draw {size} markets from {len(self)}")
        return self[np.sort(rng.choice(len(self), size=size, replace=False))]

    def products_per_period(self) -> np.ndarray:
        return self.offered_cur.sum(axis=(1, 2))


def _step(params: DgpParams, prev: np.ndarray, z_eta, z_eps):
    """Advance ``prev`` (``... x F x G``) by one period."""
    mu = np.asarray(params.mu_f)[:, None]
    tg = params.theta_g * params.g[None, :]
    eta = params.sigma_eta * z_eta
    # the mean of eps shifts with the product's status so that the entry
    # and exit probabilities do not depend on weight
    eps_mean = np.where(prev, params.beta * (mu + tg), mu + tg)
    pi_star = eta[..., None, :] + eps_mean + params.sigma_eps * z_eps
    cost = params.entry_cost()[None, :]
    threshold = np.where(prev, params.beta * cost, cost)
    return pi_star > threshold, pi_star, eta


def simulate_chain(
    params: DgpParams | None = None,
    length: int = 51000,
    burnout: int = 1000,
    seed: int | np.random.SeedSequence = 0,
    chunk: int = 5000,
) -> MarketPanel:
    """Simulate one chain and return the periods after the burn-in."""
    params = params or DgpParams()
    if not 0 <= burnout < length:
        raise ValueError("need 0 <= burnout < length")
    rng = np.random.default_rng(seed)
    f, g = params.n_firms, params.n_weights
    keep = length - burnout
    out_prev = np.empty((keep, f, g), dtype=bool)
    out_cur = np.empty((keep, f, g), dtype=bool)
    out_star = np.empty((keep, f, g))
    out_eta = np.empty((keep, g))
    state = np.full((f, g), params.initial == "full")
    t = 0
    while t < length:
        m = min(chunk, length - t)
        z_eta = rng.standard_normal((m, g))
        z_eps = rng.standard_normal((m, f, g))
        for s in range(m):
            new, pi_star, eta = _step(params, state, z_eta[s], z_eps[s])
            i = t + s - burnout
            if i >= 0:
                out_prev[i] = state
                out_cur[i] = new
                out_star[i] = pi_star
                out_eta[i] = eta
            state = new
        t += m
    nu = params.sigma_nu * (
        rng.standard_normal((keep, 1, g)) + rng.standard_normal((keep, f, g))
    )
    return MarketPanel(out_prev, out_cur, out_star, out_star + nu, out_eta, params)


def simulate_parallel_chains(
    params: DgpParams | None,
    n_chains: int,
    length: int,
    burnout: int,
    seed: int | np.random.SeedSequence = 0,
):
    """Yield post-burn-in panels from ``n_chains`` independent chains run in
    lock step, one period (``n_chains`` markets) at a time, in blocks."""
    params = params or DgpParams()
    rng = np.random.default_rng(seed)
    f, g = params.n_firms, params.n_weights
    state = np.full((n_chains, f, g), params.initial == "full")
    block = max(1, 20000 // n_chains)
    buf = []
    for t in range(length):
        z_eta = rng.standard_normal((n_chains, g))
        z_eps = rng.standard_normal((n_chains, f, g))
        new, pi_star, eta = _step(params, state, z_eta, z_eps)
        if t >= burnout:
            buf.append((state, new, pi_star, eta))
        state = new
        if len(buf) == block or (t == length - 1 and buf):
            prev_, cur_, star_, eta_ = (np.concatenate(a) for a in zip(*buf))
            nu = params.sigma_nu * (
                rng.standard_normal((len(cur_), 1, g)) + rng.standard_normal((len(cur_), f, g))
            )
            yield MarketPanel(prev_, cur_, star_, star_ + nu, eta_, params)
            buf = []
