"""Entry and exit moment inequalities for the simulated truck markets.

For a product ``j`` of firm ``f`` the four one-product deviations give

    m1 = -[pi_j - beta (d_c + d_g g_j)]   if j offered now and before
    m2 = -[pi_j - (d_c + d_g g_j)]        if j offered now, not before
    m3 = -[-pi_j + beta (d_c + d_g g_j)]  if j not offered now, offered before
    m4 = -[-pi_j + (d_c + d_g g_j)]       if j offered in neither period

and swapping a newly offered ``j`` for a lighter (m5) or heavier (m6)
product ``j'`` offered in neither period gives

    m = -avg_j' [pi_j - pi_j' - d_g (g_j - g_j')].

Each is nonpositive in expectation at the true parameters.  Moments are
averaged over the products and firms that share a cost constant, and m1-m4
can be interacted with the positive and negative parts of the common shock.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..moments import ObservationSet
from .dgp import DgpParams, MarketPanel

GROUPINGS = ("one_group", "three_groups", "per_firm")
INSTRUMENTS = ("constant_only", "eta_split")
TARGETS = ("mean_weight_cost", "delta_g", "beta")

# (grouping, instruments) -> (parameters, moments)
DIMENSIONS = {
    ("one_group", "constant_only"): (2, 6),
    ("one_group", "eta_split"): (2, 14),
    ("three_groups", "constant_only"): (4, 14),
    ("three_groups", "eta_split"): (4, 38),
    ("per_firm", "constant_only"): (10, 38),
    ("per_firm", "eta_split"): (10, 110),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SpecConfig:
    grouping: str = "one_group"
    instruments: str = "constant_only"
    target: str = "mean_weight_cost"

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"grouping must be one of {GROUPINGS}")
        if self.instruments not in INSTRUMENTS:
            raise ConfigError(f"instruments must be one of {INSTRUMENTS}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}")

    @classmethod
    def from_dimensions(cls, n_params: int, n_moments: int, target: str = "mean_weight_cost") -> "SpecConfig":
        for (grouping, instruments), dims in DIMENSIONS.items():
            if dims == (n_params, n_moments):
                return cls(grouping, instruments, target)
        raise ConfigError(f"no specification has {n_params} parameters and {n_moments} moments")

    @property
    def n_params(self) -> int:
        return DIMENSIONS[(self.grouping, self.instruments)][0]

    @property
    def n_moments(self) -> int:
        return DIMENSIONS[(self.grouping, self.instruments)][1]

    def groups(self, n_firms: int) -> list[np.ndarray]:
        """Firm indices sharing a cost constant; three groups are consecutive
        triples in table order."""
        firms = np.arange(n_firms)
        if self.grouping == "one_group":
            return [firms]
        if self.grouping == "three_groups":
            if n_firms % 3:
                raise ConfigError("three groups need a multiple of three firms")
            return list(firms.reshape(3, -1))
        return [np.array([f]) for f in firms]

    def target_vector(self, params: DgpParams) -> np.ndarray:
        """``l`` with ``l'delta`` the target, for ``delta = (d_c groups..., d_g)``."""
        h = self.n_params - 1
        if self.target == "mean_weight_cost":
            return np.concatenate([np.full(h, 1.0 / h), [params.mean_weight]])
        if self.target == "delta_g":
            l = np.zeros(h + 1)
            l[-1] = 1.0
            return l
        raise ConfigError("beta is not a linear target")

    def true_value(self, params: DgpParams) -> float:
        if self.target == "mean_weight_cost":
            return params.mean_weight_cost()
        if self.target == "delta_g":
            return params.theta_g
        return params.beta

    def true_delta(self, params: DgpParams) -> np.ndarray:
        return np.concatenate([np.full(self.n_params - 1, params.theta_c), [params.theta_g]])


def _swap_moments(pi: np.ndarray, g: np.ndarray, idle: np.ndarray, new: np.ndarray):
    """Per-market sums over newly offered ``j`` of the average of
    ``pi_j - pi_j'`` and of ``g_j - g_j'`` over idle ``j'`` lighter than ``j``
    and, separately, heavier than ``j``.  Products with no such ``j'``
    contribute zero."""
    n = pi.shape[0]
    w = idle.astype(float)
    c_cnt = np.cumsum(w, axis=-1)
    c_pi = np.cumsum(w * pi, axis=-1)
    c_g = np.cumsum(w * g, axis=-1)
    # only the (sparse) newly offered products enter
    flat = np.flatnonzero(new)
    row = flat // pi.shape[-1]
    market = row // pi.shape[1]
    j = flat % pi.shape[-1]
    cnt, s_pi, s_g = (a.reshape(-1)[flat] for a in (c_cnt, c_pi, c_g))
    tot_cnt, tot_pi, tot_g = (a[..., -1].reshape(-1)[row] for a in (c_cnt, c_pi, c_g))
    pi_j, g_j, w_j = pi.reshape(-1)[flat], g[j], w.reshape(-1)[flat]
    out = []
    # lighter: strictly earlier weight classes; heavier: strictly later ones
    for m_cnt, m_pi, m_g in (
        (cnt - w_j, s_pi - w_j * pi_j, s_g - w_j * g_j),
        (tot_cnt - cnt, tot_pi - s_pi, tot_g - s_g),
    ):
        on = m_cnt > 0.5
        safe = np.where(on, m_cnt, 1.0)
        y = np.where(on, pi_j - m_pi / safe, 0.0)
        x = np.where(on, g_j - m_g / safe, 0.0)
        out.append((np.bincount(market, y, n), np.bincount(market, x, n)))
    return out


def moment_arrays(
    panel: MarketPanel, spec: SpecConfig, beta0: float, chunk: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """Per-market ``Y`` (``n x k``) and ``X`` (``n x k x p``) at ``beta0``."""
    n = len(panel)
    if n <= chunk:
        return _moment_arrays(panel, spec, beta0)
    parts = [_moment_arrays(panel[i : i + chunk], spec, beta0) for i in range(0, n, chunk)]
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def _moment_arrays(panel: MarketPanel, spec: SpecConfig, beta0: float):
    params = panel.params
    g = params.g
    prev, cur, pi = panel.offered_prev, panel.offered_cur, panel.pi_obs
    n, n_firms, n_w = cur.shape
    i11 = (cur & prev).astype(float)
    i10 = (cur & ~prev).astype(float)
    i01 = (~cur & prev).astype(float)
    i00 = (~cur & ~prev).astype(float)
    # Y part and d_c coefficient of m1..m4 per product; the d_g coefficient
    # is the d_c coefficient times g
    y_part = np.stack([-pi * i11, -pi * i10, pi * i01, pi * i00])
    c_part = np.stack([-beta0 * i11, -i10, beta0 * i01, i00])
    groups = spec.groups(n_firms)
    weight = np.zeros((n_firms, len(groups)))
    for h, firms in enumerate(groups):
        weight[firms, h] = 1.0 / (len(firms) * n_w)
    if spec.instruments == "eta_split":
        inst = np.stack([np.ones_like(panel.eta), np.maximum(panel.eta, 0.0), np.maximum(-panel.eta, 0.0)])
    else:
        inst = np.ones((1, n, n_w))
    # average over firms in a group, then over products against each instrument
    y_grp = np.einsum("lnfg,fh->lnhg", y_part, weight)
    c_grp = np.einsum("lnfg,fh->lnhg", c_part, weight)
    y_mom = np.einsum("lnhg,ing->nhli", y_grp, inst)
    c_mom = np.einsum("lnhg,ing->nhli", c_grp, inst)
    g_mom = np.einsum("lnhg,ing,g->nhli", c_grp, inst, g)
    n_h, n_i = len(groups), inst.shape[0]
    k = n_h * 4 * n_i + 2
    p = n_h + 1
    y = np.empty((n, k))
    x = np.zeros((n, k, p))
    y[:, : k - 2] = y_mom.reshape(n, -1)
    rows = np.arange(k - 2).reshape(n_h, 4 * n_i)
    for h in range(n_h):
        x[:, rows[h], h] = c_mom[:, h].reshape(n, -1)
    x[:, : k - 2, -1] = g_mom.reshape(n, -1)
    scale = 1.0 / (n_firms * n_w)
    swaps = _swap_moments(pi, g, ~cur & ~prev, cur & ~prev)
    for row, (s_pi, s_g) in zip((k - 2, k - 1), swaps):
        y[:, row] = -s_pi * scale
        x[:, row, -1] = -s_g * scale
    return y, x


def beta_rows(spec: SpecConfig) -> np.ndarray:
    """Rows whose nuisance coefficients are proportional to ``beta``; every
    other entry of ``X`` and all of ``Y`` are free of ``beta``."""
    n_i = 3 if spec.instruments == "eta_split" else 1
    n_h = spec.n_params - 1
    per_row = np.repeat(np.arange(4), n_i)
    mask = np.isin(np.tile(per_row, n_h), (0, 2))
    return np.concatenate([mask, [False, False]])


def build_moments(panel: MarketPanel, spec: SpecConfig, beta0: float | None = None) -> ObservationSet:
    """Observation set with one row per market.

    The instrument used for matching is the flattened Jacobian of the
    market's moments with respect to the cost parameters.
    """
    if len(panel) == 0:
        raise ValueError("no markets")
    beta0 = panel.params.beta if beta0 is None else beta0
    y, x = moment_arrays(panel, spec, beta0)
    return ObservationSet(y, x, x.reshape(len(panel), -1))
