"""Moment inequality data model.

Each observation contributes a vector ``Y_i`` of moments evaluated at the null
parameter and a matrix ``X_i`` of coefficients on the nuisance parameter, so
that the moment vector at ``delta`` is ``Y_i - X_i delta``.  Inference uses the
scaled sums ``Y_n = n^{-1/2} sum Y_i`` and ``X_n = n^{-1/2} sum X_i``.
"""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SYMMETRY_TOL = 1e-10
BASIS_TOL = 1e-10


class DimensionError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationSet:
    """Per-observation moments.

    ``y`` is ``n x k``, ``x`` is ``n x k x p`` and ``z`` is ``n x d_z``.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2:
            raise DimensionError("y must be n x k")
        n, k = y.shape
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, k, 0 if x.ndim < 3 else x.shape[2]))
        if x.ndim != 3 or x.shape[:2] != (n, k):
            raise DimensionError(f"x must be {n} x {k} x p, got {x.shape}")
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise DimensionError("z must have one row per observation")
        for name, a in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(a)):
                raise DataFormatError(f"{name} contains missing or non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    def check_x_given_z(self, atol: float = 1e-10) -> bool:
        """Warn if two observations share a z row but not their x matrix."""
        if self.z.shape[1] == 0:
            return True
        _, inverse = np.unique(self.z, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        flat = self.x.reshape(self.n, -1)
        ok = True
        for cell in np.unique(inverse):
            rows = flat[inverse == cell]
            if rows.shape[0] > 1 and np.abs(rows - rows[0]).max() > atol:
                ok = False
                break
        if not ok:
            warnings.warn("observations with identical z have different x", stacklevel=2)
        return ok


@dataclass(frozen=True)
class NormalModel:
    """Gaussian testing problem ``Y_n ~ N(mu - X_n delta, sigma)``."""

    y_n: np.ndarray
    x_n: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y_n, dtype=float)).reshape(-1)
        k = y.shape[0]
        if k < 1:
            raise DimensionError("need at least one moment")
        x = np.asarray(self.x_n, dtype=float)
        if x.size == 0:
            x = np.zeros((k, 0))
        elif x.ndim == 1:
            x = x.reshape(k, -1)
        if x.ndim != 2 or x.shape[0] != k:
            raise DimensionError(f"x_n must be {k} x p, got {x.shape}")
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if s.shape != (k, k):
            raise DimensionError(f"sigma must be {k} x {k}, got {s.shape}")
        scale = max(1.0, float(np.abs(s).max()))
        if np.abs(s - s.T).max() > SYMMETRY_TOL * scale:
            raise ValueError("sigma is not symmetric")
        if np.diag(s).min() <= 0:
            raise ValueError("sigma must have a strictly positive diagonal")
        object.__setattr__(self, "y_n", _frozen(y))
        object.__setattr__(self, "x_n", _frozen(x))
        object.__setattr__(self, "sigma", _frozen(s))

    @property
    def k(self) -> int:
        return self.y_n.shape[0]

    @property
    def p(self) -> int:
        return self.x_n.shape[1]

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    def with_y(self, y_n: np.ndarray) -> "NormalModel":
        return NormalModel(y_n, self.x_n, self.sigma)


def build_normal_model(obs: ObservationSet, sigma: np.ndarray) -> NormalModel:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (obs.k, obs.k):
        raise DimensionError(f"sigma is {sigma.shape}, observations have k={obs.k}")
    root_n = np.sqrt(obs.n)
    return NormalModel(obs.y.sum(axis=0) / root_n, obs.x.sum(axis=0) / root_n, sigma)


def complete_basis(l: np.ndarray) -> np.ndarray:
    """Full-rank ``p x p`` matrix whose first row is ``l``.

    The remaining rows are standard basis vectors orthogonalized against
    the rows already chosen.
    """
    l = np.asarray(l, dtype=float).reshape(-1)
    norm = np.linalg.norm(l)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("target vector l must be nonzero")
    p = l.shape[0]
    ortho = [l / norm]
    rows = [l]
    for i in range(p):
        if len(rows) == p:
            break
        v = np.zeros(p)
        v[i] = 1.0
        for q in ortho:
            v = v - (q @ v) * q
        r = np.linalg.norm(v)
        if r > BASIS_TOL * max(norm, 1.0):
            ortho.append(v / r)
            rows.append(v / r)
    return np.vstack(rows)


def transform_linear_target(obs: ObservationSet, l: np.ndarray, beta0: float) -> ObservationSet:
    """Recast the null ``l'delta = beta0`` as a problem with ``p - 1`` nuisance
    parameters.

    With ``B`` invertible and first row ``l``, write ``delta = B^{-1}(beta0, d)``
    so ``Y - X delta = (Y - X B^{-1} e1 beta0) - (X B^{-1} M) d`` where ``M``
    drops the first coordinate.
    """
    slope, x_tilde = linear_target_parts(obs.x, l)
    return ObservationSet(obs.y - slope * beta0, x_tilde, obs.z)


def linear_target_parts(x: np.ndarray, l: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``X B^{-1}`` into the column multiplying the target value and the
    remaining nuisance columns.  Works on ``n x k x p`` or ``k x p`` arrays."""
    x = np.asarray(x, dtype=float)
    p = x.shape[-1]
    if p < 1:
        raise DimensionError("linear target needs at least one nuisance parameter")
    l = np.asarray(l, dtype=float).reshape(-1)
    if l.shape[0] != p:
        raise DimensionError(f"l has length {l.shape[0]}, expected {p}")
    xb = x @ np.linalg.inv(complete_basis(l))
    return xb[..., 0], xb[..., 1:]


# CSV ingestion

_Y_COL = re.compile(r"^y_(\d+)$")
_X_COL = re.compile(r"^x_(\d+)_(\d+)$")
_Z_COL = re.compile(r"^z_(\d+)$")


def _infer_dims(header: list[str]) -> dict:
    ys = [int(m.group(1)) for h in header if (m := _Y_COL.match(h))]
    xs = [(int(m.group(1)), int(m.group(2))) for h in header if (m := _X_COL.match(h))]
    zs = [int(m.group(1)) for h in header if (m := _Z_COL.match(h))]
    k = max(ys) if ys else 0
    p = max(j for _, j in xs) if xs else 0
    return {"k": k, "p": p, "d_z": max(zs) if zs else 0}


def read_observations(path: str | Path, dims: dict | None = None) -> ObservationSet:
    """Read an observation CSV.

    Columns are ``y_1..y_k``, ``x_1_1..x_k_p`` (X_i row-major) and
    ``z_1..z_dz``.  Dimensions come from ``dims``, a sidecar ``<path>.json``
    or, failing both, the header itself.
    """
    path = Path(path)
    if dims is None:
        sidecar = path.with_suffix(path.suffix + ".json")
        if sidecar.exists():
            dims = json.loads(sidecar.read_text())
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if dims is None:
            dims = _infer_dims(header)
        k, p, d_z = int(dims["k"]), int(dims["p"]), int(dims.get("d_z", 0))
        names = [f"y_{j}" for j in range(1, k + 1)]
        names += [f"x_{j}_{c}" for j in range(1, k + 1) for c in range(1, p + 1)]
        names += [f"z_{c}" for c in range(1, d_z + 1)]
        missing = [c for c in names if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing[:5]}")
        idx = [header.index(c) for c in names]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [row[i].strip() for i in idx]
            except IndexError:
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}") from None
            if any(v == "" or v.lower() in ("na", "nan") for v in vals):
                raise DataFormatError(f"{path}:{lineno}: missing value")
            try:
                rows.append([float(v) for v in vals])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    data = np.array(rows)
    n = data.shape[0]
    y = data[:, :k]
    x = data[:, k : k + k * p].reshape(n, k, p)
    z = data[:, k + k * p :]
    obs = ObservationSet(y, x, z)
    obs.check_x_given_z()
    return obs


def write_observations(path: str | Path, obs: ObservationSet) -> None:
    path = Path(path)
    header = [f"y_{j}" for j in range(1, obs.k + 1)]
    header += [f"x_{j}_{c}" for j in range(1, obs.k + 1) for c in range(1, obs.p + 1)]
    header += [f"z_{c}" for c in range(1, obs.z.shape[1] + 1)]
    data = np.hstack([obs.y, obs.x.reshape(obs.n, -1), obs.z])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"k": obs.k, "p": obs.p, "d_z": obs.z.shape[1]})
    )
