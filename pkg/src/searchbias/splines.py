"""Penalized spline bases: cubic regression splines, tensor products, I-splines.

The cubic regression spline is parameterized by its values at the knots,
with the second derivatives at the knots obtained from the natural-spline
continuity conditions. The curvature penalty ``S`` then satisfies
``beta @ S @ beta == integral of f''(t)**2`` exactly over the knot range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import qr

from .errors import RankError

DEFAULT_K = 10
DEFAULT_TENSOR_K = 5


def quantile_knots(x, k: int) -> np.ndarray:
    """``k`` knots at evenly spaced quantiles of the distinct values of ``x``."""
    xu = np.unique(np.asarray(x, dtype=float))
    if k < 3:
        raise ValueError("basis dimension must be at least 3")
    if xu.size < k:
        raise RankError(f"need at least {k} distinct values, got {xu.size}")
    knots = np.quantile(xu, np.linspace(0.0, 1.0, k))
    knots[0], knots[-1] = xu[0], xu[-1]
    return knots


def sum_to_zero_transform(X: np.ndarray) -> np.ndarray:
    """Null-space basis ``Z`` of the column-mean constraint, so ``(X @ Z).sum(0) == 0``."""
    c = X.mean(axis=0)[:, None]
    q, _ = qr(c, mode="full")
    return q[:, 1:]


def _crs_matrices(knots):
    h = np.diff(knots)
    k = knots.size
    D = np.zeros((k - 2, k))
    B = np.zeros((k - 2, k - 2))
    for i in range(k - 2):
        D[i, i] = 1.0 / h[i]
        D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
        D[i, i + 2] = 1.0 / h[i + 1]
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i < k - 3:
            B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
    BinvD = np.linalg.solve(B, D)
    F = np.zeros((k, k))
    F[1:-1] = BinvD
    S = D.T @ BinvD
    return F, (S + S.T) / 2.0


@dataclass(frozen=True)
class SmoothBasis:
    """Cubic regression spline with curvature penalty and sum-to-zero constraint.

    ``evaluate`` gives the raw k-column basis; ``design`` the constrained
    ``k - 1`` columns. Outside the knot range the spline is continued
    linearly.
    """

    knots: np.ndarray
    F: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.knots.size

    @property
    def penalty(self) -> np.ndarray:
        P = self.Z.T @ self.S @ self.Z
        return (P + P.T) / 2.0

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        kn = self.knots
        j = np.clip(np.searchsorted(kn, x, side="right") - 1, 0, kn.size - 2)
        return x, j, kn[j], kn[j + 1], kn[j + 1] - kn[j]

    def evaluate(self, x) -> np.ndarray:
        x, j, lo, hi, h = self._locate(x)
        xc = np.clip(x, self.knots[0], self.knots[-1])
        n, k = x.size, self.k
        rows = np.arange(n)
        am = (hi - xc) / h
        ap = (xc - lo) / h
        cm = ((hi - xc) ** 3 / h - h * (hi - xc)) / 6.0
        cp = ((xc - lo) ** 3 / h - h * (xc - lo)) / 6.0
        X = cm[:, None] * self.F[j] + cp[:, None] * self.F[j + 1]
        X[rows, j] += am
        X[rows, j + 1] += ap
        outside = (x < self.knots[0]) | (x > self.knots[-1])
        if np.any(outside):
            edge = np.where(x[outside] < self.knots[0], self.knots[0], self.knots[-1])
            X[outside] += (x[outside] - edge)[:, None] * self.derivative(edge)
        return X

    def derivative(self, x) -> np.ndarray:
        """First-derivative basis rows, evaluated inside the knot range."""
        x, j, lo, hi, h = self._locate(x)
        x = np.clip(x, self.knots[0], self.knots[-1])
        rows = np.arange(x.size)
        dm = (-3.0 * (hi - x) ** 2 / h + h) / 6.0
        dp = (3.0 * (x - lo) ** 2 / h - h) / 6.0
        X = dm[:, None] * self.F[j] + dp[:, None] * self.F[j + 1]
        X[rows, j] -= 1.0 / h
        X[rows, j + 1] += 1.0 / h
        return X

    def second_derivative(self, x) -> np.ndarray:
        x, j, lo, hi, h = self._locate(x)
        inside = (x >= self.knots[0]) & (x <= self.knots[-1])
        X = ((hi - x) / h)[:, None] * self.F[j] + ((x - lo) / h)[:, None] * self.F[j + 1]
        X[~inside] = 0.0
        return X

    def design(self, x) -> np.ndarray:
        return self.evaluate(x) @ self.Z

    def to_dict(self) -> dict:
        return {"type": "cr", "knots": self.knots.tolist(), "k": self.k,
                "penalty": self.S.tolist(), "constraint": self.Z.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SmoothBasis":
        knots = np.asarray(d["knots"], dtype=float)
        F, S = _crs_matrices(knots)
        return cls(knots, F, S, np.asarray(d["constraint"], dtype=float))


def build_crs(x_data, k: int = DEFAULT_K) -> SmoothBasis:
    """Cubic regression spline basis of dimension ``k`` on quantile knots of ``x_data``."""
    x_data = np.asarray(x_data, dtype=float)
    knots = quantile_knots(x_data, k)
    F, S = _crs_matrices(knots)
    raw = SmoothBasis(knots, F, S, np.eye(k))
    Z = sum_to_zero_transform(raw.evaluate(x_data))
    return SmoothBasis(knots, F, S, Z)


def row_kron(*mats) -> np.ndarray:
    """Row-wise Kronecker product of design matrices with equal row counts."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, :, None] * m[:, None, :]).reshape(out.shape[0], -1)
    return out


@dataclass(frozen=True)
class TensorBasis:
    """Full tensor product of unconstrained marginal cubic regression splines.

    One penalty per margin: the marginal curvature penalty Kronecker-multiplied
    with identities on the other margins.
    """

    margins: tuple
    Z: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return int(np.prod([m.k for m in self.margins]))

    @property
    def raw_penalties(self) -> list:
        out = []
        for i, m in enumerate(self.margins):
            parts = [np.eye(mm.k) for mm in self.margins]
            parts[i] = m.S
            P = parts[0]
            for p in parts[1:]:
                P = np.kron(P, p)
            out.append(P)
        return out

    @property
    def penalties(self) -> list:
        out = []
        for P in self.raw_penalties:
            Q = self.Z.T @ P @ self.Z
            out.append((Q + Q.T) / 2.0)
        return out

    def evaluate(self, *xs) -> np.ndarray:
        if len(xs) != len(self.margins):
            raise ValueError(f"expected {len(self.margins)} covariates")
        return row_kron(*(m.evaluate(x) for m, x in zip(self.margins, xs)))

    def design(self, *xs) -> np.ndarray:
        return self.evaluate(*xs) @ self.Z

    def to_dict(self) -> dict:
        return {"type": "te", "margins": [m.to_dict() for m in self.margins],
                "constraint": self.Z.tolist()}


def build_tensor(*xs, k_marginal: int = DEFAULT_TENSOR_K) -> TensorBasis:
    """Tensor-product smooth over the given covariates with ``k_marginal`` per margin."""
    margins = []
    for x in xs:
        b = build_crs(x, k_marginal)
        margins.append(SmoothBasis(b.knots, b.F, b.S, np.eye(b.k)))
    raw = TensorBasis(tuple(margins), np.eye(int(np.prod([m.k for m in margins]))))
    Z = sum_to_zero_transform(raw.evaluate(*xs))
    return TensorBasis(tuple(margins), Z)


@dataclass(frozen=True)
class MonotoneBasis:
    """I-spline basis: cumulative sums of cubic B-splines.

    Each function rises from 0 to 1 over the knot range, so any nonnegative
    combination is nondecreasing. Continued linearly outside the range.
    """

    knots: np.ndarray
    degree: int = 3

    @property
    def t(self) -> np.ndarray:
        d = self.degree
        return np.r_[[self.knots[0]] * d, self.knots, [self.knots[-1]] * d]

    @property
    def k(self) -> int:
        return self.knots.size - 2 + self.degree

    def _bsplines(self, x, nu=0):
        t = self.t
        nb = t.size - self.degree - 1
        spl = BSpline(t, np.eye(nb), self.degree, extrapolate=False)
        if nu:
            spl = spl.derivative(nu)
        out = spl(x)
        return np.nan_to_num(out, nan=0.0)

    def _ispline(self, x, nu=0):
        B = self._bsplines(x, nu)
        # I_i = sum_{j >= i} B_j; drop i = 0, which is identically one.
        I = np.cumsum(B[:, ::-1], axis=1)[:, ::-1]
        return I[:, 1:]

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.knots[0], self.knots[-1]
        xc = np.clip(x, lo, hi)
        X = self._ispline(xc)
        X[x >= hi] = 1.0
        X[x <= lo] = 0.0
        for edge, mask in ((lo, x < lo), (hi, x > hi)):
            if np.any(mask):
                slope = self.derivative(np.array([edge]))[0]
                X[mask] += (x[mask] - edge)[:, None] * slope
        return X

    def derivative(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.knots[0], self.knots[-1])
        # nudge the right boundary inside so the last polynomial piece is used
        x = np.where(x >= self.knots[-1], np.nextafter(self.knots[-1], -np.inf), x)
        return self._ispline(x, nu=1)

    def to_dict(self) -> dict:
        return {"type": "ispline", "knots": self.knots.tolist(), "degree": self.degree}


def build_monotone(x_data, k: int = DEFAULT_K) -> MonotoneBasis:
    """I-spline basis with ``k`` functions on quantile knots of ``x_data``."""
    if k < 3:
        raise ValueError("basis dimension must be at least 3")
    knots = quantile_knots(x_data, k - 1)
    return MonotoneBasis(knots)
