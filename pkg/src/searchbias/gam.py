"""Gaussian additive models: penalized least squares with REML smoothing selection.

Smoothing parameters are optimized on the log scale: a coordinate-wise
sweep over an integer grid, then Nelder-Mead refinement from the best grid
point. The restricted likelihood is profiled over the scale parameter,

    REML(lam) = (n - M) + log|X'X + S_lam| - log|S_lam|_+ + (n - M) log(2 pi sigma2),
    sigma2    = (||y - X b||^2 + b' S_lam b) / (n - M),

with ``M`` the null-space dimension of ``S_lam``. Pseudo-determinants are
evaluated in a fixed eigenbasis per penalty block so that they stay exact
when the smoothing parameters differ by many orders of magnitude.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.optimize import lsq_linear, minimize

from . import splines
from .errors import ConvergenceError, RankError

GRID = np.arange(-8.0, 13.0)
LOG_LAMBDA_BOUNDS = (-12.0, 16.0)
Z_95 = 1.959963984540054


@dataclass(frozen=True)
class Smooth:
    """A smooth term. ``kind`` is "cr" (univariate), "te" (tensor) or "mono"
    (unpenalized I-spline, for shape-constrained fits)."""

    variables: tuple
    kind: str = "cr"
    k: int | None = None
    lambda_group: str | None = None

    def __post_init__(self):
        if isinstance(self.variables, str):
            object.__setattr__(self, "variables", (self.variables,))
        else:
            object.__setattr__(self, "variables", tuple(self.variables))
        if self.kind not in ("cr", "te", "mono"):
            raise ValueError(f"unknown smooth kind {self.kind!r}")
        if self.kind != "te" and len(self.variables) != 1:
            raise ValueError(f"{self.kind} smooths take one variable")

    @property
    def label(self) -> str:
        prefix = {"cr": "s", "te": "te", "mono": "m"}[self.kind]
        return f"{prefix}({','.join(self.variables)})"


@dataclass(frozen=True)
class ModelSpec:
    response: str
    linear: tuple = ()
    smooths: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "linear", tuple(self.linear))
        object.__setattr__(self, "smooths", tuple(
            s if isinstance(s, Smooth) else Smooth(s) for s in self.smooths))
        smooth_vars = {v for s in self.smooths for v in s.variables}
        both = smooth_vars & set(self.linear)
        if both:
            raise ValueError(f"series in both linear and smooth parts: {sorted(both)}")
        if not self.linear and not self.smooths:
            raise ValueError("model needs at least one term")


@dataclass(frozen=True)
class Term:
    label: str
    kind: str
    variables: tuple
    columns: slice
    basis: object = None


@dataclass(frozen=True)
class PenaltyBlock:
    """Penalties acting on one column block, expressed in a shared eigenbasis.

    The block penalty is ``W @ diag(sum_j lam_j * eig[j]) @ W.T`` where only
    the ``pos`` columns carry nonzero eigenvalues.
    """

    term: str
    columns: slice
    W: np.ndarray
    eig: tuple
    params: tuple
    pos: np.ndarray
    logdet_const: float
    matrices: tuple  # the individual (scaled) block penalties

    @property
    def rank(self) -> int:
        return int(self.pos.sum())


@dataclass(frozen=True)
class PenalizedDesign:
    """Model matrix with per-block penalties. ``n_params`` smoothing parameters."""

    X: np.ndarray
    terms: tuple
    blocks: tuple
    n_params: int
    param_names: tuple
    column_names: tuple

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def penalty_matrix(self, lambdas) -> np.ndarray:
        lambdas = np.asarray(lambdas, dtype=float)
        S = np.zeros((self.p, self.p))
        for b in self.blocks:
            for mat, j in zip(b.matrices, b.params):
                S[b.columns, b.columns] += lambdas[j] * mat
        return S

    def penalty_root(self, lambdas) -> np.ndarray:
        """``E`` with ``E.T @ E == penalty_matrix(lambdas)``."""
        lambdas = np.asarray(lambdas, dtype=float)
        rows = []
        for b in self.blocks:
            d = sum(lambdas[j] * e for j, e in zip(b.params, b.eig))[b.pos]
            E = np.zeros((b.rank, self.p))
            E[:, b.columns] = np.sqrt(np.maximum(d, 0.0))[:, None] * b.W[:, b.pos].T
            rows.append(E)
        return np.vstack(rows) if rows else np.zeros((0, self.p))

    def log_pdet(self, lambdas) -> float:
        lambdas = np.asarray(lambdas, dtype=float)
        total = 0.0
        for b in self.blocks:
            d = sum(lambdas[j] * e for j, e in zip(b.params, b.eig))[b.pos]
            total += float(np.sum(np.log(d))) + b.logdet_const
        return total

    @property
    def null_dim(self) -> int:
        return self.p - sum(b.rank for b in self.blocks)

    def term(self, label) -> Term:
        for t in self.terms:
            if t.label == label or (t.kind == "linear" and t.variables[0] == label):
                return t
        raise KeyError(label)

    def term_matrix(self, term: Term, data: Mapping) -> np.ndarray:
        if term.kind == "intercept":
            return np.ones((len(next(iter(data.values()))), 1))
        if term.kind == "linear":
            return np.asarray(data[term.variables[0]], dtype=float)[:, None]
        cols = [np.asarray(data[v], dtype=float) for v in term.variables]
        return term.basis.design(*cols) if term.kind == "te" else (
            term.basis.evaluate(cols[0]) if term.kind == "mono" else term.basis.design(cols[0]))


def _scale_factor(Xb, S):
    ns = np.linalg.norm(S)
    return np.linalg.norm(Xb.T @ Xb) / ns if ns > 0 else 1.0


def _eigen_block(term, columns, mats, params):
    """Shared eigenbasis for a block whose penalties are given as ``mats``."""
    P = sum(mats)
    ev, V = np.linalg.eigh(P)
    tol = 1e-10 * max(ev.max(), 1e-300)
    pos = ev > tol
    eig = tuple(np.einsum("ij,ik,kj->j", V, m, V) for m in mats)
    return PenaltyBlock(term, columns, V, eig, tuple(params), pos, 0.0, tuple(mats))


def _tensor_block(term, columns, basis, scales, params):
    """Exact eigenstructure of Kronecker penalties seen through the constraint."""
    marg = [np.linalg.eigh(m.S) for m in basis.margins]
    U = marg[0][1]
    for _, v in marg[1:]:
        U = np.kron(U, v)
    eig = []
    for i in range(len(marg)):
        e = np.ones(1)
        for j, (ev, _) in enumerate(marg):
            e = np.kron(e, np.clip(ev, 0.0, None) if i == j else np.ones(ev.size))
        eig.append(scales[i] * e)
    total = sum(eig)
    pos = total > 1e-10 * total.max()
    W = basis.Z.T @ U
    Wp = W[:, pos]
    sign, logdet = np.linalg.slogdet(Wp.T @ Wp)
    if sign <= 0:
        raise RankError(f"tensor penalty for {term} loses rank under the constraint")
    mats = tuple(s * P for s, P in zip(scales, basis.penalties))
    return PenaltyBlock(term, columns, W, tuple(eig), tuple(params), pos, float(logdet), mats)


def build_design(spec: ModelSpec, data: Mapping) -> PenalizedDesign:
    """Assemble intercept, linear columns and constrained smooth bases.

    A smooth over a constant series is dropped (it is absorbed by the
    intercept) with a warning; a univariate smooth with fewer distinct
    values than its basis dimension gets a smaller basis.
    """
    n = len(np.asarray(data[spec.response]))
    cols, names, terms = [np.ones((n, 1))], ["(Intercept)"], [Term("(Intercept)", "intercept", (), slice(0, 1))]
    pending = []  # (term, Xb, kind, basis)
    start = 1
    for v in spec.linear:
        x = np.asarray(data[v], dtype=float)
        cols.append(x[:, None])
        names.append(v)
        terms.append(Term(v, "linear", (v,), slice(start, start + 1)))
        start += 1
    group_index: dict = {}
    param_names: list = []

    def param(key):
        if key not in group_index:
            group_index[key] = len(param_names)
            param_names.append(key)
        return group_index[key]

    blocks = []
    for sm in spec.smooths:
        xs = [np.asarray(data[v], dtype=float) for v in sm.variables]
        n_distinct = [np.unique(x).size for x in xs]
        if sm.kind == "te":
            k = sm.k or splines.DEFAULT_TENSOR_K
            if min(n_distinct) < k:
                raise RankError(f"{sm.label}: a margin has fewer than {k} distinct values")
            basis = splines.build_tensor(*xs, k_marginal=k)
            Xb = basis.design(*xs)
        else:
            if n_distinct[0] == 1:
                warnings.warn(f"{sm.label}: constant covariate, term dropped", stacklevel=2)
                continue
            k = min(sm.k or splines.DEFAULT_K, n_distinct[0])
            if k < 3:
                raise RankError(f"{sm.label}: need at least 3 distinct values")
            if sm.kind == "mono":
                basis = splines.build_monotone(xs[0], max(k, 4))
                Xb = basis.evaluate(xs[0])
            else:
                basis = splines.build_crs(xs[0], k)
                Xb = basis.design(xs[0])
        cols_slice = slice(start, start + Xb.shape[1])
        term = Term(sm.label, sm.kind, sm.variables, cols_slice, basis)
        terms.append(term)
        cols.append(Xb)
        names.extend(f"{sm.label}.{i + 1}" for i in range(Xb.shape[1]))
        start += Xb.shape[1]
        if sm.kind == "cr":
            S = basis.penalty
            sc = _scale_factor(Xb, S)
            j = param(sm.lambda_group or sm.label)
            blocks.append(_eigen_block(sm.label, cols_slice, [sc * S], [j]))
        elif sm.kind == "te":
            scales = [_scale_factor(Xb, P) for P in basis.penalties]
            params = [param(f"{sm.label}[{i + 1}]") for i in range(len(scales))]
            blocks.append(_tensor_block(sm.label, cols_slice, basis, scales, params))
    X = np.hstack(cols)
    return PenalizedDesign(X, tuple(terms), tuple(blocks), len(param_names),
                           tuple(param_names), tuple(names))


def check_rank(design: PenalizedDesign, rtol: float = 1e-9):
    """Raise ``RankError`` naming aliased columns if the coefficients are not
    identified by ``X`` together with the (unit-weight) penalties.

    Smooth columns that vanish on the data but carry a penalty are
    identified through the penalty, so sparse tensor cells pass.
    """
    X = np.vstack([design.X, design.penalty_root(np.ones(design.n_params))])
    _, R, piv = qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0])) if d.size else 0
    if rank < X.shape[1]:
        aliased = [design.column_names[i] for i in piv[rank:]]
        raise RankError(f"design is rank deficient; aliased columns: {aliased}", aliased)


@dataclass
class PlsFit:
    beta: np.ndarray
    edf_total: float
    rss: float
    penalty: float


def fit_pls(design: PenalizedDesign, y, lambdas) -> PlsFit:
    """Minimize ``||y - X b||^2 + sum_j lam_j b' S_j b`` via QR of the augmented system."""
    y = np.asarray(y, dtype=float)
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lambdas.size != design.n_params:
        raise ValueError(f"expected {design.n_params} smoothing parameters")
    if np.any(lambdas < 0):
        raise ValueError("smoothing parameters must be nonnegative")
    X = design.X
    E = design.penalty_root(lambdas)
    A = np.vstack([X, E])
    Q, R, piv = qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > 1e-11 * d[0]))
    if rank < X.shape[1]:
        aliased = [design.column_names[i] for i in piv[rank:]]
        raise RankError(f"penalized system is singular; aliased columns: {aliased}", aliased)
    rhs = Q.T @ np.r_[y, np.zeros(E.shape[0])]
    beta = np.empty(X.shape[1])
    beta[piv] = solve_triangular(R, rhs)
    resid = y - X @ beta
    pen = float(np.sum((E @ beta) ** 2))
    # tr((X'X + S)^-1 X'X) = ||Q_X||_F^2 where Q_X are the first n rows of Q
    edf = float(np.sum(Q[: X.shape[0]] ** 2))
    return PlsFit(beta, edf, float(resid @ resid), pen)


class RemlProblem:
    """Precomputed pieces for repeated REML evaluation on one design."""

    def __init__(self, design: PenalizedDesign, y):
        self.design = design
        self.y = np.asarray(y, dtype=float)
        X = design.X
        self.n, self.p = X.shape
        Q, R = np.linalg.qr(X)
        self.R = R
        self.f = Q.T @ self.y
        self.rss0 = max(float(self.y @ self.y - self.f @ self.f), 0.0)
        self.Xty = X.T @ self.y
        self.M = design.null_dim
        self.evaluated: list = []

    def solve(self, lambdas):
        E = self.design.penalty_root(lambdas)
        R2 = np.linalg.qr(np.vstack([self.R, E]), mode="r")
        tmp = solve_triangular(R2, self.Xty, trans="T")
        beta = solve_triangular(R2, tmp)
        r = self.f - self.R @ beta
        rss = self.rss0 + float(r @ r)
        pen = float(np.sum((E @ beta) ** 2))
        return beta, R2, rss, pen

    def criterion(self, rho) -> float:
        lambdas = np.exp(np.asarray(rho, dtype=float))
        _, R2, rss, pen = self.solve(lambdas)
        diag = np.abs(np.diag(R2))
        if np.any(diag == 0):
            return math.inf
        dof = self.n - self.M
        sigma2 = (rss + pen) / dof
        if sigma2 <= 0:
            return -math.inf
        logdet = 2.0 * float(np.sum(np.log(diag)))
        value = dof + logdet - self.design.log_pdet(lambdas) + dof * math.log(2 * math.pi * sigma2)
        self.evaluated.append((tuple(np.asarray(rho, dtype=float)), value))
        return value


@dataclass
class SmoothCurve:
    term: str
    variable: str
    grid: np.ndarray
    fit: np.ndarray
    se: np.ndarray
    data_x: np.ndarray
    partial: np.ndarray

    @property
    def lower(self):
        return self.fit - Z_95 * self.se

    @property
    def upper(self):
        return self.fit + Z_95 * self.se

    def to_rows(self):
        return [
            {"x": float(x), "fit": float(f), "lower": float(lo), "upper": float(hi)}
            for x, f, lo, hi in zip(self.grid, self.fit, self.lower, self.upper)
        ]


@dataclass
class FitResult:
    """Fitted additive model. Standard errors come from the posterior covariance
    ``(X'X + S)^-1 sigma2`` conditional on the selected smoothing parameters."""

    design: PenalizedDesign = field(repr=False)
    beta: np.ndarray
    cov: np.ndarray = field(repr=False)
    lambdas: np.ndarray
    sigma2: float
    edf: dict
    edf_total: float
    adj_r2: float
    fitted: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    reml: float = math.nan
    curves: dict = field(default_factory=dict, repr=False)
    warnings: list = field(default_factory=list)
    grid_evaluations: list = field(default_factory=list, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def coef(self, name) -> float:
        return float(self.beta[self.design.column_names.index(name)])

    def coef_se(self, name) -> float:
        return float(self.se[self.design.column_names.index(name)])

    def to_dict(self) -> dict:
        names = self.design.column_names
        return {
            "coefficients": dict(zip(names, map(float, self.beta))),
            "se": dict(zip(names, map(float, self.se))),
            "lambda": dict(zip(self.design.param_names, map(float, self.lambdas))),
            "sigma2": self.sigma2,
            "edf": {k: float(v) for k, v in self.edf.items()},
            "edf_total": self.edf_total,
            "adj_r2": self.adj_r2,
            "reml": self.reml,
            "warnings": list(self.warnings),
        }


def _finish(design, y, lambdas, beta=None, reml=math.nan, data=None, notes=()):
    """Derived quantities of a fit at fixed smoothing parameters."""
    X = design.X
    n, p = X.shape
    S = design.penalty_matrix(lambdas)
    XtX = X.T @ X
    H = XtX + S
    Hinv = np.linalg.inv(H)
    Hinv = (Hinv + Hinv.T) / 2.0
    if beta is None:
        beta = Hinv @ (X.T @ y)
    fitted = X @ beta
    resid = y - fitted
    rss = float(resid @ resid)
    pen = float(beta @ S @ beta)
    F = Hinv @ XtX
    fdiag = np.diag(F)
    edf = {}
    for t in design.terms:
        edf[t.label] = float(np.sum(fdiag[t.columns]))
    edf_total = float(np.sum(fdiag))
    dof = n - design.null_dim
    sigma2 = (rss + pen) / dof
    tss = float(np.sum((y - y.mean()) ** 2))
    adj_r2 = 1.0 - (rss / (n - edf_total)) / (tss / (n - 1)) if tss > 0 else math.nan
    res = FitResult(design, beta, Hinv * sigma2, np.asarray(lambdas, dtype=float), sigma2,
                    edf, edf_total, adj_r2, fitted, resid, reml, warnings=list(notes))
    if data is not None:
        res.curves = smooth_curves(res, data)
    return res


def smooth_curves(fit: FitResult, data: Mapping, n_grid: int = 100) -> dict:
    """Component curves with pointwise standard errors for univariate smooths."""
    curves = {}
    for t in fit.design.terms:
        if t.kind not in ("cr", "mono"):
            continue
        x = np.asarray(data[t.variables[0]], dtype=float)
        grid = np.linspace(x.min(), x.max(), n_grid)
        Xg = t.basis.design(grid) if t.kind == "cr" else t.basis.evaluate(grid)
        Xd = fit.design.X[:, t.columns]
        b = fit.beta[t.columns]
        V = fit.cov[t.columns, t.columns]
        se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Xg, V, Xg), 0.0, None))
        curves[t.label] = SmoothCurve(t.label, t.variables[0], grid, Xg @ b, se, x,
                                      Xd @ b + fit.residuals)
    return curves


def optimize_reml(problem: RemlProblem, grid=GRID, tol: float = 1e-6, max_sweeps: int = 6):
    """Coordinate-wise grid search followed by Nelder-Mead; returns (rho, value, converged)."""
    k = problem.design.n_params
    lo, hi = LOG_LAMBDA_BOUNDS
    rho = np.zeros(k)
    best = problem.criterion(rho)
    for _ in range(max_sweeps):
        changed = False
        for j in range(k):
            for g in grid:
                if g == rho[j]:
                    continue
                trial = rho.copy()
                trial[j] = g
                val = problem.criterion(trial)
                if val < best:
                    best, rho, changed = val, trial, True
        if not changed:
            break

    def objective(r):
        return problem.criterion(np.clip(r, lo, hi))

    simplex = np.vstack([rho] + [rho + np.eye(k)[j] * 0.5 for j in range(k)])
    res = minimize(objective, rho, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": tol, "fatol": tol * max(1.0, abs(best)),
                            "maxiter": 400 * k, "maxfev": 800 * k})
    r_opt = np.clip(res.x, lo, hi)
    v_opt = problem.criterion(r_opt)
    if v_opt > best:
        r_opt, v_opt = rho, best
    return r_opt, v_opt, bool(res.success)


def fit_reml(spec: ModelSpec, data: Mapping, strict: bool = True) -> FitResult:
    """Fit ``spec`` with REML-selected smoothing parameters."""
    y = np.asarray(data[spec.response], dtype=float)
    design = build_design(spec, data)
    check_rank(design)
    if y.size <= design.null_dim:
        raise RankError(f"n={y.size} does not exceed the unpenalized dimension {design.null_dim}")
    notes = []
    if design.n_params == 0:
        fit = _finish(design, y, np.zeros(0), data=data)
        fit.reml = RemlProblem(design, y).criterion(np.zeros(0))
        return fit
    problem = RemlProblem(design, y)
    rho, value, converged = optimize_reml(problem)
    lo, hi = LOG_LAMBDA_BOUNDS
    for name, r in zip(design.param_names, rho):
        if r <= lo + 1e-8 or r >= hi - 1e-8:
            msg = f"smoothing parameter for {name} at search boundary (log lambda = {r:g})"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
    lambdas = np.exp(rho)
    beta, _, _, _ = problem.solve(lambdas)
    fit = _finish(design, y, lambdas, beta=beta, reml=value, data=data, notes=notes)
    fit.grid_evaluations = list(problem.evaluated)
    if not converged:
        if strict:
            raise ConvergenceError("REML optimization did not converge", best_fit=fit)
        fit.warnings.append("REML optimization did not converge")
    return fit


def fit_constrained(design: PenalizedDesign, y, lambdas, lower: Sequence) -> np.ndarray:
    """Penalized least squares with elementwise lower bounds on the coefficients."""
    y = np.asarray(y, dtype=float)
    E = design.penalty_root(lambdas)
    A = np.vstack([design.X, E])
    b = np.r_[y, np.zeros(E.shape[0])]
    res = lsq_linear(A, b, bounds=(np.asarray(lower, dtype=float), np.inf),
                     method="bvls", tol=1e-12, lsq_solver="exact")
    return res.x


def refit_constrained(fit: FitResult, data: Mapping, lower) -> FitResult:
    """Re-solve ``fit`` at its smoothing parameters subject to ``lower`` bounds."""
    y = np.asarray(fit.fitted + fit.residuals)
    beta = fit_constrained(fit.design, y, fit.lambdas, lower)
    return _finish(fit.design, y, fit.lambdas, beta=beta, reml=math.nan, data=data,
                   notes=fit.warnings)
