"""Search ROAS estimators over an ``MmmPanel``.

* ``naive``            y ~ 1 + x1 (OLS)
* ``demand_adjusted``  y ~ 1 + x1 + s(v1 + v2 + v3)
* ``sbc``              y ~ 1 + x1 + s(v1) + s(v2) + s(v3)
* ``sbc_tensor``       y ~ 1 + x1 + te(v1, v2, v3)
* ``sbc_monotone``     y ~ 1 + m(x1) + s(v1) + s(v2) + s(v3), m nondecreasing,
                       summarized by the marginal ROAS of m

plus a two-stage full-MMM fit that holds the SBC search coefficient fixed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gam, splines
from .dataset import MmmPanel
from .errors import EstimationError, RankError

VOLUMES = ("v1", "v2", "v3")
COLLINEARITY_R2 = 0.999
TENSOR_N_FACTOR = 3
DEFAULT_DELTA = 0.01


@dataclass
class RoasEstimate:
    method: str
    beta1: float
    se: float | None
    fit: gam.FitResult | None = field(default=None, repr=False)
    index_base: float | None = None
    info: dict = field(default_factory=dict)

    def indexed(self, base: float) -> "RoasEstimate":
        """Point estimate and se divided by ``base``."""
        se = None if self.se is None else self.se / base
        return RoasEstimate(self.method, self.beta1 / base, se, self.fit, base, dict(self.info))

    def to_dict(self) -> dict:
        d = {"method": self.method, "beta1": self.beta1, "se": self.se,
             "index_base": self.index_base, "info": self.info}
        if self.fit is not None:
            d["fit"] = self.fit.to_dict()
            d["edf"] = d["fit"]["edf"]
            d["adj_r2"] = self.fit.adj_r2
        return d


def _fit(spec, data) -> gam.FitResult:
    return gam.fit_reml(spec, data, strict=False)


def _estimate(method, fit, **info) -> RoasEstimate:
    return RoasEstimate(method, fit.coef("x1"), fit.coef_se("x1"), fit, info=info)


def estimate_naive(panel: MmmPanel) -> RoasEstimate:
    if np.ptp(panel.x1) == 0:
        raise RankError("search spend has zero variance", ["x1"])
    fit = _fit(gam.ModelSpec("y", ["x1"]), panel.as_data())
    return _estimate("naive", fit)


def estimate_demand_adjusted(panel: MmmPanel) -> RoasEstimate:
    """Control for demand with a smooth of category search volume."""
    fit = _fit(gam.ModelSpec("y", ["x1"], [gam.Smooth("category")]), panel.as_data())
    return _estimate("demand_adjusted", fit)


def _unpenalized_r2(x, Xb) -> float:
    A = np.column_stack([np.ones(x.size), Xb])
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    r = x - A @ coef
    tss = float(np.sum((x - x.mean()) ** 2))
    return 1.0 - float(r @ r) / tss if tss > 0 else 1.0


def volume_collinearity(panel: MmmPanel, k: int = splines.DEFAULT_K) -> float:
    """R^2 of search spend on the unpenalized spline bases of the volumes."""
    blocks = []
    for v in VOLUMES:
        x = getattr(panel, v)
        nd = np.unique(x).size
        if nd < 3:
            continue
        blocks.append(splines.build_crs(x, min(k, nd)).design(x))
    if not blocks:
        return 0.0
    return _unpenalized_r2(np.asarray(panel.x1), np.hstack(blocks))


def estimate_sbc(panel: MmmPanel, controls: Sequence[str] = (), k: int | None = None) -> RoasEstimate:
    """Back-door adjusted estimate: additive smooths of the three query volumes.

    ``controls`` names extra x2 channels entering as smooths, for graphs in
    which the non-search channel is part of the adjustment set.
    """
    if np.ptp(panel.x1) == 0:
        raise RankError("search spend has zero variance", ["x1"])
    r2 = volume_collinearity(panel)
    if r2 > COLLINEARITY_R2:
        raise EstimationError(
            f"search spend is (nearly) a function of query volume: R^2 = {r2:.6f} > {COLLINEARITY_R2}")
    smooths = [gam.Smooth(v, k=k) for v in VOLUMES] + [gam.Smooth(c, k=k) for c in controls]
    fit = _fit(gam.ModelSpec("y", ["x1"], smooths), panel.as_data())
    return _estimate("sbc", fit, collinearity_r2=r2, controls=list(controls))


def tensor_min_n(k_marginal: int = splines.DEFAULT_TENSOR_K) -> int:
    return TENSOR_N_FACTOR * (k_marginal**3 - 1)


def estimate_sbc_tensor(panel: MmmPanel, k_marginal: int = splines.DEFAULT_TENSOR_K) -> RoasEstimate:
    """Back-door adjusted estimate with a full tensor-product smooth of the volumes."""
    need = tensor_min_n(k_marginal)
    if len(panel) < need:
        raise EstimationError(
            f"tensor-product model needs at least {need} observations, panel has {len(panel)}")
    smooth = gam.Smooth(VOLUMES, kind="te", k=k_marginal)
    fit = _fit(gam.ModelSpec("y", ["x1"], [smooth]), panel.as_data())
    return _estimate("sbc_tensor", fit)


def marginal_roas(s: Callable, x, delta: float = DEFAULT_DELTA) -> float:
    """Sales increment per spend increment when every period's spend grows by ``delta``."""
    x = np.asarray(x, dtype=float)
    if not 0 < delta <= 0.1:
        raise ValueError("delta must lie in (0, 0.1]")
    total = float(np.sum(x))
    if total == 0:
        raise EstimationError("marginal ROAS is undefined for all-zero spend")
    return float(np.sum(s((1 + delta) * x) - s(x))) / (delta * total)


def estimate_sbc_monotone_marginal(panel: MmmPanel, delta: float = DEFAULT_DELTA,
                                   k: int = splines.DEFAULT_K) -> RoasEstimate:
    """Replace the linear spend term by a nondecreasing spline and report its marginal ROAS.

    Volume smoothing parameters are chosen by REML with the spend spline
    unconstrained; the model is then re-solved with nonnegative spend
    coefficients. No standard error is produced.
    """
    if not 0 < delta <= 0.1:
        raise ValueError("delta must lie in (0, 0.1]")
    if float(np.sum(panel.x1)) == 0:
        raise EstimationError("marginal ROAS is undefined for all-zero spend")
    data = panel.as_data()
    spec = gam.ModelSpec("y", [], [gam.Smooth("x1", kind="mono", k=k)] + [gam.Smooth(v) for v in VOLUMES])
    fit = _fit(spec, data)
    term = fit.design.term("m(x1)")
    lower = np.full(fit.design.p, -np.inf)
    lower[term.columns] = 0.0
    fit = gam.refit_constrained(fit, data, lower)
    coef = fit.beta[term.columns]

    def s_hat(x):
        return term.basis.evaluate(x) @ coef

    beta = marginal_roas(s_hat, panel.x1, delta)
    return RoasEstimate("sbc_monotone", beta, None, fit, info={"delta": delta})


@dataclass
class FullMmmEstimate:
    beta1: float
    beta1_se: float
    channels: dict
    fit: gam.FitResult = field(repr=False)
    stage1: RoasEstimate = field(repr=False)
    bias_corrected: bool = False

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta1_se": self.beta1_se,
            "channels": self.channels,
            "channels_bias_corrected": self.bias_corrected,
            "note": "non-search coefficients carry no selection-bias correction",
            "stage2": self.fit.to_dict(),
        }


def estimate_full_mmm(panel: MmmPanel, stage1: RoasEstimate | None = None) -> FullMmmEstimate:
    """Fix the SBC search coefficient, then regress the remaining sales on the other channels."""
    if not panel.x2:
        raise EstimationError("full MMM needs at least one non-search channel")
    stage1 = stage1 or estimate_sbc(panel)
    data = panel.as_data()
    data["y_rest"] = data["y"] - stage1.beta1 * data["x1"]
    spec = gam.ModelSpec("y_rest", list(panel.x2), [gam.Smooth(v) for v in VOLUMES])
    fit = _fit(spec, data)
    channels = {c: {"estimate": fit.coef(c), "se": fit.coef_se(c),
                    "t": fit.coef(c) / fit.coef_se(c) if fit.coef_se(c) > 0 else math.nan}
                for c in panel.x2}
    return FullMmmEstimate(stage1.beta1, stage1.se, channels, fit, stage1)


METHODS: dict = {
    "naive": estimate_naive,
    "demand_adjusted": estimate_demand_adjusted,
    "sbc": estimate_sbc,
    "sbc_tensor": estimate_sbc_tensor,
    "sbc_monotone": estimate_sbc_monotone_marginal,
    "sbc_x2": lambda panel: _relabel(estimate_sbc(panel, controls=list(panel.x2)), "sbc_x2"),
}
TABLE_METHODS = ("naive", "demand_adjusted", "sbc", "sbc_tensor")
TABLE_HEADERS = {"naive": "Naive estimate", "demand_adjusted": "demand-adjusted",
                 "sbc": "SBC", "sbc_tensor": "SBC (full)", "sbc_monotone": "SBC (monotone)",
                 "sbc_x2": "SBC (+x2)"}


def _relabel(est, method):
    est.method = method
    return est


def get_method(name) -> Callable:
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; valid methods: {sorted(METHODS)}") from None


@dataclass
class ComparisonReport:
    """Rows of per-method estimates (optionally indexed to a reference)."""

    methods: tuple
    rows: list  # (label, {method: RoasEstimate | str error})
    reference: tuple | None = None
    indexed: bool = False

    def cell(self, label, method):
        for lab, cells in self.rows:
            if lab == label:
                return cells.get(method)
        raise KeyError(label)

    def table(self) -> list:
        header = [""] + [TABLE_HEADERS.get(m, m) for m in self.methods]
        out = [header]
        if self.reference is not None:
            r, se = self.reference
            out.append(["reference"] + [_fmt(r, se)] + [""] * (len(self.methods) - 1))
        for label, cells in self.rows:
            line = [label]
            for m in self.methods:
                c = cells.get(m)
                line.append(_fmt(c.beta1, c.se) if isinstance(c, RoasEstimate) else "n/a")
            out.append(line)
        return out

    def to_text(self) -> str:
        t = self.table()
        widths = [max(len(row[i]) for row in t) for i in range(len(t[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in t) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table())
        return buf.getvalue()

    def to_dict(self) -> dict:
        rows = []
        for label, cells in self.rows:
            rows.append({"label": label, "estimates": {
                m: ({"beta1": c.beta1, "se": c.se} if isinstance(c, RoasEstimate) else {"error": c})
                for m, c in cells.items()}})
        return {"methods": list(self.methods), "indexed": self.indexed,
                "reference": None if self.reference is None else list(self.reference), "rows": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt(v, se) -> str:
    return f"{v:.3g}" if se is None else f"{v:.3g} ({se:.2g})"


def index_reference(reference) -> tuple:
    """(r, se_r) -> (1, se_r / r)."""
    r, se = reference
    return 1.0, se / r


def compare_estimators(panel: MmmPanel, reference: tuple | None = None,
                       methods: Sequence[str] = TABLE_METHODS, index: bool = True,
                       split_by_year: bool = False) -> ComparisonReport:
    """Run each method (per calendar year if asked) and collect a comparison table.

    With a ``reference`` ``(estimate, se)`` and ``index=True`` every point
    estimate and se is divided by the reference estimate. Methods that are
    not applicable to a slice (e.g. too few rows for the tensor model) are
    reported as errors in their cell.
    """
    for m in methods:
        get_method(m)
    slices = [("all", panel)]
    if split_by_year:
        years = sorted({d.year for d in panel.dates})
        slices = [(str(yr), panel.slice(np.array([d.year == yr for d in panel.dates]))) for yr in years]
    base = reference[0] if (reference is not None and index) else None
    rows = []
    for label, sub in slices:
        cells = {}
        for m in methods:
            try:
                est = get_method(m)(sub)
            except (EstimationError, RankError) as exc:
                cells[m] = str(exc)
                continue
            cells[m] = est.indexed(base) if base else est
        rows.append((label, cells))
    ref = None
    if reference is not None:
        ref = index_reference(reference) if index else tuple(reference)
    return ComparisonReport(tuple(methods), rows, ref, base is not None)
