"""Synthetic media-mix panels drawn from explicit structural causal models.

Every scenario draws its variables in topological order of its causal
diagram:

    demand D_t = base * season(t) * dow(t) * exp(a_t),  a_t AR(1)
    V1 = share1 * D                         (target-favoring volume)
    V2 = share2 * D + noise                 (competitor-favoring)
    V3 = share3 * D + noise + funnel * x2   (general interest)
    x1 = g(V) + auction noise               [+ demand shock, counterexample]
                                            [capped by budget - x2, figure3]
    x2 = x2_per_demand * D + noise          (figure3 / figure4)
    y  = beta0 + beta1 * x1 + f(V) + eta,   eta = beta2 * x2 + shock + noise

Target-favoring volume is an exact multiple of demand, so E(eps | V) is a
known additive function whenever ``f`` is additive, and the additive
regression on (x1, V) is correctly specified for figure2 and figure4.

Random numbers come from numpy's PCG64 bit generator seeded with
``config.seed``; the draw order is fixed, so a seed reproduces a panel
exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date, timedelta

import numpy as np

from .causal_graph import Dag, builtin_diagrams
from .dataset import MmmPanel
from .errors import ConfigError

log = logging.getLogger(__name__)

SCENARIOS = ("figure2", "figure3", "figure4", "counterexample_demand_edge", "no_confounding")
F_FAMILIES = ("linear", "sqrt", "sine", "interaction", "zero")
SPEND_RULES = ("linear", "interaction")
MAX_CLIP_RATE = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "figure2"
    n_days: int = 500
    seed: int = 0
    start_date: str = "2013-01-01"
    beta0: float = 500.0
    beta1: float = 2.0
    # demand
    demand_base: float = 1000.0
    season_amplitude: float = 0.3
    season_phase: float = 0.0
    dow_multipliers: tuple = (0.85, 1.05, 1.1, 1.1, 1.05, 0.95, 0.9)
    ar_rho: float = 0.7
    ar_sd: float = 0.1
    # query volumes
    shares: tuple = (0.3, 0.2, 0.5)
    v2_noise_sd: float = 20.0
    v3_noise_sd: float = 50.0
    # confounding function f(V)
    f_family: str = "linear"
    f_coef: tuple = (3.0, 0.2, 0.5)
    f_interaction: float = 0.0
    # spend rule
    spend_rule: str = "linear"
    spend_per_target_search: float = 1.0
    spend_interaction: float = 0.0
    auction_sd: float = 60.0
    # counterexample: demand shock bypassing V
    shock_to_spend: float = 40.0
    shock_to_sales: float = 80.0
    # non-search channel (figure3/4)
    x2_per_demand: float = 0.5
    x2_noise_sd: float = 100.0
    funnel: float = 0.2
    beta2: float = 1.5
    daily_budget: float = 900.0
    # sales
    sales_sd: float = 100.0
    carryover: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dow_multipliers", tuple(float(v) for v in self.dow_multipliers))
        object.__setattr__(self, "shares", tuple(float(v) for v in self.shares))
        object.__setattr__(self, "f_coef", tuple(float(v) for v in self.f_coef))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.f_family not in F_FAMILIES:
            raise ConfigError(f"unknown f_family {self.f_family!r}; expected one of {F_FAMILIES}")
        if self.spend_rule not in SPEND_RULES:
            raise ConfigError(f"unknown spend_rule {self.spend_rule!r}")
        if int(self.n_days) != self.n_days or self.n_days < 30:
            raise ConfigError(f"n_days must be an integer >= 30, got {self.n_days}")
        for name in ("ar_sd", "v2_noise_sd", "v3_noise_sd", "auction_sd", "x2_noise_sd", "sales_sd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if len(self.dow_multipliers) != 7:
            raise ConfigError("dow_multipliers needs 7 entries")
        if len(self.shares) != 3 or len(self.f_coef) != 3:
            raise ConfigError("shares and f_coef need 3 entries")
        if not -1 < self.ar_rho < 1:
            raise ConfigError("ar_rho must lie in (-1, 1)")
        if not 0 <= self.carryover < 1:
            raise ConfigError("carryover must lie in [0, 1)")
        try:
            date.fromisoformat(self.start_date)
        except ValueError:
            raise ConfigError(f"bad start_date {self.start_date!r}") from None

    @classmethod
    def from_dict(cls, d) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class SimOutput:
    config: ScenarioConfig
    panel: MmmPanel
    truth: dict = field(repr=False)
    gamma: float
    dag: Dag = field(repr=False)
    clipped: dict = field(default_factory=dict)

    @property
    def epsilon(self) -> np.ndarray:
        return self.truth["f"] + self.truth["eta"]

    def truth_json(self) -> str:
        payload = {
            "scenario": self.config.scenario,
            "seed": self.config.seed,
            "beta0": self.config.beta0,
            "beta1": self.config.beta1,
            "beta2": self.config.beta2 if self.config.scenario in ("figure3", "figure4") else None,
            "gamma": self.gamma,
            "clipped": self.clipped,
            "f": [repr(float(v)) for v in self.truth["f"]],
            "eta": [repr(float(v)) for v in self.truth["eta"]],
            "demand": [repr(float(v)) for v in self.truth["demand"]],
            "config": self.config.to_dict(),
        }
        return json.dumps(payload, indent=1)


def scenario_dag(scenario: str) -> Dag:
    d = builtin_diagrams()
    if scenario in ("figure2", "figure3", "figure4"):
        return d[scenario]
    if scenario == "counterexample_demand_edge":
        return d["figure2"].add_edges([("consumer_demand", "X")])
    if scenario == "no_confounding":
        return d["figure2"].remove_edges([("eps0", "Y"), ("eps1", "Y")])
    raise ConfigError(f"unknown scenario {scenario!r}")


def treatment_node(scenario: str) -> str:
    return "X1" if scenario in ("figure3", "figure4") else "X"


def _demand(cfg: ScenarioConfig, rng, dates):
    n = len(dates)
    t = np.array([(d - dates[0]).days for d in dates], dtype=float)
    season = 1.0 + cfg.season_amplitude * np.sin(2 * np.pi * t / 365.25 + cfg.season_phase)
    dow = np.asarray(cfg.dow_multipliers)[[d.weekday() for d in dates]]
    innov = rng.normal(0.0, cfg.ar_sd, n)
    a = np.empty(n)
    a[0] = innov[0] / math.sqrt(1 - cfg.ar_rho**2)
    for i in range(1, n):
        a[i] = cfg.ar_rho * a[i - 1] + innov[i]
    return cfg.demand_base * season * dow * np.exp(a)


def _standardized(v, ref, scale):
    return (v - ref) / scale


def confounding_function(cfg: ScenarioConfig, v1, v2, v3):
    """The structural sales contribution of query volumes, f(V)."""
    c1, c2, c3 = cfg.f_coef
    m1, m2, _ = (s * cfg.demand_base for s in cfg.shares)
    if cfg.scenario == "no_confounding" or cfg.f_family == "zero":
        return np.zeros_like(v1)
    if cfg.f_family == "linear" or cfg.f_family == "interaction":
        f = c1 * v1 + c2 * v2 + c3 * v3
    elif cfg.f_family == "sqrt":
        f = c1 * np.sqrt(m1 * v1) + c2 * v2 + c3 * v3
    else:  # sine
        f = c1 * v1 + c1 * 0.25 * m1 * np.sin(np.pi * v1 / m1) + c2 * v2 + c3 * v3
    if cfg.f_interaction:
        z1 = _standardized(v1, m1, 0.25 * m1)
        z2 = _standardized(v2, m2, 0.25 * m2)
        f = f + cfg.f_interaction * z1 * z2
    return f


def _clip(name, x, counts):
    neg = x < 0
    counts[name] = int(neg.sum())
    return np.where(neg, 0.0, x)


def simulate(config: ScenarioConfig) -> SimOutput:
    cfg = config
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    start = date.fromisoformat(cfg.start_date)
    dates = [start + timedelta(days=i) for i in range(cfg.n_days)]
    n = cfg.n_days
    has_x2 = cfg.scenario in ("figure3", "figure4")
    clipped: dict = {}

    demand = _demand(cfg, rng, dates)
    s1, s2, s3 = cfg.shares
    n2 = rng.normal(0.0, cfg.v2_noise_sd, n)
    n3 = rng.normal(0.0, cfg.v3_noise_sd, n)
    x2_noise = rng.normal(0.0, cfg.x2_noise_sd, n)
    auction = rng.normal(0.0, cfg.auction_sd, n)
    shock = rng.normal(0.0, 1.0, n)
    sales_noise = rng.normal(0.0, cfg.sales_sd, n)

    if has_x2:
        x2 = _clip("x2", cfg.x2_per_demand * demand + x2_noise, clipped)
    else:
        x2 = np.zeros(n)
    v1 = s1 * demand
    v2 = _clip("v2", s2 * demand + n2, clipped)
    v3 = _clip("v3", s3 * demand + n3 + (cfg.funnel * x2 if has_x2 else 0.0), clipped)

    m1, m2 = s1 * cfg.demand_base, s2 * cfg.demand_base
    g = cfg.spend_per_target_search * v1
    if cfg.spend_rule == "interaction":
        g = g + cfg.spend_interaction * _standardized(v1, m1, 0.25 * m1) * _standardized(v2, m2, 0.25 * m2)
    x1 = g + auction
    if cfg.scenario == "counterexample_demand_edge":
        x1 = x1 + cfg.shock_to_spend * shock
    if cfg.scenario == "figure3":
        x1 = np.minimum(x1, cfg.daily_budget - x2)
    x1 = _clip("x1", x1, clipped)

    rates = {k: v / n for k, v in clipped.items()}
    worst = max(rates.items(), key=lambda kv: kv[1])
    if worst[1] > MAX_CLIP_RATE:
        raise ConfigError(f"{worst[0]} clipped at zero on {worst[1]:.1%} of days; adjust the config")
    for k, c in clipped.items():
        if c:
            log.warning("clipped %d negative values of %s to zero", c, k)

    f = confounding_function(cfg, v1, v2, v3)
    eta = sales_noise.copy()
    if has_x2:
        eta = eta + cfg.beta2 * x2
    if cfg.scenario == "counterexample_demand_edge":
        eta = eta + cfg.shock_to_sales * shock
    if cfg.carryover:
        lagged = np.zeros(n)
        for i in range(1, n):
            lagged[i] = cfg.carryover * (lagged[i - 1] + x1[i - 1])
        eta = eta + cfg.beta1 * lagged
    y = cfg.beta0 + cfg.beta1 * x1 + f + eta
    if np.any(y < 0):
        raise ConfigError("generated sales are negative; raise beta0 or lower the noise")

    panel = MmmPanel(dates=dates, y=y, x1=x1, v1=v1, v2=v2, v3=v3,
                     x2={"x2": x2} if has_x2 else {})
    truth = {"beta0": cfg.beta0, "beta1": cfg.beta1, "f": f, "eta": eta, "demand": demand,
             "shock": shock if cfg.scenario == "counterexample_demand_edge" else np.zeros(n)}
    gamma = realized_gamma(x1, f + eta)
    return SimOutput(cfg, panel, truth, gamma, scenario_dag(cfg.scenario), clipped)


def realized_gamma(x1, eps) -> float:
    """cov(x1, eps) / var(x1) on the drawn sample."""
    x1 = np.asarray(x1, dtype=float)
    eps = np.asarray(eps, dtype=float)
    xc = x1 - x1.mean()
    return float(xc @ (eps - eps.mean()) / (xc @ xc))


def expected_naive_bias(output: SimOutput) -> float:
    """Bias of the OLS slope of y on x1: cov(x1, eps) / var(x1)."""
    return realized_gamma(output.panel.x1, output.epsilon)


@dataclass
class MethodSummary:
    method: str
    n_ok: int
    n_failed: int
    mean_estimate: float
    mean_bias: float
    sd: float
    rmse: float
    coverage: float
    mean_se: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReplicateStudy:
    config: ScenarioConfig
    n_reps: int
    summaries: dict
    estimates: dict  # method -> array of (beta1, se) with NaN for failures
    gammas: np.ndarray
    failures: dict

    def table(self) -> list:
        cols = ["method", "n_ok", "n_failed", "mean_estimate", "mean_bias", "sd", "rmse",
                "coverage", "mean_se"]
        rows = [cols]
        for s in self.summaries.values():
            d = s.to_dict()
            rows.append([d[c] if isinstance(d[c], (str, int)) else f"{d[c]:.6g}" for c in cols])
        return rows

    def to_csv(self) -> str:
        return "\n".join(",".join(str(c) for c in row) for row in self.table()) + "\n"

    def to_text(self) -> str:
        t = [[str(c) for c in row] for row in self.table()]
        widths = [max(len(r[i]) for r in t) for i in range(len(t[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in t) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n_reps": self.n_reps,
            "mean_gamma": float(np.mean(self.gammas)),
            "summaries": {m: s.to_dict() for m, s in self.summaries.items()},
            "failures": self.failures,
        }


def replicate_study(config: ScenarioConfig, n_reps: int, methods=("sbc",),
                    z: float = 1.959963984540054) -> ReplicateStudy:
    """Simulate ``n_reps`` panels with seeds ``config.seed + i`` and summarize each method.

    Coverage is the share of replicates with truth inside estimate +/- z*se.
    Failed replicates are excluded from the summaries and listed in ``failures``.
    """
    from . import estimators

    if n_reps < 2:
        raise ConfigError("n_reps must be at least 2")
    fns = {m: estimators.get_method(m) for m in methods}
    truth = config.beta1
    est = {m: np.full((n_reps, 2), np.nan) for m in methods}
    failures: dict = {m: [] for m in methods}
    gammas = np.empty(n_reps)
    for i in range(n_reps):
        out = simulate(config.with_seed(config.seed + i))
        gammas[i] = out.gamma
        for m, fn in fns.items():
            try:
                e = fn(out.panel)
            except Exception as exc:  # counted and reported, never silently dropped
                failures[m].append({"replicate": i, "error": f"{type(exc).__name__}: {exc}"})
                continue
            est[m][i] = (e.beta1, np.nan if e.se is None else e.se)
    summaries = {}
    for m in methods:
        ok = ~np.isnan(est[m][:, 0])
        b = est[m][ok, 0]
        se = est[m][ok, 1]
        if b.size == 0:
            summaries[m] = MethodSummary(m, 0, n_reps, math.nan, math.nan, math.nan, math.nan,
                                         math.nan, math.nan)
            continue
        cov = float(np.mean(np.abs(b - truth) <= z * se)) if np.all(np.isfinite(se)) else math.nan
        summaries[m] = MethodSummary(
            m, int(ok.sum()), int((~ok).sum()), float(b.mean()), float(b.mean() - truth),
            float(b.std(ddof=1)) if b.size > 1 else 0.0,
            float(np.sqrt(np.mean((b - truth) ** 2))), cov,
            float(np.mean(se)) if np.all(np.isfinite(se)) else math.nan)
    return ReplicateStudy(config, n_reps, summaries, est, gammas, failures)
