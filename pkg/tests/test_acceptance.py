"""Acceptance gate. Each test prints one PASS/FAIL line and asserts."""

import itertools
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import (FIXTURE_SEGMENTS, FIXTURES, random_dag, random_scm, report,
                      truncated_factorization)
from searchbias import estimators, gam, splines
from searchbias.causal_graph import backdoor_adjust, builtin_diagrams, satisfies_backdoor
from searchbias.query_summarizer import (QueryLogRecord, UrlTaxonomy, assign_segment, classify_queries,
                                         read_query_log)
from searchbias.simulator import ScenarioConfig, replicate_study, scenario_dag, simulate

N_REPS = 100


@pytest.fixture(scope="module")
def figure2_study():
    t0 = time.perf_counter()
    study = replicate_study(ScenarioConfig("figure2", n_days=500, beta1=2.0, seed=1000), N_REPS,
                            methods=("naive", "demand_adjusted", "sbc"))
    return study, time.perf_counter() - t0


def test_criterion_01_backdoor_oracle_exactness():
    rng = np.random.default_rng(20130101)
    t0 = time.perf_counter()
    n_models, worst = 0, 0.0
    while n_models < 60:
        dag = random_dag(rng, int(rng.integers(3, 6)))
        order = dag.topological_order
        x, y = order[int(rng.integers(0, len(order) - 1))], order[-1]
        if x == y:
            continue
        others = [n for n in dag.nodes if n not in (x, y)]
        valid = [set(z) for r in range(len(others) + 1) for z in itertools.combinations(others, r)
                 if satisfies_backdoor(dag, x, y, set(z))]
        if not valid:
            continue
        scm = random_scm(rng, dag)
        z = valid[int(rng.integers(len(valid)))]
        for value in range(scm.cardinalities[x]):
            got = backdoor_adjust(scm, x, value, y, z)
            want = truncated_factorization(scm, x, value, y)
            worst = max(worst, float(np.max(np.abs(got - want))), abs(float(got.sum()) - 1.0))
        n_models += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    report("criterion 1 back-door oracle", ok, f"{n_models} SCMs, max err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_criterion_fidelity():
    d = builtin_diagrams()
    got = (
        satisfies_backdoor(d["figure2"], "X", "Y", {"V"}),
        satisfies_backdoor(d["figure4"], "X1", "Y", {"V"}),
        satisfies_backdoor(d["figure3"], "X1", "Y", {"V", "X2"}),
        satisfies_backdoor(d["figure3"], "X2", "Y", {"X1", "V"}),
    )
    ok = got == (True, True, True, False)
    report("criterion 2 back-door fidelity", ok, f"got {got}")
    assert ok


def test_criterion_03_sbc_consistency(figure2_study):
    study, elapsed = figure2_study
    sbc, naive = study.summaries["sbc"], study.summaries["naive"]
    gamma = float(np.mean(study.gammas))
    sbc_ok = abs(sbc.mean_bias) <= 0.1 * 2.0 and 0.85 <= sbc.coverage <= 0.99
    naive_ok = abs(naive.mean_bias - gamma) <= 0.15 * abs(gamma)
    if gamma >= 2 * naive.mean_se:
        naive_ok = naive_ok and naive.coverage < 0.5
    ok = sbc_ok and naive_ok and elapsed < 300 and sbc.n_failed == 0
    report("criterion 3 SBC consistency", ok,
           f"SBC bias {sbc.mean_bias:+.4f} cov {sbc.coverage:.2f}; naive bias {naive.mean_bias:.3f} "
           f"vs gamma {gamma:.3f}, cov {naive.coverage:.2f}; {elapsed:.1f}s")
    assert ok


def test_criterion_04_ordering(figure2_study):
    study, _ = figure2_study
    s = study.summaries
    m = {k: s[k].mean_estimate for k in ("naive", "demand_adjusted", "sbc")}
    sem = {k: s[k].sd / np.sqrt(s[k].n_ok) for k in m}

    def separated(a, b):
        return m[a] - m[b] >= 2 * np.hypot(sem[a], sem[b])

    closest = min(m, key=lambda k: abs(m[k] - 2.0)) == "sbc"
    ok = separated("naive", "demand_adjusted") and separated("demand_adjusted", "sbc") and closest
    report("criterion 4 ordering", ok, ", ".join(f"{k} {v:.3f}" for k, v in m.items()))
    assert ok


def test_criterion_05_figure4_without_x2():
    cfg = ScenarioConfig("figure4", n_days=500, beta1=2.0, beta2=1.5, seed=2000)
    study = replicate_study(cfg, N_REPS, methods=("sbc",))
    s = study.summaries["sbc"]
    ok = 0.85 <= s.coverage <= 0.99 and s.n_failed == 0
    report("criterion 5 figure4 SBC without x2", ok,
           f"coverage {s.coverage:.2f}, mean {s.mean_estimate:.3f}")
    assert ok


def test_criterion_06_counterexample():
    cfg = ScenarioConfig("counterexample_demand_edge", n_days=500, beta1=2.0, seed=3000)
    study = replicate_study(cfg, N_REPS, methods=("sbc",))
    b, se = study.estimates["sbc"][:, 0], study.estimates["sbc"][:, 1]
    n_biased = int(np.sum(np.abs(b - 2.0) > 2 * se))
    flag = satisfies_backdoor(scenario_dag(cfg.scenario), "X", "Y", {"V"})
    ok = n_biased >= 50 and flag is False
    report("criterion 6 non-identifiability guard", ok,
           f"{n_biased}/{N_REPS} replicates with |bias| > 2se; back-door {flag}")
    assert ok


def test_criterion_07_spline_penalty():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 3, 400)
    basis = splines.build_crs(x, k=10)
    kn = basis.knots
    worst_pen = 0.0
    for _ in range(20):
        b = rng.normal(size=basis.k)

        def f2sq(t):
            return float((basis.second_derivative(np.array([t])) @ b)[0] ** 2)

        q = sum(quad(f2sq, lo, hi, epsabs=0, epsrel=1e-12)[0] for lo, hi in zip(kn[:-1], kn[1:]))
        worst_pen = max(worst_pen, abs(b @ basis.S @ b - q) / q)

    # gradient of the penalized LS objective at its minimizer
    y = np.sin(2 * x) + rng.normal(0, 0.1, x.size)
    design = gam.build_design(gam.ModelSpec("y", [], [gam.Smooth("x")]), {"y": y, "x": x})
    lam = np.array([0.5])
    beta = gam.fit_pls(design, y, lam).beta
    S = design.penalty_matrix(lam)

    def obj(bb):
        r = y - design.X @ bb
        return r @ r + bb @ S @ bb

    h = 1e-4 * max(1.0, float(np.max(np.abs(beta))))
    grad = np.array([(obj(beta + h * e) - obj(beta - h * e)) / (2 * h) for e in np.eye(beta.size)])
    scale = float(np.max(np.abs(2 * design.X.T @ y)))
    grad_rel = float(np.max(np.abs(grad))) / scale

    # lambda -> infinity: fit collapses to the penalty null space (a straight line)
    beta_inf = gam.fit_pls(design, y, np.array([1e12])).beta
    smooth = design.term("s(x)")
    coef = beta_inf[smooth.columns]
    grid = np.linspace(kn[0], kn[-1], 201)
    sb = smooth.basis
    raw = sb.Z @ coef
    curv = float(np.max(np.abs(sb.second_derivative(grid) @ raw)))
    slope_scale = max(1.0, float(np.max(np.abs(sb.derivative(grid) @ raw))))
    curv_rel = curv / slope_scale

    ok = worst_pen <= 1e-6 and grad_rel <= 1e-6 and curv_rel <= 1e-6
    report("criterion 7 spline/penalty", ok,
           f"penalty rel err {worst_pen:.1e}, gradient {grad_rel:.1e}, curvature {curv_rel:.1e}")
    assert ok


def test_criterion_08_reml_consistency():
    worst_gap = -np.inf
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        n = 200
        a, b = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        y = np.sin(2 * np.pi * a) + (b - 0.5) ** 2 * (seed % 3) + rng.normal(0, 0.3, n)
        design = gam.build_design(gam.ModelSpec("y", [], [gam.Smooth("a"), gam.Smooth("b")]),
                                  {"y": y, "a": a, "b": b})
        problem = gam.RemlProblem(design, y)
        _, value, _ = gam.optimize_reml(problem)
        grid_probe = gam.RemlProblem(design, y)
        grid_min = min(grid_probe.criterion(np.array(r)) for r in itertools.product(gam.GRID, repeat=2))
        worst_gap = max(worst_gap, value - grid_min)

    rng = np.random.default_rng(1)
    n = 500
    xx, v = rng.uniform(0, 1, n), rng.uniform(0, 2 * np.pi, n)
    y = 2 + 3 * xx + np.sin(v) + rng.normal(0, 0.1, n)
    data = {"y": y, "x": xx, "v": v}
    fit = gam.fit_reml(gam.ModelSpec("y", ["x"], [gam.Smooth("v")]), data)
    beta, se = fit.coef("x"), fit.coef_se("x")
    term = fit.design.term("s(v)")
    sm = fit.design.term_matrix(term, data) @ fit.beta[term.columns]
    truth = np.sin(v) - np.sin(v).mean()
    rmse = float(np.sqrt(np.mean((sm - sm.mean() - truth) ** 2)))

    ok = worst_gap <= 1e-9 and abs(beta - 3) <= 3 * se and rmse <= 0.05
    report("criterion 8 REML consistency", ok,
           f"max(opt - grid) {worst_gap:.2e}; beta {beta:.4f} se {se:.4f}; smooth RMSE {rmse:.4f}")
    assert ok


def test_criterion_09_marginal_roas():
    rng = np.random.default_rng(9)
    x = rng.uniform(10, 500, 300)
    lin_err = abs(estimators.marginal_roas(lambda t: 2.5 * t + 7.0, x, 0.01) - 2.5)
    c, delta = 4.0, 0.01
    closed = c * (np.sqrt(1 + delta) - 1) * np.sum(np.sqrt(x)) / (delta * np.sum(x))
    sqrt_err = abs(estimators.marginal_roas(lambda t: c * np.sqrt(t), x, delta) - closed)

    out = simulate(ScenarioConfig("figure2", n_days=500, beta1=2.0, seed=9))
    mono = estimators.estimate_sbc_monotone_marginal(out.panel)
    add = estimators.estimate_sbc(out.panel)
    rel = abs(mono.beta1 - add.beta1) / abs(add.beta1)

    ok = lin_err <= 1e-10 and sqrt_err <= 1e-6 and rel <= 0.10
    report("criterion 9 marginal ROAS", ok,
           f"linear err {lin_err:.1e}, sqrt err {sqrt_err:.1e}, monotone {mono.beta1:.3f} "
           f"vs additive {add.beta1:.3f} ({rel:.1%})")
    assert ok


def test_criterion_10_query_pipeline():
    taxonomy = UrlTaxonomy.from_json((FIXTURES / "taxonomy.json").read_text())
    records = read_query_log(FIXTURES / "query_log.csv")
    got = {c.query: c.segment for c in classify_queries(records, taxonomy)}
    exact = got == FIXTURE_SEGMENTS

    rng = np.random.default_rng(10)
    invariant = True
    for _ in range(200):
        w = rng.integers(0, 20, 4).astype(float)
        if w.sum() == 0:
            continue
        scale = float(rng.uniform(0.01, 1000))
        invariant &= assign_segment(*w) == assign_segment(*(w * scale))
    for q in FIXTURE_SEGMENTS:
        k = int(rng.integers(2, 50))
        scaled = [QueryLogRecord(r.query, r.url, r.count * (k if r.query == q else 1)) for r in records]
        invariant &= {c.query: c.segment for c in classify_queries(scaled, taxonomy)} == got

    ok = exact and invariant
    report("criterion 10 query pipeline", ok, f"segments {'match' if exact else got}; scale-invariant {invariant}")
    assert ok


def _run_cli(args, env):
    return subprocess.run([sys.executable, "-m", "searchbias.cli", *args], env=env,
                          capture_output=True, text=True)


def test_criterion_11_determinism(tmp_path):
    env = dict(os.environ, SOURCE_DATE_EPOCH="1356998400")
    runs = []
    for i in range(2):
        base = tmp_path / f"run{i}"
        r1 = _run_cli(["simulate", "--scenario", "figure3", "--seed", "11", "--out-dir", str(base / "sim")], env)
        r2 = _run_cli(["replicates", "--scenario", "figure2", "--reps", "4", "--seed", "11",
                       "--methods", "naive,sbc", "--out-dir", str(base / "rep")], env)
        assert r1.returncode == 0, r1.stderr
        assert r2.returncode == 0, r2.stderr
        runs.append({p.relative_to(base): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()})
    names = sorted(str(p) for p in runs[0])
    same = runs[0] == runs[1] and len(runs[0]) >= 6
    json.loads(runs[0][next(p for p in runs[0] if p.name == "truth.json")])
    report("criterion 11 determinism", same, f"{len(names)} files byte-identical: {same}")
    assert same
