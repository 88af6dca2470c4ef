"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured figure
and then asserts the criterion at its stated tolerance.  The lines are also
repeated in the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

from conftest import ACCEPTANCE_LINES, SOBOLEV, random_instance
from sparsevc import cli
from sparsevc.kernel import build_blocks, kernel_matrix
from sparsevc.solver import (
    FitConfig,
    effective_lambda,
    fit_one_step,
    objective_aux,
    objective_primal,
    solve_fixed_theta_literal,
    solve_fixed_theta_reduced,
    solve_theta_step,
    theorem1_diagnostics,
    theta_from_beta,
)
from sparsevc.synth import SyntheticScenario, generate, waves_experiment
from sparsevc.tuning import (
    cross_validate_M,
    default_tau0_grid,
    make_cv_plan,
    oracle_risk_curve,
    select_tau0,
)


def report(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def rel_err(a, b):
    """Largest absolute difference over the largest magnitude (vectors compared as a whole)."""
    a, b = np.atleast_1d(np.asarray(a, dtype=float)), np.atleast_1d(np.asarray(b, dtype=float))
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    return 0.0 if diff == 0.0 else diff / max(scale, 1e-300)


def random_theta(rng, p):
    theta = rng.uniform(0.05, 3.0, size=p)
    if p > 1 and rng.random() < 0.3:
        theta[rng.integers(p)] = 0.0
    return theta


# ---------------------------------------------------------------------------
# shared suites


def suite2(count=100, seed=2):
    """Fixed-weight instances with N * p <= 200."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        ds, blocks = random_instance(rng, n_max=12, m_max=6, p_max=4)
        if ds.N * ds.p > 200:
            continue
        out.append((ds, blocks, random_theta(rng, ds.p), float(10 ** rng.uniform(-4, 1))))
    return out


def suite5(count=100, seed=5):
    """One-step fits at random budgets and smoothing levels."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        ds, blocks = random_instance(rng, n_max=10, m_max=5, p_max=5)
        cfg = FitConfig(tau0=float(10 ** rng.uniform(-4, 1)), M=float(rng.uniform(0, ds.p + 1)))
        out.append((ds, blocks, fit_one_step(ds, cfg, blocks)))
    return out


@pytest.fixture(scope="module")
def s2():
    return suite2()


@pytest.fixture(scope="module")
def s5():
    return suite5()


# ---------------------------------------------------------------------------
# 1. fixed-weight solve against a brute-force minimizer


def brute_force_fixed_theta(ds, theta, tau0):
    """Minimize over intercept and plain kernel coefficients with BFGS.

    Curve ``j`` is ``sum_k a_jk K(t_k, .)``; weights with ``theta_j = 0``
    force ``a_j = 0``.  Shares nothing with the package solvers except the
    kernel values.
    """
    t, X, y = ds.times, ds.X, ds.y
    N, p = X.shape
    G = kernel_matrix(SOBOLEV, t, t)
    live = np.flatnonzero(theta > 0)

    def unpack(z):
        A = np.zeros((p, N))
        A[live] = z[1:].reshape(len(live), N)
        return z[0], A

    def fun(z):
        b, A = unpack(z)
        curves = A @ G  # beta_j at every visit time
        r = y - b - np.sum(curves.T * X, axis=1)
        pen = sum(A[j] @ G @ A[j] / theta[j] for j in live)
        obj = r @ r / N + tau0 * pen
        gb = -2.0 * r.sum() / N
        gA = np.array([(-2.0 / N) * G @ (r * X[:, j]) + 2.0 * tau0 * G @ A[j] / theta[j] for j in live])
        return obj, np.concatenate([[gb], gA.ravel()])

    z0 = np.concatenate([[y.mean()], np.zeros(len(live) * N)])
    best = optimize.minimize(fun, z0, jac=True, method="BFGS", options={"gtol": 1e-13, "maxiter": 20000})
    b, A = unpack(best.x)
    norms = np.sqrt(np.maximum(np.einsum("jn,nm,jm->j", A, G, A), 0.0))
    return best.fun, b, norms


def test_c1_fixed_theta_matches_brute_force():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        ds, blocks = random_instance(rng, n_max=3, m_max=2, p_max=2)
        theta = rng.uniform(0.2, 3.0, size=ds.p)
        tau0 = float(10 ** rng.uniform(-2, 0.5))
        tau1 = float(rng.uniform(0.1, 2.0))
        sol = solve_fixed_theta_reduced(ds, blocks, theta, tau0)
        ours = objective_aux(ds, blocks, theta, sol.b, sol.beta_coeffs, tau0, tau1)
        brute, _, _ = brute_force_fixed_theta(ds, theta, tau0)
        worst = max(worst, rel_err(ours, brute + tau1 * theta.sum()))
    elapsed = time.perf_counter() - start
    report("C1 fixed-weight solve vs brute force", worst <= 1e-6 and elapsed < 60,
           f"worst relative objective gap {worst:.2e} (tol 1e-6), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. literal and reduced solves agree


def test_c2_literal_matches_reduced(s2):
    start = time.perf_counter()
    worst = {"fitted": 0.0, "b": 0.0, "norms": 0.0}
    for ds, blocks, theta, tau0 in s2:
        red = solve_fixed_theta_reduced(ds, blocks, theta, tau0)
        lit = solve_fixed_theta_literal(ds, blocks, theta, tau0)
        worst["fitted"] = max(worst["fitted"], rel_err(red.fitted, lit.fitted))
        worst["b"] = max(worst["b"], rel_err(red.b, lit.b))
        worst["norms"] = max(worst["norms"], rel_err(red.component_norms, lit.component_norms))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-8 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("C2 literal vs reduced solve", ok, f"worst relative {detail} (tol 1e-8), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. weighted objective at the norm-matched weights equals the primal


def test_c3_weight_identity(s2):
    rng = np.random.default_rng(3)
    worst_eq, worst_below = 0.0, 0.0
    for ds, blocks, theta, tau0 in s2:
        sol = solve_fixed_theta_reduced(ds, blocks, theta, tau0)
        tau1 = float(10 ** rng.uniform(-3, 1))
        lam = (4.0 * tau0 * tau1) ** 0.25
        primal = objective_primal(ds, blocks, sol.b, sol.beta_coeffs, lam)
        matched = theta_from_beta(sol.component_norms, tau0, tau1)
        aux = objective_aux(ds, blocks, matched, sol.b, sol.beta_coeffs, tau0, tau1)
        worst_eq = max(worst_eq, rel_err(aux, primal))
        live = sol.component_norms > 0
        for _ in range(50):
            other = np.where(live, rng.uniform(1e-3, 5.0, size=ds.p), rng.uniform(0, 5.0, size=ds.p))
            val = objective_aux(ds, blocks, other, sol.b, sol.beta_coeffs, tau0, tau1)
            worst_below = max(worst_below, (primal - val) / abs(primal))
    ok = worst_eq <= 1e-10 and worst_below <= 1e-10
    report("C3 weight identity", ok,
           f"equality gap {worst_eq:.1e}, largest dip below {worst_below:.1e} (tol 1e-10)")


# ---------------------------------------------------------------------------
# 4. weight-step optimality


def soft_threshold_budget(q, h, M):
    """Closed form for orthogonal centered components and no curvature term.

    Coordinate ``j`` is ``max(0, (2 h_j - mu) / (2 q_j))``; the budget total is
    piecewise linear in ``mu`` with breakpoints ``2 h_j``, so the multiplier
    is found exactly by walking the sorted breakpoints.
    """
    free = np.maximum(0.0, h) / q
    if free.sum() <= M:
        return free
    order = np.argsort(-h)
    for k in range(1, len(h) + 1):
        act = order[:k]
        mu = (np.sum(h[act] / q[act]) - M) / np.sum(0.5 / q[act])
        nxt = 2.0 * h[order[k]] if k < len(h) else -np.inf
        if mu >= nxt and mu >= 0.0:
            return np.maximum(0.0, (2.0 * h - mu) / (2.0 * q))
    raise AssertionError("no breakpoint bracket found")


def theta_step_case(rng, orthogonal):
    N = int(rng.integers(3, 25))
    p = int(rng.integers(1, min(8, N - 1) + 1))
    y = rng.standard_normal(N) * rng.uniform(0.5, 3.0) + rng.uniform(-1, 1)
    tau0 = float(10 ** rng.uniform(-4, 0))
    if orthogonal:
        # orthonormal directions orthogonal to the constant vector
        basis = np.linalg.qr(np.column_stack([np.ones(N), rng.standard_normal((N, p))]))[0][:, 1:]
        g = (basis * rng.uniform(0.3, 3.0, size=p)).T + rng.uniform(-1, 1, size=(p, 1))
        d = np.zeros(p)
    else:
        g = rng.standard_normal((p, N))
        if p > 1 and rng.random() < 0.3:
            g[-1] = g[0] * rng.uniform(0.5, 2.0)  # exactly collinear pair
        d = rng.uniform(0.0, 2.0, size=p)
    M = float(rng.choice([0.0, rng.uniform(0.0, 0.5), rng.uniform(0.0, p), 10.0 * p]))
    return y, g, d, tau0, M


def test_c4_theta_step_kkt():
    rng = np.random.default_rng(4)
    cd_tol, bisect_tol = 1e-9, 1e-10
    start = time.perf_counter()
    worst = {"negativity": 0.0, "budget": 0.0, "stationarity": 0.0, "slackness": 0.0, "closed form": 0.0}
    n_orth = 0
    for k in range(200):
        orthogonal = k % 4 == 0
        y, g, d, tau0, M = theta_step_case(rng, orthogonal)
        N = len(y)
        res = solve_theta_step(y, g, d, tau0, M, cd_tol=cd_tol, bisect_tol=bisect_tol)
        th, mu = res.theta, res.mu
        gc = g - g.mean(axis=1, keepdims=True)
        yc = y - y.mean()
        Q, h, w = gc @ gc.T, gc @ yc, N * tau0 * d
        scale = max(1.0, np.max(np.abs(h)), np.max(np.abs(w + mu)))
        grad = 2.0 * (Q @ th - h) + w + mu
        worst["negativity"] = max(worst["negativity"], float(-th.min(initial=0.0)))
        worst["budget"] = max(worst["budget"], (th.sum() - M) / max(1.0, M))
        stat = np.where(th > 0, np.abs(grad), np.maximum(-grad, 0.0))
        worst["stationarity"] = max(worst["stationarity"], float(stat.max()) / scale / cd_tol)
        slack = max(float(np.max(np.abs(th * grad), initial=0.0)) / scale,
                    mu * abs(M - th.sum()) / scale if M > 0 else 0.0)
        worst["slackness"] = max(worst["slackness"], slack / cd_tol)
        if orthogonal and M > 0:
            n_orth += 1
            ref = soft_threshold_budget(np.diag(Q), h, M)
            worst["closed form"] = max(worst["closed form"], rel_err(th, ref))
    elapsed = time.perf_counter() - start
    ok = (
        worst["negativity"] == 0.0
        and worst["budget"] <= bisect_tol
        and worst["stationarity"] <= 1.0
        and worst["slackness"] <= 1.0
        and worst["closed form"] <= 1e-8
        and elapsed < 60
    )
    detail = (
        f"min theta {-worst['negativity']:.1e}, budget excess {worst['budget']:.1e}, "
        f"stationarity {worst['stationarity']:.2f} x cd_tol, slackness {worst['slackness']:.2f} x cd_tol, "
        f"closed-form gap {worst['closed form']:.1e} over {n_orth} orthogonal cases, {elapsed:.1f}s"
    )
    report("C4 weight-step KKT", ok, detail)


# ---------------------------------------------------------------------------
# 5. one-step objective does not increase


def test_c5_one_step_monotone(s5):
    worst = 0.0
    for ds, _, model in s5:
        o2, o3, o4 = model.history["objective"]
        scale = max(abs(o2), float(np.mean(ds.y**2)))
        worst = max(worst, (o3 - o2) / scale, (o4 - o3) / scale)
    report("C5 one-step monotonicity", worst <= 1e-8,
           f"largest relative increase {worst:.1e} over {len(s5)} fits (tol 1e-8)")


# ---------------------------------------------------------------------------
# 6. existence-domain diagnostics


def test_c6_diagnostics(s2, s5):
    fits = []
    for ds, blocks, theta, tau0 in s2:
        fits.append((ds, blocks, solve_fixed_theta_reduced(ds, blocks, theta, tau0)))
    fits.extend(s5)
    outside, worse = 0, 0
    for ds, blocks, fit in fits:
        diag = theorem1_diagnostics(ds, blocks, fit)
        norms = np.sqrt(blocks.component_norms_sq(fit.beta_coeffs))
        lam = effective_lambda(fit.theta, norms, fit.tau0)
        primal = objective_primal(ds, blocks, fit.b, fit.beta_coeffs, lam)
        null = objective_primal(ds, blocks, float(ds.y.mean()), np.zeros((ds.p, ds.N)), lam)
        outside += not diag.in_omega
        # rounding allowance on the scale of the data; the null objective can be exactly 0
        worse += primal > null + 1e-12 * float(np.mean(ds.y**2))
    report("C6 existence-domain diagnostics", outside == 0 and worse == 0,
           f"{outside} fits outside the bounded set, {worse} fits above the null objective, of {len(fits)}")


# ---------------------------------------------------------------------------
# 7 and 9. support recovery and GCV on the standard scenario


M_GRID = np.arange(0.0, 10.01, 0.5)


def standard_run(sigma, seed):
    ds, truth = generate(SyntheticScenario(noise_sd=sigma, seed=seed))
    blocks = build_blocks(SOBOLEV, ds)
    trace = select_tau0(ds, blocks, default_tau0_grid())
    cfg = FitConfig(tau0=trace.chosen)
    cv = cross_validate_M(ds, cfg, M_GRID, make_cv_plan(ds, 5, seed))
    model = fit_one_step(ds, replace(cfg, M=cv.chosen), blocks)
    sel, act = set(model.selected), truth.active
    f1 = 2 * len(sel & act) / (len(sel) + len(act))
    return {"ds": ds, "truth": truth, "blocks": blocks, "trace": trace, "f1": f1}


@pytest.fixture(scope="module")
def standard_runs():
    start = time.perf_counter()
    runs = [standard_run(0.5, seed) for seed in range(20)]
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_c7_support_recovery(standard_runs):
    runs, elapsed = standard_runs
    start = time.perf_counter()
    noiseless = [standard_run(0.0, seed)["f1"] for seed in range(3)]
    elapsed += time.perf_counter() - start
    f1 = np.array([r["f1"] for r in runs])
    ok = f1.mean() >= 0.85 and min(noiseless) == 1.0 and elapsed < 15 * 60
    report("C7 support recovery", ok,
           f"mean F1 {f1.mean():.3f} over 20 seeds at sigma 0.5 (min {f1.min():.2f}), "
           f"noiseless F1 {noiseless}, {elapsed:.0f}s")


@pytest.mark.slow
def test_c9_gcv_near_oracle(standard_runs):
    runs, _ = standard_runs
    grid = default_tau0_grid()
    hits, offsets = 0, []
    for r in runs:
        risk = oracle_risk_curve(r["blocks"], r["ds"].y, r["truth"].mean_response(r["ds"]), grid)
        off = r["trace"].chosen_index - int(np.argmin(risk))
        offsets.append(off)
        hits += abs(off) <= 1
    report("C9 GCV near risk minimizer", hits >= 0.7 * len(runs),
           f"{hits}/{len(runs)} seeds within one grid step, offsets {offsets}")


# ---------------------------------------------------------------------------
# 8. growing longitudinal information


@pytest.mark.slow
def test_c8_waves_trend():
    start = time.perf_counter()
    rows = waves_experiment(SyntheticScenario(), seeds=range(20), grid_M=M_GRID, jobs=4)
    elapsed = time.perf_counter() - start
    R = np.zeros((20, 6))
    for r in rows:
        R[r.seed, r.level - 1] = r.rmse
    monotone = int(np.sum(np.all(np.diff(R, axis=1) <= 0, axis=1)))
    means = ", ".join(f"{v:.3f}" for v in R.mean(axis=0))
    report("C8 waves trend", monotone >= 16 and elapsed < 20 * 60,
           f"{monotone}/20 seeds non-increasing (need 16), mean RMSE by level [{means}], {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. command-line determinism


SCENARIO = "n = 40\np = 6\nactive = x1:sin2pi, x2:linear\nnoise_sd = 0.4\nseed = 9\n"


def _tree(path):
    if path.is_file():
        return {path.name: path.read_bytes()}
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(tmp_path):
    sc = tmp_path / "scenario.txt"
    sc.write_text(SCENARIO)
    data = tmp_path / "cohort.csv"
    assert cli.main(["simulate", "--scenario", str(sc), "--out", str(data)]) == 0
    query = tmp_path / "query.csv"
    query.write_text(data.read_text())
    commands = {
        "simulate": (["simulate", "--scenario", str(sc)], "cohort.csv"),
        "summarize": (["summarize", "--data", str(data)], "summary.csv"),
        "gram": (["gram", "--data", str(data)], "gram"),
        "fit": (["fit", "--data", str(data), "--M-grid", "0,1,2,3,4", "--plot"], "fit"),
        "waves": (["waves", "--scenario", str(sc), "--seeds", "2", "--M-grid", "0,1,2,3"], "waves.csv"),
    }
    differing = []
    runs = 0
    for name, (args, target) in commands.items():
        outputs = []
        for rep, jobs in enumerate((1, 1, 2, 4)):
            out = tmp_path / f"{name}_{rep}" / target
            out.parent.mkdir()
            code = cli.main([*args, "--out", str(out), "--jobs", str(jobs)])
            assert code == 0, name
            outputs.append(_tree(out))
            runs += 1
        if any(o != outputs[0] for o in outputs[1:]):
            differing.append(name)
    model = tmp_path / "fit_0" / "fit" / "model.json"
    preds = []
    for rep in range(2):
        out = tmp_path / f"pred_{rep}.csv"
        assert cli.main(["predict", "--model", str(model), "--data", str(query), "--out", str(out)]) == 0
        preds.append(out.read_bytes())
        runs += 1
    if preds[0] != preds[1]:
        differing.append("predict")
    report("C10 command-line determinism", not differing,
           f"{runs} runs across --jobs 1/2/4, commands with differing bytes: {differing or 'none'}")
