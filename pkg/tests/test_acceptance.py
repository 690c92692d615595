"""Acceptance criteria 1-10. Each check records a pass/fail line that is
printed in the pytest terminal summary, then asserts.

Tolerances are fixed here and never tuned to the measured values.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from rqpsgd import experiments as E
from rqpsgd import privacy as P
from rqpsgd.bounds import UtilityParams, quantization_error, utility_bound
from rqpsgd.cli import main
from rqpsgd.model import losses, per_example_grads
from rqpsgd.quantizer import make_grid, nearest_index, project_vector
from rqpsgd.train import TrainConfig, initial_weights, run, train

# --- criterion 1: accuracy table -------------------------------------------------

# (cell, algorithm): (reference median %, allowed absolute deviation in points)
TABLE1_BANDS = {
    ("diagnostic-logreg", "sgd"): (97.37, 2.5),
    ("diagnostic-logreg", "dp_sgd"): (96.92, 3.0),
    ("diagnostic-logreg", "proj_dp_sgd"): (94.30, 4.0),
    ("diagnostic-logreg", "rqp_sgd"): (95.18, 4.0),
    ("diagnostic-svm", "rqp_sgd"): (94.74, 4.0),
    ("mnist-logreg", "sgd"): (87.25, 1.5),
    ("mnist-logreg", "dp_sgd"): (86.02, 2.0),
    ("mnist-logreg", "rqp_sgd"): (84.81, 2.0),
}
SVM_GAP_POINTS = 10.0


def _medians(cells):
    return {(f"{c.dataset}-{c.model}", c.algorithm): c.median for c in cells}


@pytest.fixture(scope="module")
def diagnostic_table(diagnostic):
    return _medians(E.table1({"diagnostic": diagnostic}, repeats=10, base_seed=42))


@pytest.fixture(scope="module")
def mnist_table(mnist_dir):
    return _medians(E.table1({"mnist": E.prepare_mnist(mnist_dir)}, repeats=10, base_seed=42))


def _band(criterion, table, cell, alg):
    ref, tol = TABLE1_BANDS[(cell, alg)]
    got = table[(cell, alg)]
    criterion(f"1.{cell}.{alg}", abs(got - ref) <= tol, f"median {got:.2f}% vs {ref}% +/- {tol}")


@pytest.mark.parametrize("alg", ["sgd", "dp_sgd", "proj_dp_sgd", "rqp_sgd"])
def test_c1_diagnostic_logreg(diagnostic_table, criterion, alg):
    _band(criterion, diagnostic_table, "diagnostic-logreg", alg)


def test_c1_diagnostic_logreg_ordering(diagnostic_table, criterion):
    rqp = diagnostic_table[("diagnostic-logreg", "rqp_sgd")]
    proj = diagnostic_table[("diagnostic-logreg", "proj_dp_sgd")]
    criterion("1.diagnostic-logreg.order", rqp >= proj, f"rqp {rqp:.2f}% >= proj {proj:.2f}%")


def test_c1_diagnostic_svm_rqp(diagnostic_table, criterion):
    _band(criterion, diagnostic_table, "diagnostic-svm", "rqp_sgd")


def test_c1_diagnostic_svm_gap(diagnostic_table, criterion):
    rqp = diagnostic_table[("diagnostic-svm", "rqp_sgd")]
    proj = diagnostic_table[("diagnostic-svm", "proj_dp_sgd")]
    criterion("1.diagnostic-svm.gap", rqp - proj >= SVM_GAP_POINTS,
              f"rqp - proj = {rqp - proj:.2f} pts (need >= {SVM_GAP_POINTS})")


@pytest.mark.parametrize("alg", ["sgd", "dp_sgd", "rqp_sgd"])
def test_c1_mnist(mnist_table, criterion, alg):
    _band(criterion, mnist_table, "mnist-logreg", alg)


# --- criterion 2: closed form vs brute force --------------------------------------

BASE = P.PrivacyParams(bits=4, q=0.95, sigma=1.0, eta=1.0, batch=10, n=455, iters=46, bound=0.3, rho=0.45)


def test_c2_accountant_matches_oracle(criterion):
    start = time.perf_counter()
    worst = 0.0
    for bits in (3, 4):
        for q in (0.7, 0.9, 0.95):
            for sigma_l in (0.05, 0.1, 0.5):
                p = BASE.with_(bits=bits, q=q, sigma=sigma_l * BASE.batch / BASE.eta)
                closed = P.per_step_epsilon(p).epsilon_t
                brute = P.per_step_epsilon_oracle(p)
                worst = max(worst, abs(closed - brute) / brute)
    elapsed = time.perf_counter() - start
    criterion("2", worst <= 1e-4 and elapsed < 60,
              f"max relative gap {worst:.2e} (<= 1e-4) over 27 points in {elapsed:.1f}s (< 60s)")


# --- criterion 3: Monte-Carlo audit -----------------------------------------------

AUDIT_POINTS = [(4, 0.95, 0.1), (3, 0.7, 0.05), (4, 0.9, 0.5), (3, 0.3, 0.01), (4, 0.7, 0.001)]
AUDIT_SAMPLES = 10**7


def test_c3_monte_carlo_audit(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    lines, ok = [], True
    for bits, q, sigma_l in AUDIT_POINTS:
        p = BASE.with_(bits=bits, q=q, sigma=sigma_l * BASE.batch / BASE.eta)
        eps = P.per_step_epsilon(p).epsilon_t
        res = P.audit_worst_case(p, AUDIT_SAMPLES, rng)
        good = res["max_abs_log_ratio"] <= eps + 3 * res["std_error"]
        ok &= good
        lines.append(f"b={bits},q={q},sl={sigma_l}: {res['max_abs_log_ratio']:.4f} vs {eps:.4f}{'' if good else ' X'}")
    elapsed = time.perf_counter() - start
    criterion("3", ok and elapsed < 120, f"{'; '.join(lines)} [{elapsed:.0f}s]")


# --- criterion 4: randomized projection distribution ---------------------------------

def test_c4_randomized_projection_chi_square(criterion):
    rng = np.random.default_rng(77)
    failures, worst_p = [], 1.0
    for bits in (1, 2, 3, 4):
        g = make_grid(0.3, bits)
        x = g.levels[0] + 0.3 * g.spacing  # nearest level is level 0
        for q in (0.3, 0.7, 0.95):
            out = project_vector(g, q, np.full(10**6, x), rng, mode="randomized")
            counts = np.bincount(nearest_index(g, out), minlength=g.size)
            expected = np.full(g.size, (1 - q) / (g.size - 1))
            expected[0] = q
            pval = chisquare(counts, expected * 10**6).pvalue
            worst_p = min(worst_p, pval)
            if pval < 1e-3:
                failures.append(f"b={bits},q={q}")
    criterion("4", not failures, f"12 (b, q) pairs, smallest p-value {worst_p:.3g} (alpha 0.001)"
              + (f"; failing {failures}" if failures else ""))


# --- criterion 5: gradients ---------------------------------------------------------

def test_c5_gradient_checks(criterion):
    rng = np.random.default_rng(5)
    h = 1e-6
    worst = {}
    for loss, K in (("logistic", 1), ("hinge", 1), ("softmax", 10)):
        done, err = 0, 0.0
        while done < 100:
            W = rng.normal(size=(K, 8))
            x = rng.normal(size=8)
            y = int(rng.integers(0, 2 if K == 1 else K))
            if loss == "hinge" and abs(1 - (2 * y - 1) * x @ W[0]) < 1e-3:
                continue  # too close to the kink for a central difference
            g = per_example_grads(loss, W, x, y)[0]
            fd = np.zeros_like(W)
            for idx in np.ndindex(W.shape):
                Wp, Wm = W.copy(), W.copy()
                Wp[idx] += h
                Wm[idx] -= h
                fd[idx] = (losses(loss, Wp, x, y)[0] - losses(loss, Wm, x, y)[0]) / (2 * h)
            scale = max(np.abs(fd).max(), 1e-8)
            err = max(err, np.abs(g - fd).max() / scale)
            done += 1
        worst[loss] = err
    ok = all(v <= 1e-5 for v in worst.values())
    criterion("5", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (relative, <= 1e-5)")


# --- criterion 6: utility bound ------------------------------------------------------

def test_c6_quantization_error_at_q_one(criterion):
    ok = True
    for bits in range(1, 9):
        u = UtilityParams(d=30, bound=0.3, eta=1.0, rho=0.45, sigma=0.0, iters=445, bits=bits, q=1.0)
        ok &= quantization_error(u) * (2**bits - 1) ** 2 == pytest.approx(u.d * u.bound**2, rel=1e-14)
    criterion("6.eq-q1", ok, "E_Q(q=1) * (2^b-1)^2 = d M^2 for b = 1..8")


def test_c6_quantization_error_decreasing(criterion):
    u = UtilityParams(d=30, bound=0.3, eta=1.0, rho=0.45, sigma=0.0, iters=445, bits=4, q=0.0)
    vals = [quantization_error(u.with_(q=q)) for q in np.linspace(0, 1, 201)]
    criterion("6.eq-decreasing", all(a > b for a, b in zip(vals, vals[1:])), "E_Q strictly decreasing on 201 q values")


def _curves(q):
    pts = E.bound_curves(q)
    rqp = {p.epsilon: p.bound for p in pts if p.mode == "rqp" and p.attainable}
    proj = {p.epsilon: p.bound for p in pts if p.mode == "proj_dp"}
    return rqp, proj


def test_c6_curves_q095_below(criterion):
    rqp, proj = _curves(0.95)
    common = sorted(set(rqp) & set(proj))
    ok = bool(common) and all(rqp[e] < proj[e] for e in common)
    criterion("6.curves-q0.95", ok, f"rqp < proj_dp at all {len(common)} shared epsilons")


def test_c6_curves_q090_crossover(criterion):
    rqp, proj = _curves(0.90)
    above = [e for e in sorted(set(rqp) & set(proj)) if rqp[e] > proj[e]]
    ratio = max(rqp[e] / proj[e] for e in set(rqp) & set(proj))
    criterion("6.curves-q0.90", bool(above), f"epsilons where rqp > proj_dp: {above} (max rqp/proj ratio {ratio:.3g})")


# --- criterion 7: toy ERM -----------------------------------------------------------

def test_c7_toy_erm_bound(criterion):
    # F(w) = mean_i (w - x_i)^2 / 2 on [-M, M]; with x_i in [-0.05, 0.15] every
    # per-example gradient has |w - x_i| <= 0.45 = rho, so clipping is inactive
    M, bits, q, sigma, eta, T, rho = 0.3, 4, 0.9, 0.2, 0.1, 200, 0.45
    x = np.random.default_rng(0).uniform(-0.05, 0.15, size=50)
    X, y = np.ones((50, 1)), x
    w_star = float(np.clip(x.mean(), -M, M))
    F = lambda w: 0.5 * np.mean((w - x) ** 2)
    grid = make_grid(M, bits)
    base = TrainConfig(algorithm="rqp_sgd", eta=eta, batch=1, iters=T, rho=rho, loss="squared",
                       sigma=sigma, grid=grid, q=q)
    init = initial_weights(base, 1, 1)
    excess = np.array([F(run(replace(base, seed=s), X, y, init)[1].weights[0, 0]) - F(w_star) for s in range(1000)])
    mean, se = excess.mean(), excess.std(ddof=1) / math.sqrt(len(excess))
    bound = utility_bound(UtilityParams(d=1, bound=M, eta=eta, rho=rho, sigma=sigma, iters=T, bits=bits, q=q))
    criterion("7", mean - 3 * se <= bound, f"mean excess {mean:.4g} (se {se:.2g}) <= bound {bound:.4g}")


# --- criterion 8: limit equivalences ---------------------------------------------------

def test_c8_limit_equivalences(diagnostic, criterion):
    tr, te = diagnostic
    grid = make_grid(0.3, 4)
    common = dict(eta=1.0, batch=10, iters=46, rho=0.45)
    ok = True
    for seed in range(5):
        sgd = train(TrainConfig("sgd", seed=seed, **common), tr, te).final_weights.weights
        dp0 = train(TrainConfig("dp_sgd", sigma=0.0, seed=seed, **common), tr, te).final_weights.weights
        ok &= np.array_equal(sgd, dp0)
        proj0 = train(TrainConfig("proj_dp_sgd", sigma=0.0, grid=grid, seed=seed, **common), tr, te)
        ok &= np.array_equal(proj0.final_weights.weights, _projected_sgd(tr, grid, seed, **common))
        for sigma in (0.0, 0.66):
            proj = train(TrainConfig("proj_dp_sgd", sigma=sigma, grid=grid, seed=seed, **common), tr, te)
            rqp = train(TrainConfig("rqp_sgd", sigma=sigma, grid=grid, q=1 - 1e-15, seed=seed, **common), tr, te)
            ok &= np.array_equal(proj.final_weights.weights, rqp.final_weights.weights)
            ok &= np.array_equal(proj.averaged_weights.weights, rqp.averaged_weights.weights)
    criterion("8", ok, "dp(sigma=0) == sgd, proj(sigma=0) == projected SGD, rqp(q=1-1e-15) == proj; 5 seeds, bitwise")


def _projected_sgd(ds, grid, seed, eta, batch, iters, rho):
    """Noise-free projected SGD written out directly, same RNG layout."""
    rng = np.random.default_rng(seed)
    w = grid.levels[nearest_index(grid, np.zeros(ds.feature_dim))]
    for _ in range(iters):
        idx = rng.integers(0, len(ds), size=batch)
        rng.standard_normal((1, ds.feature_dim))
        rng.random((1, ds.feature_dim))
        xb, yb = ds.X[idx], ds.y[idx]
        r = 0.5 * (1 + np.tanh(0.5 * (xb @ w))) - yb
        g = r[:, None] * xb
        norms = np.linalg.norm(g, axis=1)
        g = g * np.where(norms > rho, rho / np.where(norms > 0, norms, 1), 1.0)[:, None]
        w = grid.levels[nearest_index(grid, w - eta * g.sum(axis=0) / batch)]
    return w[None, :]


# --- criterion 9: q/sigma trade-off --------------------------------------------------------

TRADEOFF_DROP_POINTS = 15.0


@pytest.mark.parametrize("bits,eps", [(3, 0.5), (3, 1.0), (4, 0.5), (4, 1.0)])
def test_c9_tradeoff(diagnostic, criterion, bits, eps):
    tr, te = diagnostic
    rows = [r for r in E.tradeoff(tr, te, epsilon=eps, bits=bits, repeats=10, base_seed=42) if r.attainable]
    qs = [r.q for r in rows]
    monotone = all(a < b for a, b in zip(qs, qs[1:]))
    low, high = min(rows, key=lambda r: r.q), max(rows, key=lambda r: r.q)
    drop = high.median - low.median
    criterion(f"9.b{bits}-e{eps}", monotone and drop >= TRADEOFF_DROP_POINTS,
              f"q monotone in sigma: {monotone}; median {low.median:.1f}% at q={low.q:.3f} vs "
              f"{high.median:.1f}% at q={high.q:.3f} (drop {drop:.1f} pts, need >= {TRADEOFF_DROP_POINTS})")


# --- criterion 10: determinism ------------------------------------------------------------

def test_c10_determinism(wdbc_path, tmp_path, criterion):
    commands = [
        ["table1", "--datasets", "diagnostic", "--repeats", "3", "--wdbc", wdbc_path],
        ["fig-tradeoff", "--epsilon", "1.0", "--bits", "4", "--repeats", "2", "--wdbc", wdbc_path],
        ["fig-bounds"],
        ["train", "--algorithm", "rqp_sgd", "--sigma", "1.04", "--seed", "7", "--wdbc", wdbc_path],
    ]
    outputs = []
    for attempt, workers in (("a", "1"), ("b", "4")):
        d = tmp_path / attempt
        for cmd in commands:
            extra = ["--workers", workers] if cmd[0] in ("table1", "fig-tradeoff") else []
            assert main(cmd + extra + ["--output-dir", str(d)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    same = outputs[0] == outputs[1]
    criterion("10", same and len(outputs[0]) >= 5,
              f"{len(outputs[0])} output files byte-identical across reruns (1 vs 4 workers): {same}")
