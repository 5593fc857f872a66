"""Fast oracle and invariant checks, runnable from an installed package.

Each check returns ``(passed, detail)``; :func:`run` collects them. The pytest
suite covers the same ground more thoroughly; this is the smoke test behind the
``selftest`` CLI verb.
"""
from __future__ import annotations

import time

import numpy as np

from . import _backend, convex, dynamics, estimators as est, kernels as K, nets


def _fd_kernel_derivs(rng):
    worst = 0.0
    for k in (K.Gaussian(0.7), K.RationalQuadraticMixture(), K.Polynomial(3, 1.0, 0.5),
              K.Composed(K.Gaussian(1.0), nets.random_net([3, 4, 2], rng))):
        X, Y = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))
        _, D1, D2 = k.derivs(X, Y)
        h = 1e-5
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd1 = (k.gram(X + e, Y) - k.gram(X - e, Y)) / (2 * h)
            worst = max(worst, np.abs(fd1 - D1[:, :, i]).max())
            fd2 = (k.derivs(X, Y + e)[1] - k.derivs(X, Y - e)[1]) / (2 * h)
            worst = max(worst, np.abs(fd2 - D2[:, :, :, i]).max())
    return worst < 1e-6, f"max abs error {worst:.2e}"


def _gram_psd(rng):
    worst = np.inf
    for k in (K.Gaussian(1.3), K.RationalQuadraticMixture(), K.Linear()):
        X = rng.normal(size=(12, 3))
        S = K.gram_bundle(k, X).stacked()
        worst = min(worst, np.linalg.eigvalsh(S)[0] / np.trace(S))
    return worst >= -1e-8, f"min eigenvalue / trace {worst:.2e}"


def _mmd_double_loop(rng):
    k = K.Gaussian(0.9)
    X, Y = rng.normal(size=(7, 2)), rng.normal(size=(6, 2)) + 0.5
    n, m = len(X), len(Y)
    kxx = sum(K.eval(k, X[i], X[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    kyy = sum(K.eval(k, Y[i], Y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    kxy = sum(K.eval(k, x, y) for x in X for y in Y) / (n * m)
    err = abs(est.mmd2_unbiased(k, X, Y) - (kxx + kyy - 2 * kxy))
    return err < 1e-12, f"abs error {err:.2e}"


def _dirac_closed_form(rng):
    worst = 0.0
    for psi in (0.5, 1.0, 2.0):
        for theta in (-1.0, 0.3, 2.0):
            X, Y = np.zeros((4, 1)), np.full((4, 1), theta)
            v = est.mmd2_biased(est.scaled_gaussian(psi), X, Y)
            worst = max(worst, abs(v - 2 * (1 - np.exp(-psi**2 * theta**2 / 2))))
    return worst < 1e-10, f"max abs error {worst:.2e}"


def _gcmmd_linear_oracle(rng):
    worst = 0.0
    for _ in range(5):
        d = int(rng.integers(1, 5))
        X, Y, M = rng.normal(size=(9, d)), rng.normal(size=(8, d)), rng.normal(size=(5, d))
        a = est.gcmmd2(K.Linear(), X, Y, M, 0.7)[0]
        b = est.gcmmd2_linear_oracle(X, Y, M, 0.7)
        worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    return worst <= 1e-8, f"max rel error {worst:.2e}"


def _lowrank_full(rng):
    k = K.Gaussian(1.0)
    X, Y, M = rng.normal(size=(10, 2)), rng.normal(size=(9, 2)) + 0.3, rng.normal(size=(6, 2))
    full = est.gcmmd2(k, X, Y, M, 1.0)[0]
    low = est.gcmmd2_lowrank(k, X, Y, M, 1.0, chol_tol=0.0)[0]
    rel = abs(full - low) / abs(full)
    return rel <= 1e-6, f"rel error {rel:.2e}"


def _smmd_below_gcmmd(rng):
    worst = np.inf
    for _ in range(10):
        k = K.Gaussian(float(rng.uniform(0.3, 3)))
        X, Y, M = rng.normal(size=(8, 2)), rng.normal(size=(7, 2)) + 0.4, rng.normal(size=(5, 2))
        lam = float(rng.uniform(0.1, 3))
        s = est.smmd(k, X, Y, M, lam).value ** 2
        g = est.gcmmd2(k, X, Y, M, lam)[0]
        worst = min(worst, g - s)
    return worst >= -1e-8, f"min slack {worst:.2e}"


def _qcqp_analytic(rng):
    worst = 0.0
    for _ in range(5):
        A = rng.normal(size=(3, 3))
        P = A @ A.T + 0.1 * np.eye(3)
        c = rng.normal(size=3)
        res = convex.solve(convex.Qcqp(c, [P]))
        exact = np.sqrt(c @ np.linalg.solve(P, c))
        worst = max(worst, abs(res.value - exact), max(res.kkt.values()))
    return worst <= 1e-9, f"max error / residual {worst:.2e}"


def _net_grads(rng):
    net = nets.random_net([3, 5, 4, 2], rng, spectral=True)
    X, go, gj = rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 3))

    def loss():
        out, J, cache = nets.forward_with_jacobian(net, X)
        return float((out * go).sum() + (J * gj).sum()), cache

    _, cache = loss()
    grads = nets.param_grads(net, cache, go, gj).as_list()
    worst = 0.0
    for P, G in zip(net.parameters(), grads):
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + 1e-6
            net.touch()
            up = loss()[0]
            P[idx] = old - 1e-6
            net.touch()
            down = loss()[0]
            P[idx] = old
            net.touch()
            worst = max(worst, abs((up - down) / 2e-6 - G[idx]) / max(1.0, abs(G[idx])))
    return worst < 1e-4, f"max rel error {worst:.2e}"


def _backends_agree(rng):
    impls = _backend.implementations()
    if len(impls) < 2:
        return True, "compiled core not built; python fallback only"
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
    a = _backend.gaussian_derivs(X, Y, 0.8, impls["python"])
    b = _backend.gaussian_derivs(X, Y, 0.8, impls["compiled"])
    worst = max(np.abs(u - v).max() for u, v in zip(a, b))
    return worst < 1e-12, f"max abs difference {worst:.2e}"


def _lipmmd_below_w(rng):
    X, Y = rng.normal(size=(6, 1)), rng.normal(size=(6, 1)) + 1.0
    lo, hi = min(X.min(), Y.min()) - 1, max(X.max(), Y.max()) + 1
    Z = np.linspace(lo, hi, int((hi - lo) / 0.05) + 1)[:, None]
    v = est.lipmmd(K.Gaussian(1.0), X, Y, Z, 1.0)[0]
    w = est.wasserstein1d_exact(X, Y)
    return v <= w + 1e-6, f"LipMMD {v:.4f} vs W {w:.4f}"


def _adam_first_step(rng):
    state = dynamics.AdamState.init([np.zeros(1)])
    new = dynamics.adam_step(state, [np.array([0.3])], lr=0.01, eps=1e-8)
    expect = -0.01 * 0.3 / (0.3 + 1e-8)
    err = abs(new.params[0][0] - expect)
    return err < 1e-15, f"abs error {err:.2e}"


def _dirac_smmd_samples(rng):
    X, Y = np.zeros((64, 1)), np.ones((64, 1))
    v = est.smmd(est.scaled_gaussian(1.0), X, Y, lam=1.0).value ** 2
    err = abs(v - est.dirac_smmd2(1.0, 1.0, 1.0))
    return err < 1e-10, f"abs error {err:.2e}"


CHECKS = {
    "kernel derivatives vs finite differences": _fd_kernel_derivs,
    "stacked Gram bundle is PSD": _gram_psd,
    "unbiased MMD vs double loop": _mmd_double_loop,
    "point-mass MMD closed form": _dirac_closed_form,
    "GCMMD linear-kernel oracle": _gcmmd_linear_oracle,
    "low-rank GCMMD at full rank": _lowrank_full,
    "SMMD^2 <= GCMMD^2": _smmd_below_gcmmd,
    "QCQP single-ellipsoid optimum": _qcqp_analytic,
    "network gradients vs finite differences": _net_grads,
    "compiled and python cores agree": _backends_agree,
    "LipMMD <= Wasserstein-1 (1D)": _lipmmd_below_w,
    "Adam first step": _adam_first_step,
    "point-mass SMMD closed form": _dirac_smmd_samples,
}


def run(seed: int = 0, stream=None):
    """Run every check; returns a list of ``(name, passed, detail, seconds)``."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failure, reported with its message
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
        if stream is not None:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", file=stream)
    return results
