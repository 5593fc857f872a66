"""Acceptance checks, one test (or a few parts) per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

from scaledmmd import convex, dynamics, estimators as est, kernels as K, nets
from scaledmmd.errors import DegenerateError


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


def random_kernel(rng, d):
    kind = rng.integers(4)
    if kind == 0:
        return K.Gaussian(float(rng.uniform(0.3, 3.0)))
    if kind == 1:
        return K.RationalQuadraticMixture()
    if kind == 2:
        return K.Linear()
    widths = [d] + sorted(rng.integers(1, 5, size=2).tolist(), reverse=True)
    top = K.Gaussian(float(rng.uniform(0.5, 2.0))) if rng.random() < 0.7 else K.Linear()
    return K.Composed(top, nets.random_net(widths, rng))


def dense_grid_1d(X, Y, spacing=0.05, pad=1.0):
    lo, hi = min(X.min(), Y.min()) - pad, max(X.max(), Y.max()) + pad
    return np.linspace(lo, hi, int(np.ceil((hi - lo) / spacing)) + 1)[:, None]


# 1 -----------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c01_dirac_closed_form():
    def run():
        worst = 0.0
        for psi in np.linspace(0.25, 4.0, 5):
            for theta in np.linspace(-3.0, 3.0, 5):
                X, Y = np.zeros((8, 1)), np.full((8, 1), theta)
                v = est.mmd2_biased(est.scaled_gaussian(psi), X, Y)
                worst = max(worst, abs(v - 2 * (1 - np.exp(-psi**2 * theta**2 / 2))))
        return worst

    worst, secs = timed(run)
    assert worst <= 1e-10
    assert secs < 1.0


# 2 -----------------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c02_optmmd_saturation():
    grid = [2.0**k for k in range(-6, 7)]
    mmd = lambda psi, X, Y: np.sqrt(est.mmd2_biased(est.scaled_gaussian(psi), X, Y))

    def run():
        X = np.zeros((4, 1))
        sup1, arg1 = est.optimize_over_family(mmd, grid, X, np.ones((4, 1)))
        sup0, arg0 = est.optimize_over_family(mmd, grid, X, np.zeros((4, 1)))
        return sup1, sup0, arg0

    (sup1, sup0, arg0), secs = timed(run)
    assert abs(sup1 - np.sqrt(2.0)) <= 1e-3
    assert sup0 == 0.0 and arg0 == grid[0]
    assert secs < 1.0


# 3 -----------------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c03_gcmmd_linear_oracle():
    rng = np.random.default_rng(3)

    def run():
        worst = 0.0
        for _ in range(50):
            n, m = rng.integers(2, 65, size=2)
            d, M = int(rng.integers(1, 9)), int(rng.integers(1, 17))
            lam = float(rng.uniform(0.05, 5.0))
            X = rng.normal(size=(n, d))
            Y = rng.normal(size=(m, d)) * rng.uniform(0.5, 2.0) + rng.normal(size=d)
            Xmu = rng.normal(size=(M, d))
            v = est.gcmmd2(K.Linear(), X, Y, Xmu, lam)[0]
            ref = est.gcmmd2_linear_oracle(X, Y, Xmu, lam)
            worst = max(worst, abs(v - ref) / abs(ref))
        return worst

    worst, secs = timed(run)
    assert worst <= 1e-8
    assert secs < 10.0


# 4 -----------------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c04_lowrank_full_rank():
    rng = np.random.default_rng(4)

    def run():
        worst = 0.0
        for _ in range(20):
            d = int(rng.integers(1, 4))
            k = random_kernel(rng, d)
            X, Y = rng.normal(size=(12, d)), rng.normal(size=(10, d)) + 0.5
            Xmu = rng.normal(size=(int(rng.integers(1, 9)), d))
            lam = float(rng.uniform(0.1, 3.0))
            full = est.gcmmd2(k, X, Y, Xmu, lam)[0]
            low, rank = est.gcmmd2_lowrank(k, X, Y, Xmu, lam, chol_tol=0.0)
            worst = max(worst, abs(full - low) / max(abs(full), 1e-300))
        return worst

    worst, secs = timed(run)
    assert worst <= 1e-6
    assert secs < 10.0


# 5 -----------------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c05_smmd_below_gcmmd():
    rng = np.random.default_rng(5)
    worst = np.inf
    for _ in range(100):
        d = int(rng.integers(1, 4))
        k = random_kernel(rng, d)
        X = rng.normal(size=(int(rng.integers(2, 15)), d))
        Y = rng.normal(size=(int(rng.integers(2, 15)), d)) + rng.normal(size=d)
        Xmu = rng.normal(size=(int(rng.integers(1, 10)), d))
        lam = float(10 ** rng.uniform(-2, 1))
        s = est.smmd(k, X, Y, Xmu, lam).value
        g = np.sqrt(max(est.gcmmd2(k, X, Y, Xmu, lam)[0], 0.0))
        worst = min(worst, g - s)
    assert worst >= -1e-8


# 6 and 7 share the LipMMD solves ------------------------------------------------------

@pytest.fixture(scope="module")
def lip_runs():
    rng = np.random.default_rng(6)
    runs = []
    t0 = time.perf_counter()
    for _ in range(25):
        n = int(rng.integers(2, 7))
        X = rng.normal(size=(n, 1))
        Y = rng.normal(size=(n, 1)) * rng.uniform(0.5, 1.5) + rng.uniform(-2, 2)
        Z = dense_grid_1d(X, Y)
        v, duals, state = est.lipmmd(K.Gaussian(1.0), X, Y, Z, 1.0, return_state=True)
        runs.append((v, est.wasserstein1d_exact(X, Y), state))
    return runs, time.perf_counter() - t0


@pytest.mark.criterion(6)
def test_c06_lipmmd_below_wasserstein(lip_runs):
    runs, secs = lip_runs
    gaps = [w - v for v, w, _ in runs]
    assert min(gaps) >= -1e-6
    assert secs < 60.0


@pytest.mark.criterion(7)
def test_c07_qcqp_kkt_on_lipmmd_solves(lip_runs):
    runs, _ = lip_runs
    worst = max(max(st.kkt.values()) for _, _, st in runs)
    assert worst <= 1e-8


@pytest.mark.criterion(7)
def test_c07_qcqp_random_instances():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(30):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        Ps = []
        for _ in range(m):
            A = rng.normal(size=(n, int(rng.integers(1, n + 1))))
            Ps.append(A @ A.T)
        Ps[0] = Ps[0] + 0.1 * np.eye(n)
        res = convex.solve(convex.Qcqp(rng.normal(size=n), Ps))
        worst = max(worst, max(res.kkt.values()))
    assert worst <= 1e-8


@pytest.mark.criterion(7)
def test_c07_qcqp_analytic_single_constraint():
    r = convex.solve(convex.Qcqp([1.0, 0.0], [np.eye(2)]))
    assert np.allclose(r.x, [1.0, 0.0], atol=1e-9) and abs(r.duals[0] - 0.5) <= 1e-9
    r = convex.solve(convex.Qcqp([1.0, 0.0], [np.diag([4.0, 1.0])]))
    assert np.allclose(r.x, [0.5, 0.0], atol=1e-9)
    assert abs(r.value - 0.5) <= 1e-9 and abs(r.duals[0] - 0.25) <= 1e-9
    rng = np.random.default_rng(71)
    for _ in range(10):
        A = rng.normal(size=(4, 4))
        P, c = A @ A.T + 0.2 * np.eye(4), rng.normal(size=4)
        r = convex.solve(convex.Qcqp(c, [P]))
        x_star = np.linalg.solve(P, c) / np.sqrt(c @ np.linalg.solve(P, c))
        assert np.abs(r.x - x_star).max() <= 1e-9
        assert abs(r.duals[0] - 0.5 * np.sqrt(c @ np.linalg.solve(P, c))) <= 1e-9


# 8 -----------------------------------------------------------------------------------

def _fd_param_check(net, X, go, gj, h=1e-6):
    def loss():
        out, J, cache = nets.forward_with_jacobian(net, X)
        return float((out * go).sum() + (J * gj).sum()), cache

    _, cache = loss()
    grads = nets.param_grads(net, cache, go, gj).as_list()
    fd_all, an_all = [], []
    for P, G in zip(net.parameters(), grads):
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            net.touch()
            up = loss()[0]
            P[idx] = old - h
            net.touch()
            down = loss()[0]
            P[idx] = old
            net.touch()
            fd_all.append((up - down) / (2 * h))
            an_all.append(G[idx])
    fd_all, an_all = np.array(fd_all), np.array(an_all)
    return np.linalg.norm(fd_all - an_all) / max(np.linalg.norm(an_all), 1e-12)


@pytest.mark.criterion(8)
def test_c08_net_param_grads():
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(100):
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(1, 5, size=depth + 1)]
        net = nets.random_net(widths, rng, leak=float(rng.uniform(0.05, 0.5)),
                              spectral=bool(i % 2))
        X = rng.normal(size=(4, widths[0]))
        go = rng.normal(size=(4, widths[-1]))
        gj = rng.normal(size=(4, widths[-1], widths[0]))
        worst = max(worst, _fd_param_check(net, X, go, gj))
    assert worst <= 1e-4


@pytest.mark.criterion(8)
def test_c08_kernel_derivatives():
    rng = np.random.default_rng(81)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        k = random_kernel(rng, d)
        x, y = rng.normal(size=d), rng.normal(size=d)
        g, H = K.grad_x(k, x, y), K.grad_xy(k, x, y)
        fd_g, fd_H = np.zeros(d), np.zeros((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1e-5 * (1 + abs(x[i]))
            fd_g[i] = (K.eval(k, x + e, y) - K.eval(k, x - e, y)) / (2 * e[i])
            ey = np.zeros(d)
            ey[i] = 1e-5 * (1 + abs(y[i]))
            fd_H[:, i] = (K.grad_x(k, x, y + ey) - K.grad_x(k, x, y - ey)) / (2 * ey[i])
        scale = max(np.abs(g).max(), np.abs(H).max(), 1e-3)
        worst = max(worst, np.abs(fd_g - g).max() / scale, np.abs(fd_H - H).max() / scale)
    assert worst <= 1e-5


@pytest.mark.criterion(8)
def test_c08_lipmmd_kkt_differential():
    rng = np.random.default_rng(82)
    checked, worst, attempts = 0, 0.0, 0
    while checked < 10:
        attempts += 1
        assert attempts < 40
        n = int(rng.integers(2, 5))
        X = rng.normal(size=(n, 1))
        Y = rng.normal(size=(n, 1)) + rng.uniform(0.5, 2.0)
        Z = np.linspace(min(X.min(), Y.min()) - 1, max(X.max(), Y.max()) + 1, 25)[:, None]
        psi, lam = float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.2, 2.0))
        perturb = lambda eps: (est.scaled_gaussian(psi + eps), X, Y)
        _, _, state = est.lipmmd(perturb(0.0)[0], X, Y, Z, lam, return_state=True)
        try:
            g = est.lipmmd_grad(state, perturb)
        except DegenerateError:
            continue
        h = 1e-5
        fd = (est.lipmmd(perturb(h)[0], X, Y, Z, lam)[0]
              - est.lipmmd(perturb(-h)[0], X, Y, Z, lam)[0]) / (2 * h)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-6))
        checked += 1
    assert worst <= 1e-3


# 9 -----------------------------------------------------------------------------------

def _unit_nets(rng, count):
    for _ in range(count):
        d0, depth = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        widths = [d0]
        for _ in range(depth):
            widths.append(int(rng.integers(1, widths[-1] + 1)))
        kappa, leak = float(rng.uniform(1.0, 4.0)), float(rng.uniform(0.05, 0.5))
        net = nets.random_net(widths, rng, leak=leak, kappa=kappa, unit_norm=True)
        yield net, kappa, rng.normal(size=(20, d0))


@pytest.mark.criterion(9)
def test_c09_sigma_min_product():
    rng = np.random.default_rng(9)
    smin = lambda A: np.linalg.svd(A, compute_uv=False).min()
    for _ in range(200):
        p = int(rng.integers(1, 5))
        n = int(rng.integers(p, 7))
        m = int(rng.integers(n, 9))
        A, B = rng.normal(size=(m, n)), rng.normal(size=(n, p))
        assert smin(A @ B) >= smin(A) * smin(B) - 1e-9


@pytest.mark.criterion(9)
@pytest.mark.xfail(strict=True, reason="the stated floor d_L alpha^L / kappa^L does not hold; "
                   "d_L (alpha / kappa)^(2L) does (see test_nets)")
def test_c09_gradient_floor_stated():
    rng = np.random.default_rng(91)
    violations = 0
    for net, kappa, X in _unit_nets(rng, 200):
        assert nets.in_psi_kappa(net, kappa, unit=True)
        floor = nets.ContinuityBoundParams(1, 1, kappa, net.leak, net.widths[-1],
                                           net.depth).gradient_floor()
        sq = (nets.jacobian(net, X) ** 2).sum(axis=(1, 2))
        violations += int(np.sum(sq < floor - 1e-9))
    assert violations == 0, f"{violations} of 4000 inputs fall below the stated floor"


@pytest.mark.criterion(9)
def test_c09_pseudo_homogeneity():
    rng = np.random.default_rng(92)
    for _ in range(50):
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(1, 6, size=depth + 1)]
        net = nets.random_net(widths, rng, leak=float(rng.uniform(0.05, 0.5)),
                              kappa=float(rng.uniform(1, 5)))
        scale, net1 = nets.normalize_to_psi1(net)
        X = rng.normal(size=(50, widths[0]))
        a, b = nets.forward(net, X)[0], scale * nets.forward(net1, X)[0]
        assert np.abs(a - b).max() <= 1e-8 * max(1.0, np.abs(a).max())


# 10 ----------------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_continuity_bound():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(50):
        d0 = int(rng.integers(1, 4))
        widths = [d0] + sorted(rng.integers(1, d0 + 1, size=int(rng.integers(1, 4))).tolist(),
                               reverse=True)
        kappa, leak = float(rng.uniform(1.5, 4.0)), float(rng.uniform(0.1, 0.5))
        bw = float(rng.uniform(0.5, 2.0))
        net = nets.random_net(widths, rng, leak=leak, kappa=kappa)
        assert nets.in_psi_kappa(net, kappa)
        X = rng.normal(size=(24, d0))
        Y = rng.normal(size=(24, d0)) * rng.uniform(0.5, 2.0) + rng.normal(size=d0)
        Xmu = X + 0.1 * rng.normal(size=X.shape)          # mu with a density around P
        s = est.smmd(K.Composed(K.Gaussian(bw), net), X, Y, Xmu, 1.0).value
        c = nets.ContinuityBoundParams.for_gaussian(bw, kappa, net).constant()
        w = est.wasserstein_assignment(X, Y)
        worst = max(worst, s / (c * w))
    assert worst <= 1.0


# 11 ----------------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_dirac_dynamics():
    t0 = time.perf_counter()
    smmd = dynamics.DiracLoss("SMMD")
    for name in dynamics.FIXTURE_INITS:
        traj = dynamics.simulate_fixture(smmd, name, steps=10_000)
        assert not traj.diverged
        assert np.min(np.abs(traj.theta)) < 1e-2, name
    stuck = dynamics.simulate_fixture(dynamics.DiracLoss("MMD"), "C", steps=10_000)
    assert abs(abs(stuck.theta[-1]) - abs(stuck.theta[0])) < 1e-3
    assert time.perf_counter() - t0 < 30.0


# 12 ----------------------------------------------------------------------------------

@pytest.mark.criterion(12)
@pytest.mark.slow
def test_c12_toy_training():
    cfg = dynamics.TrainConfig(loss="SMMD", seed=0, gen_steps=5000)
    t0 = time.perf_counter()
    hist = dynamics.train_toy(cfg)
    secs = time.perf_counter() - t0
    score = dynamics.evaluate_generator(hist.generator)
    print(f"held-out mmd2_unbiased {score:.4f} after {secs:.0f} s")
    assert score < 0.05
    assert secs < 600.0


@pytest.mark.criterion(12)
def test_c12_swgan_is_linear_smmd():
    rng = np.random.default_rng(12)
    for _ in range(20):
        critic = nets.random_net([2, 8, 4, 1], rng)
        X, Y = rng.normal(size=(16, 2)), rng.normal(size=(16, 2)) + 0.5
        fX, JX, _ = nets.forward_with_jacobian(critic, X)
        fY, _ = nets.forward(critic, Y)
        swgan = dynamics.swgan_loss(fX, fY, JX, scale=10.0)[0]
        lin = est.smmd(K.Composed(K.Linear(), critic), X, Y, X, lam=0.1).value
        expect = np.sign(fX.mean() - fY.mean()) * lin / np.sqrt(10.0)
        assert abs(swgan - expect) <= 1e-12 * max(1.0, abs(expect))


# 13 ----------------------------------------------------------------------------------

@pytest.mark.criterion(13)
def test_c13_counterexample_ratio_grows():
    rng = np.random.default_rng(13)
    Xmu = rng.normal(size=(100_000, 2))
    ratios = []
    for alpha in (1e-1, 1e-2, 1e-3):
        net = nets.two_unit_net(alpha)
        lip = nets.piecewise_lipschitz(net)
        grad_sq = float(np.mean((nets.jacobian(net, Xmu) ** 2).sum(axis=(1, 2))))
        ratios.append(lip**2 / grad_sq)
    assert ratios[0] < ratios[1] < ratios[2]
