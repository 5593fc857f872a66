"""Optimizers, DiracGAN vector fields and the toy generator/critic training loop.

DiracGAN: P = delta_0, Q = delta_theta, representation ``x -> psi x`` under a
unit-bandwidth Gaussian top kernel (so the effective bandwidth is 1/psi). Each
loss has a critic objective ``C(theta, psi)`` that the critic minimizes over
psi, and a generator objective ``G(theta, psi)`` that the generator minimizes
over theta. The parameter-space field is

    v = (-dG/dtheta, -dC/dpsi)

and is exported in the plotting coordinates (theta, 1/psi) with
``v_inv_psi = -v_psi / psi^2``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from . import estimators as est
from .errors import DegenerateError, InputError, NumericalError
from .kernels import Gaussian
from .nets import (CriticNet, condition_number, forward, forward_with_jacobian, param_grads,
                   random_net)

# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    params: list
    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params):
        params = [np.asarray(p, dtype=float) for p in params]
        return cls(params, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, grads, lr=1e-3, beta1=0.5, beta2=0.9, eps=1e-8) -> AdamState:
    """One bias-corrected Adam step (descent). Returns a new state."""
    if len(grads) != len(state.params):
        raise InputError("one gradient per parameter required")
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, m, v, g in zip(state.params, state.m, state.v, grads):
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(new_p, new_m, new_v, t)


class Adam:
    """In-place Adam over the parameter arrays of a net."""

    def __init__(self, net: CriticNet, lr=1e-3, beta1=0.5, beta2=0.9, eps=1e-8):
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise InputError("Adam betas must lie in (0, 1)")
        self.net = net
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.init(net.parameters())

    def step(self, grads):
        self.state.params = self.net.parameters()
        new = adam_step(self.state, grads, self.lr, self.beta1, self.beta2, self.eps)
        for p, q in zip(self.net.parameters(), new.params):
            p[...] = q
        new.params = self.net.parameters()
        self.state = new
        self.net.touch()


# --- scalar-feature gradient-constrained MMD ----------------------------------

def _gauss_profile(r, bw):
    """kappa(r) = exp(-r^2 / 2 bw^2) and its first three derivatives."""
    b2 = bw * bw
    k = np.exp(-0.5 * r * r / b2)
    k1 = -r / b2 * k
    k2 = (r * r / b2**2 - 1.0 / b2) * k
    k3 = (3.0 * r / b2**2 - r**3 / b2**3) * k
    return k, k1, k2, k3


def gcmmd2_scalar_features(uX, uY, uM, JM, lam=1.0, bw=1.0):
    """Squared GCMMD for ``k(x, y) = kappa(phi(x) - phi(y))`` with scalar ``phi``.

    Inputs are the features ``phi`` of the P, Q and mu samples and the input
    gradients ``JM`` (M, d) of ``phi`` at the mu samples. Returns ``(value,
    grads)`` with gradients of the value w.r.t. ``uX, uY, uM, JM``.
    """
    uX, uY, uM = (np.asarray(a, dtype=float).ravel() for a in (uX, uY, uM))
    JM = np.asarray(JM, dtype=float).reshape(len(uM), -1)
    n, m, M, d = len(uX), len(uY), len(uM), JM.shape[1]

    kMX = _gauss_profile(uM[:, None] - uX[None, :], bw)
    kMY = _gauss_profile(uM[:, None] - uY[None, :], bw)
    kMM = _gauss_profile(uM[:, None] - uM[None, :], bw)
    eta = kMX[0].mean(1) - kMY[0].mean(1)
    e = kMX[1].mean(1) - kMY[1].mean(1)
    v = np.concatenate([eta, (e[:, None] * JM).ravel()])

    K = kMM[0]
    G = (kMM[1][:, None, :] * JM[:, :, None]).reshape(M * d, M)    # (a,i),b: kappa'(r_ab) J_ai
    H = -(kMM[2][:, None, :, None] * JM[:, :, None, None] * JM[None, None, :, :])
    H = H.reshape(M * d, M * d)
    S = np.block([[K, G.T], [G, H]])
    S = 0.5 * (S + S.T)
    s, _ = est._cho_solve(S + M * lam * np.eye(len(v)), v, "gradient-constrained system")
    pbar = float(v @ s)

    kXX = _gauss_profile(uX[:, None] - uX[None, :], bw)
    kYY = _gauss_profile(uY[:, None] - uY[None, :], bw)
    kXY = _gauss_profile(uX[:, None] - uY[None, :], bw)
    mmd2 = kXX[0].mean() + kYY[0].mean() - 2.0 * kXY[0].mean()
    g_mmd_X = 2.0 / n**2 * kXX[1].sum(1) - 2.0 / (n * m) * kXY[1].sum(1)
    g_mmd_Y = 2.0 / m**2 * kYY[1].sum(1) + 2.0 / (n * m) * kXY[1].sum(0)

    sa, sb = s[:M], s[M:].reshape(M, d)
    B = np.einsum("mi,mi->m", sb, JM)
    # Phi = s' v at fixed s
    wX = sa[:, None] * kMX[1] + B[:, None] * kMX[2]
    wY = sa[:, None] * kMY[1] + B[:, None] * kMY[2]
    dPhi_M = wX.mean(1) - wY.mean(1)
    dPhi_X = -wX.sum(0) / n
    dPhi_Y = wY.sum(0) / m
    dPhi_J = e[:, None] * sb
    # Q = s' S s at fixed s
    T = (np.outer(sa, sa) * kMM[1] + 2.0 * B[:, None] * sa[None, :] * kMM[2]
         - np.outer(B, B) * kMM[3])
    dQ_M = T.sum(1) - T.sum(0)
    dQ_B = 2.0 * (kMM[1] @ sa) - 2.0 * (kMM[2] @ B)
    dQ_J = dQ_B[:, None] * sb

    grads = {
        "uX": (g_mmd_X - 2.0 * dPhi_X) / lam,
        "uY": (g_mmd_Y - 2.0 * dPhi_Y) / lam,
        "uM": -(2.0 * dPhi_M - dQ_M) / lam,
        "JM": -(2.0 * dPhi_J - dQ_J) / lam,
    }
    return float((mmd2 - pbar) / lam), grads


# --- DiracGAN -------------------------------------------------------------------

DIRAC_VARIANTS = ("MMD", "MMD-GP", "MMD-GP-Unif", "SN-MMD", "Sobolev-MMD",
                  "CenteredSobolev-MMD", "LipMMD", "GC-MMD", "SMMD")
_PENALIZED = ("MMD-GP", "MMD-GP-Unif", "Sobolev-MMD", "CenteredSobolev-MMD")

# fixture initial points in (theta, 1/psi): converges / wrong direction / stuck
FIXTURE_INITS = {"A": (1.0, 4.0), "B": (10.0, 0.4), "C": (20.0, 0.2)}
# (generator, critic) step sizes for the fixtures; the critic step is kept below
# the stability limit of the psi-direction, the generator step is larger
FIXTURE_STEP = (1.0, 0.1)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS
_CS_STEP = 1e-30


def _cabs(z):
    # |z| continued analytically from the real axis (for complex-step derivatives)
    return np.where(np.real(z) >= 0, z, -z)


def _mmd2(theta, psi):
    return 2.0 * (1.0 - np.exp(-0.5 * (psi * theta) ** 2))


def _witness_slope(x, theta, psi):
    """d/dx of k(0, x) - k(theta, x) under the bandwidth-1/psi Gaussian."""
    p2 = psi * psi
    return -p2 * x * np.exp(-0.5 * p2 * x * x) + p2 * (x - theta) * np.exp(-0.5 * p2 * (x - theta) ** 2)


def gc_mu_samples(n=64, scale=10.0):
    """Fixed quantile samples of N(0, scale^2)."""
    return norm.ppf((np.arange(n) + 0.5) / n) * scale


@dataclass
class DiracLoss:
    """One of the DiracGAN objectives; ``lam`` is the distance regularizer,
    ``gp_weight`` the penalty weight of the penalized variants."""

    variant: str = "SMMD"
    lam: float = 1.0
    gp_weight: float | None = None
    n_mu: int = 64
    lip_grid: int = 48

    def __post_init__(self):
        if self.variant not in DIRAC_VARIANTS:
            raise InputError(f"unknown DiracGAN loss {self.variant!r}")
        if self.lam < 0:
            raise InputError("lam must be >= 0")
        if self.variant in _PENALIZED:
            self.gp_weight = 1.0 if self.gp_weight is None else float(self.gp_weight)
        elif self.gp_weight is not None:
            raise InputError(f"{self.variant} takes no penalty weight")
        if self.variant in ("LipMMD", "GC-MMD", "SMMD") and not self.lam > 0:
            raise InputError(f"{self.variant} needs lam > 0")
        self._mu = gc_mu_samples(self.n_mu)

    # objectives ------------------------------------------------------------

    def _penalty(self, theta, psi):
        w = self.gp_weight
        if self.variant == "MMD-GP":
            return w * (_cabs(_witness_slope(0.0, theta, psi)) - 1.0) ** 2
        if self.variant == "MMD-GP-Unif":
            s = _witness_slope(_GL_NODES * theta, theta, psi)
            return w * np.sum(_GL_WEIGHTS * (_cabs(s) - 1.0) ** 2)
        sq = 0.5 * (_witness_slope(0.0, theta, psi) ** 2 + _witness_slope(theta, theta, psi) ** 2)
        if self.variant == "Sobolev-MMD":
            return w * (sq - 1.0) ** 2
        return w * sq**2

    def _lip_grid(self, theta, psi):
        lo, hi = min(0.0, theta), max(0.0, theta)
        pad = 3.0 / abs(psi)
        if hi - lo <= 2 * pad:
            return np.linspace(lo - pad, hi + pad, self.lip_grid)
        half = self.lip_grid // 2
        return np.concatenate([np.linspace(lo - pad, lo + pad, half),
                               np.linspace(hi - pad, hi + pad, self.lip_grid - half)])

    def _lip(self, theta, psi, grads=False):
        Z = self._lip_grid(theta, psi)
        X, Y = np.zeros(1), np.array([theta])
        val, _, st = est.lipmmd(est.scaled_gaussian(psi), X, Y, Z, self.lam, return_state=True)
        if not grads:
            return val

        def resolve(t, p):
            return est.lipmmd(est.scaled_gaussian(p), X, np.array([t]), Z, self.lam)[0]

        try:
            gp = est.lipmmd_grad(st, lambda e: (est.scaled_gaussian(psi + e), X, Y))
            gt = est.lipmmd_grad(st, lambda e: (est.scaled_gaussian(psi), X, Y + e))
        except DegenerateError:
            h = 1e-6 * max(1.0, abs(psi))
            gp = (resolve(theta, psi + h) - resolve(theta, psi - h)) / (2 * h)
            h = 1e-6 * max(1.0, abs(theta))
            gt = (resolve(theta + h, psi) - resolve(theta - h, psi)) / (2 * h)
        return val, gt, gp

    def _gc(self, theta, psi, grads=False):
        mu = self._mu
        val, g = gcmmd2_scalar_features([0.0], [psi * theta], psi * mu,
                                        np.full((len(mu), 1), psi), self.lam)
        if not grads:
            return val
        d_theta = g["uY"][0] * psi
        d_psi = g["uY"][0] * theta + g["uM"] @ mu + g["JM"].sum()
        return val, d_theta, d_psi

    def generator_loss(self, theta, psi):
        v = self.variant
        if v == "SN-MMD":
            return 2.0 * _mmd2(theta, 1.0)
        if v == "SMMD":
            return est.dirac_smmd2(psi, theta, self.lam)
        if v == "LipMMD":
            return self._lip(theta, psi) ** 2
        if v == "GC-MMD":
            return self._gc(theta, psi)
        return _mmd2(theta, psi)

    def critic_loss(self, theta, psi):
        v = self.variant
        if v in _PENALIZED:
            return float(np.real(-_mmd2(theta, psi) + self._penalty(theta, psi)))
        return -self.generator_loss(theta, psi)

    def gradients(self, theta, psi):
        """``(dG/dtheta, dC/dpsi)`` at one parameter point."""
        v = self.variant
        e = np.exp(-0.5 * (psi * theta) ** 2)
        dm_theta = 2.0 * psi**2 * theta * e
        dm_psi = 2.0 * psi * theta**2 * e
        if v == "MMD":
            return dm_theta, -dm_psi
        if v == "SN-MMD":
            return 4.0 * theta * np.exp(-0.5 * theta**2), 0.0
        if v == "SMMD":
            D = self.lam + 1.0 + psi**2
            m = _mmd2(theta, psi)
            return dm_theta / D, -(dm_psi / D - 2.0 * psi * m / D**2)
        if v in _PENALIZED:
            z = complex(psi, _CS_STEP)
            dpen = np.imag(self._penalty(theta, z)) / _CS_STEP
            return dm_theta, -dm_psi + float(dpen)
        if v == "LipMMD":
            val, gt, gp = self._lip(theta, psi, grads=True)
            return 2.0 * val * gt, -2.0 * val * gp
        val, gt, gp = self._gc(theta, psi, grads=True)
        return gt, -gp

    def field(self, theta, psi):
        """Raw field ``(v_theta, v_psi)``."""
        g_theta, c_psi = self.gradients(theta, psi)
        return 0.0 - float(g_theta), 0.0 - float(c_psi)


@dataclass
class VectorFieldGrid:
    thetas: np.ndarray
    inv_psis: np.ndarray
    v_theta: np.ndarray          # (n_inv_psi, n_theta)
    v_inv_psi: np.ndarray
    gen_loss: np.ndarray
    critic_loss: np.ndarray
    singular: np.ndarray
    variant: str = ""

    COLUMNS = ("theta", "inv_psi", "v_theta", "v_inv_psi", "u_theta", "u_inv_psi",
               "gen_loss", "critic_loss", "singular")

    def normalized(self):
        nrm = np.hypot(self.v_theta, self.v_inv_psi)
        safe = np.where(nrm > 0, nrm, 1.0)
        return self.v_theta / safe, self.v_inv_psi / safe

    def rows(self):
        ut, ui = self.normalized()
        for a, ip in enumerate(self.inv_psis):
            for b, th in enumerate(self.thetas):
                yield (th, ip, self.v_theta[a, b], self.v_inv_psi[a, b], ut[a, b], ui[a, b],
                       self.gen_loss[a, b], self.critic_loss[a, b], int(self.singular[a, b]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([repr(float(x)) if isinstance(x, float) or isinstance(x, np.floating)
                        else x for x in row])
        return buf.getvalue()


def log_grid(lo=0.25, hi=20.0, n=40):
    return np.geomspace(lo, hi, n)


def dirac_field(loss: DiracLoss, thetas=None, inv_psis=None) -> VectorFieldGrid:
    """Field over a (theta, 1/psi) grid; default 40 x 40 log-spaced on [0.25, 20]^2."""
    thetas = log_grid() if thetas is None else np.asarray(thetas, dtype=float)
    inv_psis = log_grid() if inv_psis is None else np.asarray(inv_psis, dtype=float)
    if np.any(inv_psis <= 0):
        raise InputError("1/psi grid must be positive")
    shape = (len(inv_psis), len(thetas))
    vt, vi, gl, cl = (np.zeros(shape) for _ in range(4))
    sing = np.zeros(shape, dtype=bool)
    for a, ip in enumerate(inv_psis):
        psi = 1.0 / ip
        for b, th in enumerate(thetas):
            v_theta, v_psi = loss.field(th, psi)
            vt[a, b] = v_theta
            vi[a, b] = -v_psi / psi**2
            gl[a, b] = loss.generator_loss(th, psi)
            cl[a, b] = loss.critic_loss(th, psi)
            sing[a, b] = not (np.isfinite(vt[a, b]) and np.isfinite(vi[a, b])) \
                or (vt[a, b] == 0.0 and vi[a, b] == 0.0)
    return VectorFieldGrid(thetas, inv_psis, vt, vi, gl, cl, sing, loss.variant)


@dataclass
class Trajectory:
    theta: np.ndarray
    psi: np.ndarray
    diverged: bool = False

    @property
    def inv_psi(self):
        return 1.0 / self.psi

    def to_csv(self) -> str:
        lines = ["step,theta,psi,inv_psi"]
        for i, (t, p) in enumerate(zip(self.theta, self.psi)):
            lines.append(f"{i},{t!r},{p!r},{1.0 / p!r}")
        return "\n".join(lines) + "\n"


def simulate(loss: DiracLoss, init, steps=10_000, step_size=0.1) -> Trajectory:
    """Simultaneous gradient steps ``(theta, psi) += step_size * v`` from ``init = (theta, psi)``.

    ``step_size`` is a scalar or a ``(generator, critic)`` pair.
    """
    eta_t, eta_p = np.broadcast_to(np.asarray(step_size, dtype=float), (2,))
    theta, psi = float(init[0]), float(init[1])
    if psi == 0:
        raise InputError("psi must be nonzero")
    th = np.empty(steps + 1)
    ps = np.empty(steps + 1)
    th[0], ps[0] = theta, psi
    for i in range(1, steps + 1):
        v_theta, v_psi = loss.field(theta, psi)
        theta += eta_t * v_theta
        psi += eta_p * v_psi
        th[i], ps[i] = theta, psi
        if not np.isfinite(theta) or abs(theta) > 1e6:
            return Trajectory(th[:i + 1], ps[:i + 1], True)
    return Trajectory(th, ps, False)


def simulate_fixture(loss: DiracLoss, name: str, steps=10_000, step_size=FIXTURE_STEP) -> Trajectory:
    theta, inv_psi = FIXTURE_INITS[name]
    return simulate(loss, (theta, 1.0 / inv_psi), steps, step_size)


# --- toy training -------------------------------------------------------------------

TRAIN_LOSSES = ("SMMD", "SWGAN", "MMD-GP", "GCMMD")


@dataclass
class TrainConfig:
    loss: str = "SMMD"
    gen_widths: tuple = (2, 64, 64, 2)
    critic_widths: tuple = (2, 64, 64, 1)
    spectral: bool = False
    leak: float = 0.2
    bandwidth: float = 1.0       # Gaussian top kernel on critic features
    lam: float = 1.0             # GCMMD regularizer
    scale: float = 10.0          # weight of the gradient term in the SMMD / SWGAN denominators
    gp_weight: float = 1.0
    critic_steps: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    gen_steps: int = 5000
    log_every: int = 100
    snapshot_every: int = 0

    def __post_init__(self):
        if self.loss not in TRAIN_LOSSES:
            raise InputError(f"loss must be one of {TRAIN_LOSSES}")
        if min(self.critic_steps, self.batch_size) < 1 or self.gen_steps < 0:
            raise InputError("sizes must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InputError("betas must lie in (0, 1)")
        if self.lr <= 0 or self.scale < 0 or self.bandwidth <= 0:
            raise InputError("lr, bandwidth must be positive and scale non-negative")
        if self.loss in ("SWGAN", "GCMMD") and self.critic_widths[-1] != 1:
            raise InputError(f"{self.loss} training uses a scalar critic")
        if self.gen_widths[-1] != self.critic_widths[0]:
            raise InputError("generator output width must match critic input width")
        if self.seed < 0 or self.seed >= 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")
        self.gen_widths = tuple(int(w) for w in self.gen_widths)
        self.critic_widths = tuple(int(w) for w in self.critic_widths)

    def to_dict(self):
        return asdict(self)


def four_gaussians(rng, n, std=0.05):
    centers = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    return centers[rng.integers(0, 4, size=n)] + std * rng.standard_normal((n, 2))


def uniform_latent(rng, n, dim=2):
    return rng.uniform(-1.0, 1.0, size=(n, dim))


def _mmd2u_feature_grads(top, FX, FY):
    """Unbiased MMD^2 on features and its gradients w.r.t. each feature row."""
    n, m = len(FX), len(FY)
    Kxx, Dxx, _ = top.derivs(FX, FX)
    Kyy, Dyy, _ = top.derivs(FY, FY)
    Kxy, Dxy, _ = top.derivs(FX, FY)
    _, Dyx, _ = top.derivs(FY, FX)
    ix, iy = np.arange(n), np.arange(m)
    Dxx[ix, ix] = 0.0
    Dyy[iy, iy] = 0.0
    val = ((Kxx.sum() - np.trace(Kxx)) / (n * (n - 1)) + (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
           - 2.0 * Kxy.mean())
    gX = 2.0 / (n * (n - 1)) * Dxx.sum(1) - 2.0 / (n * m) * Dxy.sum(1)
    gY = 2.0 / (m * (m - 1)) * Dyy.sum(1) - 2.0 / (n * m) * Dyx.sum(1)
    return float(val), gX, gY


def smmd_loss(top, FX, FY, JX, scale=10.0):
    """``MMD_u^2 / (1 + scale E_P ||J||_F^2)`` with gradients (features and Jacobians)."""
    n = len(FX)
    mmd2, gX, gY = _mmd2u_feature_grads(top, FX, FY)
    gsq = float(np.sum(JX * JX) / n)
    den = 1.0 + scale * gsq
    grads = {"FX": gX / den, "FY": gY / den, "JX": -mmd2 * scale / den**2 * 2.0 * JX / n}
    return mmd2 / den, grads, {"mmd2": mmd2, "grad_sq": gsq, "scale_factor": den**-0.5}


def swgan_loss(fX, fY, JX, scale=10.0):
    """``(E_P f - E_Q f) / sqrt(1 + scale (E_P f^2 + E_P ||grad f||^2))`` for scalar f."""
    fX, fY = np.ravel(fX), np.ravel(fY)
    n, m = len(fX), len(fY)
    delta = fX.mean() - fY.mean()
    sq = float(np.mean(fX**2))
    gsq = float(np.sum(JX * JX) / n)
    den = np.sqrt(1.0 + scale * (sq + gsq))
    val = delta / den
    dden = scale / (2.0 * den)          # d den / d(sq + gsq)
    grads = {
        "FX": (np.full(n, 1.0 / n) / den - delta / den**2 * dden * 2.0 * fX / n)[:, None],
        "FY": np.full((m, 1), -1.0 / (m * den)),
        "JX": -delta / den**2 * dden * 2.0 * JX / n,
    }
    return float(val), grads, {"mmd2": float(delta**2), "grad_sq": gsq, "scale_factor": 1.0 / den}


def mmd_gp_objective(top, FX, FY, FT, JT, gp_weight=1.0):
    """``MMD_u^2 - gp E_t (||grad eta(t)|| - 1)^2`` for a Gaussian top kernel.

    ``t`` are interpolates between P and Q samples; ``eta`` is the
    unnormalized witness on the composed kernel.
    """
    mmd2, gX, gY = _mmd2u_feature_grads(top, FX, FY)
    n, m, N = len(FX), len(FY), len(FT)
    _, Dxt, D2xt = top.derivs(FX, FT)
    _, Dyt, D2yt = top.derivs(FY, FT)
    # d/db K(a, b) = -D1 for a radial top
    a = -(Dxt.mean(0) - Dyt.mean(0))                      # (N, s)
    g = np.einsum("tsd,ts->td", JT, a)                    # grad_t eta
    nrm = np.linalg.norm(g, axis=1)
    pen = float(np.mean((nrm - 1.0) ** 2))
    dg = 2.0 * ((nrm - 1.0) / np.where(nrm > 0, nrm, 1.0))[:, None] * g / N
    dJT = np.einsum("ts,td->tsd", a, dg)
    c = np.einsum("tsd,td->ts", JT, dg)                   # dpen / da_t
    dFX = np.einsum("xtij,tj->xi", D2xt, c) / n
    dFY = -np.einsum("ytij,tj->yi", D2yt, c) / m
    dFT = -np.einsum("xtij,tj->ti", D2xt, c) / n + np.einsum("ytij,tj->ti", D2yt, c) / m
    w = gp_weight
    val = mmd2 - w * pen
    grads = {"FX": gX - w * dFX, "FY": gY - w * dFY, "FT": -w * dFT, "JT": -w * dJT}
    return val, grads, {"mmd2": mmd2, "penalty": pen}


@dataclass
class History:
    config: dict
    gen_loss: list = field(default_factory=list)
    critic_loss: list = field(default_factory=list)
    grad_sq: list = field(default_factory=list)
    scale_factor: list = field(default_factory=list)
    conditions: list = field(default_factory=list)    # (step, [cond per layer])
    snapshots: dict = field(default_factory=dict)     # step -> {"generator": ..., "critic": ...}
    generator: CriticNet | None = None
    critic: CriticNet | None = None

    STEP_COLUMNS = ("step", "gen_loss", "critic_loss", "grad_sq", "scale_factor")

    def steps_csv(self) -> str:
        lines = [",".join(self.STEP_COLUMNS)]
        for i, row in enumerate(zip(self.gen_loss, self.critic_loss, self.grad_sq, self.scale_factor)):
            lines.append(",".join([str(i + 1)] + [repr(float(x)) for x in row]))
        return "\n".join(lines) + "\n"

    def conditions_csv(self) -> str:
        lines = ["step,layer,condition_number"]
        for step, conds in self.conditions:
            for l, c in enumerate(conds):
                lines.append(f"{step},{l + 1},{float(c)!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "gen_loss": self.gen_loss, "critic_loss": self.critic_loss,
            "grad_sq": self.grad_sq, "scale_factor": self.scale_factor,
            "conditions": [{"step": s, "condition_numbers": c} for s, c in self.conditions],
        }, indent=1)


def rng_streams(seed, names=("init", "data", "mu", "eval")):
    """Independent generators spawned from one seed, one per consumer."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _critic_objective(cfg, critic, X, Y, rng):
    """Objective the critic maximizes, plus parameter gradients and input gradients on Y.

    Returns ``(value, param_grads_list, dY, info)``.
    """
    top = Gaussian(cfg.bandwidth)
    FX, JX, cX = forward_with_jacobian(critic, X)
    FY, cY = forward(critic, Y)
    if cfg.loss == "SMMD":
        val, g, info = smmd_loss(top, FX, FY, JX, cfg.scale)
        gx = param_grads(critic, cX, g["FX"], g["JX"])
        gy = param_grads(critic, cY, g["FY"])
        grads = [a + b for a, b in zip(gx.as_list(), gy.as_list())]
        return val, grads, gy.inputs, info
    if cfg.loss == "SWGAN":
        val, g, info = swgan_loss(FX, FY, JX, cfg.scale)
        gx = param_grads(critic, cX, g["FX"], g["JX"])
        gy = param_grads(critic, cY, g["FY"])
        grads = [a + b for a, b in zip(gx.as_list(), gy.as_list())]
        return val, grads, gy.inputs, info
    if cfg.loss == "MMD-GP":
        if len(X) != len(Y):
            raise InputError("MMD-GP interpolates P and Q samples pairwise: batch sizes must match")
        u = rng.uniform(size=(len(X), 1))
        T = u * X + (1 - u) * Y
        FT, JT, cT = forward_with_jacobian(critic, T)
        val, g, info = mmd_gp_objective(top, FX, FY, FT, JT, cfg.gp_weight)
        info["grad_sq"] = float(np.sum(JX * JX) / len(X))
        info["scale_factor"] = float("nan")
        gx = param_grads(critic, cX, g["FX"])
        gy = param_grads(critic, cY, g["FY"])
        gt = param_grads(critic, cT, g["FT"], g["JT"])
        grads = [a + b + c for a, b, c in zip(gx.as_list(), gy.as_list(), gt.as_list())]
        # the generator minimizes the distance only
        _, gY_only, _ = _mmd2u_feature_grads(top, FX, FY)
        dY = param_grads(critic, cY, gY_only).inputs
        return val, grads, dY, info
    # GCMMD with mu = P
    val, g = gcmmd2_scalar_features(FX, FY, FX, JX[:, 0, :], cfg.lam, cfg.bandwidth)
    gx = param_grads(critic, cX, (g["uX"] + g["uM"])[:, None], g["JM"][:, None, :])
    gy = param_grads(critic, cY, g["uY"][:, None])
    grads = [a + b for a, b in zip(gx.as_list(), gy.as_list())]
    info = {"mmd2": float("nan"), "grad_sq": float(np.sum(JX * JX) / len(X)),
            "scale_factor": float("nan")}
    return val, grads, gy.inputs, info


def _check_finite(value, step, what):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what} at generator step {step}",
                             {"step": step, "what": what, "value": repr(value)})


def train_toy(config: TrainConfig, target_sampler=four_gaussians, latent_sampler=uniform_latent,
              generator: CriticNet | None = None, critic: CriticNet | None = None) -> History:
    """Alternating training: ``critic_steps`` critic ascents per generator descent.

    ``target_sampler(rng, n)`` draws real data and ``latent_sampler(rng, n)``
    generator inputs. Deterministic given ``config.seed``.
    """
    cfg = config
    streams = rng_streams(cfg.seed)
    init, data = streams["init"], streams["data"]
    if generator is None:
        generator = random_net(list(cfg.gen_widths), init, cfg.leak, bias_scale=0.0)
    if critic is None:
        critic = random_net(list(cfg.critic_widths), init, cfg.leak, bias_scale=0.0,
                            spectral=cfg.spectral)
    opt_g = Adam(generator, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_c = Adam(critic, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    hist = History(cfg.to_dict())
    B = cfg.batch_size
    hist.conditions.append((0, [condition_number(W) for W in critic.effective_weights()]))

    for step in range(1, cfg.gen_steps + 1):
        for _ in range(cfg.critic_steps):
            X = target_sampler(data, B)
            Y = generator(latent_sampler(data, B))
            cval, grads, _, info = _critic_objective(cfg, critic, X, Y, data)
            _check_finite(cval, step, "critic loss")
            opt_c.step([-g for g in grads])
        X = target_sampler(data, B)
        Zl = latent_sampler(data, B)
        Y, cG = forward(generator, Zl)
        gval, _, dY, info = _critic_objective(cfg, critic, X, Y, data)
        _check_finite(gval, step, "generator loss")
        gg = param_grads(generator, cG, dY)
        opt_g.step(gg.as_list())
        hist.gen_loss.append(float(gval))
        hist.critic_loss.append(float(cval))
        hist.grad_sq.append(float(info["grad_sq"]))
        hist.scale_factor.append(float(info["scale_factor"]))
        if cfg.log_every and step % cfg.log_every == 0:
            hist.conditions.append((step, [condition_number(W) for W in critic.effective_weights()]))
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            hist.snapshots[step] = {"generator": generator.to_dict(), "critic": critic.to_dict()}
    hist.generator, hist.critic = generator, critic
    return hist


def evaluate_generator(generator: CriticNet, target_sampler=four_gaussians,
                       latent_sampler=uniform_latent, n=512, bandwidth=0.5, seed=12345,
                       rng=None) -> float:
    """Held-out unbiased MMD^2 (Gaussian kernel) between fresh target and model samples.

    Samples come from ``rng`` when given (e.g. the ``eval`` stream), else from ``seed``.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    X = target_sampler(rng, n)
    Y = generator(latent_sampler(rng, n))
    return est.mmd2_unbiased(Gaussian(bandwidth), X, Y)


__all__ = [
    "Adam", "AdamState", "adam_step", "DiracLoss", "DIRAC_VARIANTS", "FIXTURE_INITS", "FIXTURE_STEP",
    "VectorFieldGrid", "dirac_field", "simulate", "simulate_fixture", "Trajectory",
    "TrainConfig", "History", "train_toy", "evaluate_generator", "smmd_loss", "swgan_loss",
    "mmd_gp_objective", "gcmmd2_scalar_features", "four_gaussians", "uniform_latent",
    "rng_streams",
]
