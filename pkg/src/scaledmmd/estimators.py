"""Kernel discrepancy estimators: MMD, scaled MMD, gradient-constrained MMD
(full solve and low rank) and Lipschitz MMD, with their witness functions.

Conventions:

* ``X`` holds samples of P, ``Y`` samples of Q, ``Xmu`` samples of the
  reference measure mu. When ``Xmu`` is omitted it is the P sample.
* ``eta(t) = mean_x k(x, t) - mean_y k(y, t)`` is the unnormalized MMD witness,
  so the biased MMD^2 is ``||eta||^2`` in the RKHS.
* For the gradient-constrained distance the support ``Xmu`` has ``M`` points
  in ``R^d``; coefficient vectors are laid out as ``[alpha (M); beta (M d)]``
  with ``beta`` indexed ``m * d + i``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import _backend
from .convex import Qcqp, solve as solve_qcqp
from .errors import DegenerateError, InputError, NumericalError
from .kernels import Composed, Gaussian, Kernel, _batch, gram_bundle, trace_terms
from .nets import scaling_net

JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
DUAL_TOL = 1e-8
EIG_FLOOR = 1e-12


class LowRankTruncationWarning(UserWarning):
    """The incomplete Cholesky hit its rank cap above the residual tolerance."""


@dataclass
class DiscrepancyEstimate:
    value: float
    squared: bool = False
    method: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "value": self.value, "squared": self.squared,
                "diagnostics": _plain(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _pair(k, X, Y):
    X, Y = _batch(X), _batch(Y)
    if X.shape[1] != Y.shape[1]:
        raise InputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def _cho_solve(A, b, what="linear system"):
    """Cholesky solve with diagonal jitter escalation. Returns ``(x, jitter)``."""
    scale = max(float(np.mean(np.diag(A))), 1e-300)
    tried = [0.0] + list(JITTERS)
    for eps in tried:
        try:
            fac = cho_factor(A + eps * scale * np.eye(A.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            continue
        x = cho_solve(fac, b)
        if np.all(np.isfinite(x)):
            return x, eps
    raise NumericalError(f"{what} is not positive definite after jitter escalation",
                         {"size": A.shape[0], "max_jitter": JITTERS[-1], "diag_mean": scale})


# --- plain MMD ------------------------------------------------------------

def mmd2_unbiased(k: Kernel, X, Y) -> float:
    X, Y = _pair(k, X, Y)
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise InputError("the unbiased estimator needs at least two samples per side")
    Kxx, Kyy, Kxy = k.gram(X, X), k.gram(Y, Y), k.gram(X, Y)
    a = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
    b = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    return float(a + b - 2.0 * Kxy.mean())


def mmd2_biased(k: Kernel, X, Y) -> float:
    X, Y = _pair(k, X, Y)
    if len(X) < 1 or len(Y) < 1:
        raise InputError("empty sample")
    val = k.gram(X, X).mean() + k.gram(Y, Y).mean() - 2.0 * k.gram(X, Y).mean()
    return float(max(val, 0.0))


def mmd2_block(k: Kernel, X, Y, n_blocks: int) -> float:
    """Mean of unbiased estimates over contiguous equal-size blocks."""
    X, Y = _pair(k, X, Y)
    if n_blocks < 1 or len(X) % n_blocks or len(Y) % n_blocks:
        raise InputError(f"sample sizes {len(X)}, {len(Y)} do not split into {n_blocks} blocks")
    bx, by = len(X) // n_blocks, len(Y) // n_blocks
    if bx < 2 or by < 2:
        raise InputError("each block needs at least two samples per side")
    vals = [mmd2_unbiased(k, X[i * bx:(i + 1) * bx], Y[i * by:(i + 1) * by])
            for i in range(n_blocks)]
    return float(np.mean(vals))


# --- witnesses ------------------------------------------------------------

def _eta_at(k, X, Y, T):
    return k.gram(T, X).mean(axis=1) - k.gram(T, Y).mean(axis=1)


def _eta_with_grad(k, X, Y, T):
    """eta(T) and its gradient ``(n_T, d)`` (derivative in the first slot)."""
    Kx, Dx, _ = k.derivs(T, X)
    Ky, Dy, _ = k.derivs(T, Y)
    return Kx.mean(1) - Ky.mean(1), Dx.mean(1) - Dy.mean(1)


@dataclass
class WitnessVector:
    """Witness function of an MMD-type distance.

    ``kind == "mmd"``: ``g = eta``.
    ``kind == "gcmmd"``: ``g = eta / lam - (1 / (lam M)) sum_m [alpha_m k(S_m, .)
    + sum_i beta_{m,i} d_i k(S_m, .)]`` with ``S`` the support points.
    """

    kernel: Kernel
    X: np.ndarray
    Y: np.ndarray
    support: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lam: float = 1.0
    kind: str = "gcmmd"

    def __call__(self, T):
        T = _batch(T)
        eta = _eta_at(self.kernel, self.X, self.Y, T)
        if self.kind == "mmd":
            return eta
        M, d = self.support.shape
        K, D1, _ = self.kernel.derivs(self.support, T)
        corr = self.alpha @ K + np.einsum("mi,mti->t", self.beta.reshape(M, d), D1)
        return eta / self.lam - corr / (self.lam * M)

    def gradient(self, T):
        """Gradient of the witness at each row of ``T``: shape ``(n_T, d)``."""
        T = _batch(T)
        _, geta = _eta_with_grad(self.kernel, self.X, self.Y, T)
        if self.kind == "mmd":
            return geta
        M, d = self.support.shape
        _, D1t, _ = self.kernel.derivs(T, self.support)      # d/dt k(t, S_m)
        _, _, D2 = self.kernel.derivs(self.support, T)       # d_i d_{j+d} k(S_m, t)
        corr = np.einsum("m,tmj->tj", self.alpha, D1t)
        corr += np.einsum("mi,mtij->tj", self.beta.reshape(M, d), D2)
        return geta / self.lam - corr / (self.lam * M)


def mmd_witness(k: Kernel, X, Y) -> WitnessVector:
    X, Y = _pair(k, X, Y)
    d = X.shape[1]
    return WitnessVector(k, X, Y, np.zeros((0, d)), np.zeros(0), np.zeros(0), 1.0, "mmd")


# --- scaled MMD -----------------------------------------------------------

def smmd_sigma(k: Kernel, Xmu, lam: float):
    kxx, tr = trace_terms(k, Xmu)
    return 1.0 / np.sqrt(lam + kxx + tr), kxx, tr


def smmd(k: Kernel, X, Y, Xmu=None, lam: float = 1.0, estimator: str = "biased") -> DiscrepancyEstimate:
    """sigma * MMD with ``sigma = (lam + E_mu k(x,x) + E_mu trace grad_xy k(x,x))^(-1/2)``."""
    if not lam > 0:
        raise InputError("lam must be positive")
    X, Y = _pair(k, X, Y)
    Xmu = X if Xmu is None else _batch(Xmu)
    sigma, kxx, tr = smmd_sigma(k, Xmu, lam)
    mmd2 = mmd2_unbiased(k, X, Y) if estimator == "unbiased" else mmd2_biased(k, X, Y)
    value = sigma * np.sqrt(max(mmd2, 0.0))
    return DiscrepancyEstimate(float(value), False, "smmd",
                               {"mmd2": mmd2, "sigma": float(sigma), "mean_kxx": kxx,
                                "mean_grad_trace": tr, "lam": lam})


# --- gradient-constrained MMD -----------------------------------------------

def _gc_system(k, X, Y, Xmu):
    X, Y = _pair(k, X, Y)
    Xmu = X if Xmu is None else _batch(Xmu)
    if len(Xmu) < 1:
        raise InputError("need at least one mu sample")
    eta, geta = _eta_with_grad(k, X, Y, Xmu)
    v = np.concatenate([eta, geta.ravel()])
    S = gram_bundle(k, Xmu).stacked()
    return X, Y, Xmu, v, S


def gcmmd2(k: Kernel, X, Y, Xmu=None, lam: float = 1.0, return_info: bool = False):
    """Squared gradient-constrained MMD by the finite linear system on ``Xmu``.

    Returns ``(value, witness)``; with ``return_info`` also a diagnostics dict.
    """
    if not lam > 0:
        raise InputError("lam must be positive")
    X, Y, Xmu, v, S = _gc_system(k, X, Y, Xmu)
    M = len(Xmu)
    sol, jitter = _cho_solve(S + M * lam * np.eye(len(v)), v, "gradient-constrained system")
    pbar = float(v @ sol)
    mmd2 = mmd2_biased(k, X, Y)
    value = (mmd2 - pbar) / lam
    coef = M * sol
    witness = WitnessVector(k, X, Y, Xmu, coef[:M], coef[M:], lam, "gcmmd")
    if not return_info:
        return float(value), witness
    info = {"mmd2": mmd2, "penalty_bar_P": pbar, "jitter": jitter, "lam": lam,
            "cholesky_rank": len(v)}
    return float(value), witness, info


def gcmmd2_lowrank(k: Kernel, X, Y, Xmu=None, lam: float = 1.0, chol_tol=None,
                   max_rank=None, return_info: bool = False):
    """Low-rank variant: pivoted incomplete Cholesky ``S ~ R'R`` plus Woodbury.

    ``chol_tol`` bounds the trace of the residual ``S - R'R`` (default
    ``1e-12 * trace S``). Returns ``(value, rank)``.
    """
    if not lam > 0:
        raise InputError("lam must be positive")
    X, Y, Xmu, v, S = _gc_system(k, X, Y, Xmu)
    M, N = len(Xmu), len(v)
    tol = 1e-12 * np.trace(S) if chol_tol is None else float(chol_tol)
    cap = N if max_rank is None else int(max_rank)
    if np.isinf(tol):
        R, residual = np.zeros((0, N)), float(np.trace(S))
    else:
        R, _, residual = _backend.pivoted_cholesky(S, tol, cap)
    r = R.shape[0]
    truncated = residual > tol
    if truncated:
        warnings.warn(f"incomplete Cholesky stopped at rank {r} with residual {residual:.3g}",
                      LowRankTruncationWarning, stacklevel=2)
    Ml = M * lam
    Rv = R @ v
    if r:
        inner, _ = _cho_solve(R @ R.T + Ml * np.eye(r), Rv, "Woodbury core")
        pbar = float((v @ v - Rv @ inner) / Ml)
    else:
        pbar = float(v @ v / Ml)
    mmd2 = mmd2_biased(k, X, Y)
    value = float((mmd2 - pbar) / lam)
    if not return_info:
        return value, r
    return value, r, {"mmd2": mmd2, "penalty_bar_P": pbar, "cholesky_rank": r,
                      "residual_trace": residual, "truncated": bool(truncated), "lam": lam}


def gcmmd2_linear_oracle(X, Y, Xmu=None, lam: float = 1.0) -> float:
    """Explicit-feature value for the linear kernel: ``w'(E_mu[xx'] + (1 + lam) I)^(-1) w``."""
    X, Y = _batch(X), _batch(Y)
    Xmu = X if Xmu is None else _batch(Xmu)
    w = X.mean(0) - Y.mean(0)
    C = Xmu.T @ Xmu / len(Xmu)
    return float(w @ np.linalg.solve(C + (1.0 + lam) * np.eye(len(w)), w))


# --- Lipschitz MMD ------------------------------------------------------------

@dataclass
class LipState:
    """Solved grid problem, kept for differentiation."""

    kernel: Kernel
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    lam: float
    value: float
    delta: np.ndarray
    duals: np.ndarray
    slacks: np.ndarray
    weights: np.ndarray
    iters: int
    kkt: dict


def default_grid(X, Y, size=None, inflate=0.2):
    """Uniform grid over the bounding box of ``X u Y`` widened by ``inflate``.

    Default size: 64 points in 1D, 256 (16 x 16) in 2D, 4^d above.
    """
    W = np.vstack([_batch(X), _batch(Y)])
    d = W.shape[1]
    lo, hi = W.min(0), W.max(0)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    lo, hi = lo - 0.5 * inflate * span, hi + 0.5 * inflate * span
    if size is None:
        per_axis = {1: 64, 2: 16}.get(d, 4)
    else:
        per_axis = max(1, int(round(size ** (1.0 / d))))
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)


def lip_basis_gram(k: Kernel, W, Z):
    """Gram matrix of ``{k(W_a, .)} u {d_i k(Z_j, .)}``.

    Blocks: ``K = k(W, W)``, ``B[(j,i), a] = d_i k(Z_j, W_a)``, ``H`` the mixed
    derivatives on Z. Rows ``nW + j d .. nW + j d + d`` give ``grad f(Z_j)``.
    """
    nW, (nZ, d) = len(W), Z.shape
    K = k.gram(W, W)
    _, D1, _ = k.derivs(Z, W)
    B = D1.transpose(0, 2, 1).reshape(nZ * d, nW)
    H = gram_bundle(k, Z).H
    A = np.block([[K, B.T], [B, H]])
    return 0.5 * (A + A.T)


def lipmmd(k: Kernel, X, Y, Z=None, lam: float = 1.0, tol: float = 1e-9,
           return_state: bool = False):
    """Grid estimate of the Lipschitz-constrained MMD.

    Maximizes ``mean f(X) - mean f(Y)`` over ``f`` in the span of the basis with
    ``||grad f(Z_j)||^2 + lam ||f||_H^2 <= 1`` for every grid point. Returns
    ``(value, duals)``; with ``return_state`` also the solved ``LipState``.
    """
    if not lam > 0:
        raise InputError("lam must be positive")
    X, Y = _pair(k, X, Y)
    Z = default_grid(X, Y) if Z is None else _batch(Z)
    if len(Z) < 1:
        raise InputError("need at least one constraint point")
    if Z.shape[1] != X.shape[1]:
        raise InputError("grid dimension does not match the data")
    n, m, d = len(X), len(Y), X.shape[1]
    W = np.vstack([X, Y])
    nW = len(W)
    c = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m), np.zeros(len(Z) * d)])
    A = lip_basis_gram(k, W, Z)

    # reduced coordinates z = Phi' delta with A = Phi Phi'
    lam_A, U = np.linalg.eigh(A)
    keep = lam_A > EIG_FLOOR * max(lam_A[-1], 1e-300)
    U, s = U[:, keep], np.sqrt(lam_A[keep])
    Phi = U * s
    q = Phi.T @ c
    Ps = []
    for j in range(len(Z)):
        Lj = Phi[nW + j * d: nW + (j + 1) * d]
        Ps.append(Lj.T @ Lj + lam * np.eye(len(s)))
    try:
        res = solve_qcqp(Qcqp(q, Ps), tol=tol)
    except NumericalError as exc:
        exc.diagnostics.setdefault("stage", "lipmmd qcqp")
        raise
    delta = U @ (res.x / s)
    slacks = np.array([1.0 - res.x @ P @ res.x for P in Ps])
    value = float(res.value)
    if not return_state:
        return value, res.duals
    state = LipState(k, X, Y, Z, lam, value, delta, res.duals, slacks, c, res.iters, res.kkt)
    return value, res.duals, state


def lipmmd_grad(state: LipState, perturb, h: float = 1e-6, dual_tol: float = DUAL_TOL) -> float:
    """Derivative of the solved estimate along a one-parameter perturbation.

    ``perturb(eps)`` returns ``(kernel, X, Y)`` at parameter offset ``eps`` (the
    grid is held fixed). By the envelope theorem only the problem data move:

        d value = c' dA delta - sum_j mu_j delta' dP_j delta,
        dP_j = dL_j' L_j + L_j' dL_j + lam dA,

    with ``dA`` the derivative of the basis Gram matrix (central difference of
    the assembly; no re-solve). Refuses when an active constraint has a
    vanishing dual.
    """
    active = state.slacks < 1e-5
    weak = active & (state.duals <= dual_tol)
    if np.any(weak):
        raise DegenerateError("degenerate duals at the solution; the estimate is not differentiable",
                              {"indices": np.flatnonzero(weak).tolist(),
                               "duals": state.duals[weak].tolist()})

    def assemble(eps):
        k, X, Y = perturb(eps)
        X, Y = _pair(k, X, Y)
        return lip_basis_gram(k, np.vstack([X, Y]), state.Z)

    A = assemble(0.0)
    dA = (assemble(h) - assemble(-h)) / (2.0 * h)
    nW = len(state.X) + len(state.Y)
    d = state.Z.shape[1]
    delta, c, lam = state.delta, state.weights, state.lam
    Ad, dAd = A @ delta, dA @ delta
    grad = float(c @ dAd)
    for j, mu in enumerate(state.duals):
        if mu == 0.0:
            continue
        rows = slice(nW + j * d, nW + (j + 1) * d)
        dquad = 2.0 * Ad[rows] @ dAd[rows] + lam * delta @ dAd
        grad -= mu * dquad
    return grad


# --- exact references ---------------------------------------------------------

def wasserstein1d_exact(X, Y) -> float:
    X = np.sort(np.asarray(X, dtype=float).ravel())
    Y = np.sort(np.asarray(Y, dtype=float).ravel())
    if X.size != Y.size:
        raise InputError("exact 1D transport here needs equal sample sizes")
    return float(np.mean(np.abs(X - Y)))


def wasserstein_assignment(X, Y) -> float:
    """Exact W1 between equal-size empirical measures in any dimension."""
    X, Y = _batch(X), _batch(Y)
    if len(X) != len(Y):
        raise InputError("assignment transport needs equal sample sizes")
    C = cdist(X, Y)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].mean())


def dirac_mmd2(psi, theta):
    """MMD^2 between point masses at 0 and theta under ``exp(-psi^2 (x-y)^2 / 2)``."""
    return 2.0 * (1.0 - np.exp(-0.5 * (psi * theta) ** 2))


def dirac_smmd2(psi, theta, lam=1.0):
    """SMMD^2 for the same pair with mu at 0: ``MMD^2 / (lam + 1 + psi^2)``."""
    return dirac_mmd2(psi, theta) / (lam + 1.0 + psi**2)


def scaled_gaussian(psi, dim=1, bandwidth=1.0) -> Composed:
    """Gaussian kernel on the representation ``x -> psi x`` (bandwidth ``1/psi`` overall)."""
    return Composed(Gaussian(bandwidth), scaling_net(psi, dim))


def optimize_over_family(estimator, grid, X, Y, **extras):
    """Exact maximum of ``estimator(psi, X, Y, **extras)`` over ``grid``.

    Estimators may return a float or a ``DiscrepancyEstimate``. Ties go to the
    smallest parameter.
    """
    grid = sorted(float(p) for p in grid)
    if not grid:
        raise InputError("empty parameter grid")
    best, arg = -np.inf, None
    for psi in grid:
        val = estimator(psi, X, Y, **extras)
        val = val.value if isinstance(val, DiscrepancyEstimate) else float(val)
        if val > best:
            best, arg = val, psi
    return float(best), arg


# --- uniform entry point --------------------------------------------------------

METHODS = ("mmd2_unbiased", "mmd2_biased", "mmd2_block", "mmd", "smmd", "gcmmd", "gcmmd2",
           "gcmmd_lowrank", "lipmmd")


def estimate(method: str, k: Kernel, X, Y, Xmu=None, lam: float = 1.0, n_blocks: int = 1,
             chol_tol=None, max_rank=None, Z=None) -> DiscrepancyEstimate:
    """Run a named estimator and wrap the result with its diagnostics."""
    if method == "mmd2_unbiased":
        v = mmd2_unbiased(k, X, Y)
        return DiscrepancyEstimate(v, True, method, {"mmd2": v})
    if method == "mmd2_biased":
        v = mmd2_biased(k, X, Y)
        return DiscrepancyEstimate(v, True, method, {"mmd2": v})
    if method == "mmd2_block":
        v = mmd2_block(k, X, Y, n_blocks)
        return DiscrepancyEstimate(v, True, method, {"mmd2": v, "n_blocks": n_blocks})
    if method == "mmd":
        v = mmd2_biased(k, X, Y)
        return DiscrepancyEstimate(float(np.sqrt(max(v, 0.0))), False, method, {"mmd2": v})
    if method == "smmd":
        return smmd(k, X, Y, Xmu, lam)
    if method in ("gcmmd", "gcmmd2"):
        v, _, info = gcmmd2(k, X, Y, Xmu, lam, return_info=True)
        out = v if method == "gcmmd2" else float(np.sqrt(max(v, 0.0)))
        return DiscrepancyEstimate(out, method == "gcmmd2", method, dict(info, gcmmd2=v))
    if method == "gcmmd_lowrank":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowRankTruncationWarning)
            v, _, info = gcmmd2_lowrank(k, X, Y, Xmu, lam, chol_tol, max_rank, return_info=True)
        return DiscrepancyEstimate(v, True, method, info)
    if method == "lipmmd":
        v, duals, st = lipmmd(k, X, Y, Z, lam, return_state=True)
        return DiscrepancyEstimate(v, False, method,
                                   {"solver_iters": st.iters, "duals": duals, "kkt": st.kkt,
                                    "grid_points": len(st.Z), "lam": lam})
    raise InputError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
