"""Linear objective, convex quadratic constraints:

    maximize  c.x   subject to   x' P_j x <= 1,  j = 1..m

Solved by a log-barrier path-following method started from the strictly
feasible point x = 0, then polished by Newton's method on the KKT equations of
the detected active set. Dual variables follow the convention

    c = sum_j 2 mu_j P_j x,   mu_j >= 0,   mu_j (1 - x' P_j x) = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError

NEWTON_TOL = 1e-9
JITTER = 1e-12


@dataclass
class Qcqp:
    c: np.ndarray
    constraints: list

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if len(self.constraints) == 0:
            raise InputError("a QCQP needs at least one constraint (else it is unbounded)")
        Ps = []
        for j, P in enumerate(self.constraints):
            P = np.asarray(P, dtype=float)
            if P.shape != (n, n):
                raise InputError(f"constraint {j} has shape {P.shape}, expected {(n, n)}")
            if not np.allclose(P, P.T, atol=1e-10 * max(1.0, np.abs(P).max())):
                raise InputError(f"constraint {j} is not symmetric")
            P = 0.5 * (P + P.T)
            floor = -1e-8 * max(np.trace(P), 1e-300)
            if np.linalg.eigvalsh(P)[0] < floor:
                raise InputError(f"constraint {j} is not positive semidefinite")
            Ps.append(P)
        self.constraints = Ps

    @property
    def dim(self):
        return self.c.size

    def slacks(self, x):
        return np.array([1.0 - x @ P @ x for P in self.constraints])


@dataclass
class QcqpResult:
    x: np.ndarray
    duals: np.ndarray
    iters: int
    value: float
    kkt: dict = field(default_factory=dict)
    polished: bool = False


def kkt_residuals(qcqp: Qcqp, x, mu) -> dict:
    grad = sum(2.0 * m * (P @ x) for m, P in zip(mu, qcqp.constraints))
    cn = np.linalg.norm(qcqp.c)
    s = qcqp.slacks(x)
    return {
        "stationarity": float(np.linalg.norm(qcqp.c - grad) / (cn if cn > 0 else 1.0)),
        "complementarity": float(np.max(np.abs(mu * s))),
        "primal": float(max(0.0, -s.min())),
        "dual": float(max(0.0, -mu.min())),
    }


def _max_residual(r):
    return max(r.values())


def _center(qcqp, x, t, max_newton):
    c, Ps = qcqp.c, qcqp.constraints
    n = x.size
    it = 0
    for it in range(1, max_newton + 1):
        Px = [P @ x for P in Ps]
        s = np.array([1.0 - x @ v for v in Px])
        grad = -t * c + sum(2.0 * v / sj for v, sj in zip(Px, s))
        hess = sum(2.0 * P / sj for P, sj in zip(Ps, s))
        hess = hess + sum(4.0 * np.outer(v, v) / sj**2 for v, sj in zip(Px, s))
        scale = max(np.trace(hess) / n, 1e-300)
        try:
            step = -np.linalg.solve(hess + JITTER * scale * np.eye(n), grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        dec = float(-grad @ step)
        f0 = -t * (c @ x) - np.sum(np.log(s))
        # second test: the decrement is below what roundoff in f0 can resolve
        if dec / 2.0 <= NEWTON_TOL or dec <= 1e-14 * (abs(f0) + len(Ps)):
            return x, it
        a = 1.0
        while True:
            xn = x + a * step
            sn = qcqp.slacks(xn)
            if np.all(sn > 0):
                fn = -t * (c @ xn) - np.sum(np.log(sn))
                if fn <= f0 - 0.25 * a * dec:
                    break
            a *= 0.5
            if a < 1e-16:
                return x, it
        x = xn
        if np.linalg.norm(x) > 1e12:
            raise NumericalError("QCQP appears unbounded", {"x_norm": float(np.linalg.norm(x))})
    return x, it


def _polish(qcqp, x, mu, active, iters=30):
    """Newton on the equality KKT system restricted to ``active``."""
    c, Ps = qcqp.c, qcqp.constraints
    n, k = x.size, len(active)
    z = np.concatenate([x, mu[active]])
    for _ in range(iters):
        xa, ma = z[:n], z[n:]
        Px = np.array([Ps[j] @ xa for j in active]).reshape(k, n)
        r1 = c - 2.0 * (ma @ Px)
        r2 = np.array([1.0 - xa @ v for v in Px])
        r = np.concatenate([r1, r2])
        if np.linalg.norm(r) <= 1e-15 * (1.0 + np.linalg.norm(c)):
            break
        J = np.zeros((n + k, n + k))
        J[:n, :n] = -2.0 * sum(m * Ps[j] for m, j in zip(ma, active))
        J[:n, n:] = -2.0 * Px.T
        J[n:, :n] = -2.0 * Px
        try:
            dz = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(J, -r, rcond=None)[0]
        z = z + dz
    x_new = z[:n]
    mu_new = np.zeros_like(mu)
    mu_new[active] = z[n:]
    return x_new, mu_new


def solve(qcqp: Qcqp, tol: float = 1e-9, max_stages: int = 40, max_newton: int = 200) -> QcqpResult:
    """Maximize ``c.x`` over the intersection of the ellipsoids.

    Returns the primal point, one dual per constraint and the total Newton
    iteration count. Raises NumericalError on divergence or stalled stages.
    """
    m, n = len(qcqp.constraints), qcqp.dim
    x = np.zeros(n)
    if not np.any(qcqp.c):
        mu = np.zeros(m)
        return QcqpResult(x, mu, 0, 0.0, kkt_residuals(qcqp, x, mu))
    t = 1.0
    total = 0
    for _ in range(max_stages):
        x, it = _center(qcqp, x, t, max_newton)
        total += it
        if it >= max_newton:
            raise NumericalError("barrier centering did not converge",
                                 {"barrier": t, "iters": total, "x": x.tolist()})
        if m / t <= tol:
            break
        t *= 10.0
    else:
        raise NumericalError("barrier path did not reach the gap tolerance",
                             {"barrier": t, "iters": total})
    s = qcqp.slacks(x)
    mu = 1.0 / (t * s)
    res = kkt_residuals(qcqp, x, mu)
    result = QcqpResult(x, mu, total, float(qcqp.c @ x), res)

    # active-set refinement: drop the most negative multiplier and re-polish
    active = np.flatnonzero(s < 1e-4)
    while 0 < active.size <= n:
        xp, mp = _polish(qcqp, x, mu, active)
        if not np.all(np.isfinite(xp)):
            break
        rp = kkt_residuals(qcqp, xp, mp)
        if _max_residual(rp) < _max_residual(result.kkt):
            result = QcqpResult(xp, mp, total, float(qcqp.c @ xp), rp, True)
        worst = np.argmin(mp[active])
        if mp[active][worst] >= 0:
            break
        active = np.delete(active, worst)
    return result
