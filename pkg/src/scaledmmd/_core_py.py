"""Pure-numpy fallback for the compiled core (same signatures and outputs)."""
import numpy as np


def _sqdist(X, Y):
    diff = X[:, None, :] - Y[None, :, :]
    return diff, np.einsum("abi,abi->ab", diff, diff)


def gaussian_gram(X, Y, bandwidth):
    _, s = _sqdist(X, Y)
    return np.exp(-s / (2.0 * bandwidth * bandwidth))


def gaussian_derivs(X, Y, bandwidth):
    ib2 = 1.0 / (bandwidth * bandwidth)
    r, s = _sqdist(X, Y)
    K = np.exp(-0.5 * s * ib2)
    D1 = -r * (ib2 * K)[:, :, None]
    d = X.shape[1]
    D2 = -np.einsum("abi,abj->abij", r, r) * (ib2 * ib2)
    D2 += np.eye(d) * ib2
    D2 *= K[:, :, None, None]
    return K, D1, D2


def pivoted_cholesky(S, tol, max_rank):
    N = S.shape[0]
    max_rank = min(max_rank, N)
    R = np.zeros((max_rank, N))
    dg = np.diag(S).astype(float).copy()
    pivots = np.empty(max_rank, dtype=np.intp)
    trace = dg.sum()
    k = 0
    while k < max_rank and trace > tol:
        piv = int(np.argmax(dg))
        best = dg[piv]
        if best <= 0.0:
            break
        pivots[k] = piv
        R[k] = (S[piv] - R[:k, piv] @ R[:k]) / np.sqrt(best)
        dg -= R[k] ** 2
        dg[piv] = 0.0
        trace = dg[dg > 0.0].sum()
        k += 1
    return R[:k].copy(), pivots[:k].copy(), max(trace, 0.0)
