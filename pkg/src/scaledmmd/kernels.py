"""Kernels with first and mixed second derivatives, and Gram assembly.

Derivative conventions, for a kernel ``k(x, y)`` on ``R^d``:

* ``grad_x(k, x, y)[i]``     = dk/dx_i
* ``grad_xy(k, x, y)[i, j]`` = d^2 k / dx_i dy_j

Batched versions (``Kernel.derivs``) return arrays indexed ``[a, b, i(, j)]``
for the pair ``(X[a], Y[b])``.

JSON descriptions (``to_dict`` / ``kernel_from_dict``)::

    {"type": "gaussian", "bandwidth": 1.0}
    {"type": "linear"}
    {"type": "polynomial", "degree": 3, "offset": 1.0, "scale": 1.0}
    {"type": "rq_mixture", "alphas": [0.2, 0.5, 1.0, 2.0, 5.0]}
    {"type": "composed", "top": {...gaussian or linear...}, "net": {...CriticNet...}}
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import InputError
from .nets import CriticNet, forward_with_jacobian

DEFAULT_RQ_ALPHAS = (0.2, 0.5, 1.0, 2.0, 5.0)


def _batch(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"expected an (n, d) batch, got shape {X.shape}")
    return X


class Kernel:
    input_dim = None

    def gram(self, X, Y):
        raise NotImplementedError

    def derivs(self, X, Y):
        """``(K, D1, D2)`` with shapes ``(n, m)``, ``(n, m, d)``, ``(n, m, d, d)``."""
        raise NotImplementedError

    def diag_terms(self, X):
        """Per-point ``k(x, x)`` and ``trace grad_xy(k, x, x)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def _check(self, X, Y):
        X, Y = _batch(X), _batch(Y)
        if X.shape[1] != Y.shape[1]:
            raise InputError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
        if self.input_dim is not None and X.shape[1] != self.input_dim:
            raise InputError(f"kernel expects dimension {self.input_dim}, got {X.shape[1]}")
        return X, Y


class _Radial(Kernel):
    """k(x, y) = f(||x - y||^2)."""

    def _f(self, s):
        raise NotImplementedError

    def _df(self, s):
        raise NotImplementedError

    def _d2f(self, s):
        raise NotImplementedError

    def gram(self, X, Y):
        X, Y = self._check(X, Y)
        diff = X[:, None, :] - Y[None, :, :]
        return self._f(np.einsum("abi,abi->ab", diff, diff))

    def derivs(self, X, Y):
        X, Y = self._check(X, Y)
        r = X[:, None, :] - Y[None, :, :]
        s = np.einsum("abi,abi->ab", r, r)
        f1, f2 = self._df(s), self._d2f(s)
        D1 = 2.0 * r * f1[:, :, None]
        D2 = -4.0 * np.einsum("abi,abj->abij", r, r) * f2[:, :, None, None]
        D2 -= 2.0 * np.eye(X.shape[1]) * f1[:, :, None, None]
        return self._f(s), D1, D2

    def diag_terms(self, X):
        X = _batch(X)
        n, d = X.shape
        z = np.zeros(1)
        return np.full(n, self._f(z)[0]), np.full(n, -2.0 * d * self._df(z)[0])


@dataclass(frozen=True)
class Gaussian(_Radial):
    """exp(-||x - y||^2 / (2 bandwidth^2)); a scaling net psi*x corresponds to bandwidth 1/psi."""

    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InputError(f"Gaussian bandwidth must be positive, got {self.bandwidth}")

    def _f(self, s):
        return np.exp(-s / (2.0 * self.bandwidth**2))

    def _df(self, s):
        return -self._f(s) / (2.0 * self.bandwidth**2)

    def _d2f(self, s):
        return self._f(s) / (4.0 * self.bandwidth**4)

    def gram(self, X, Y):
        X, Y = self._check(X, Y)
        return _backend.gaussian_gram(X, Y, self.bandwidth)

    def derivs(self, X, Y):
        X, Y = self._check(X, Y)
        return _backend.gaussian_derivs(X, Y, self.bandwidth)

    def to_dict(self):
        return {"type": "gaussian", "bandwidth": self.bandwidth}


@dataclass(frozen=True)
class RationalQuadraticMixture(_Radial):
    """Sum over alpha of (1 + ||x - y||^2 / (2 alpha))^(-alpha)."""

    alphas: tuple = DEFAULT_RQ_ALPHAS

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas or min(self.alphas) <= 0:
            raise InputError("RQ mixture needs a nonempty list of positive alphas")

    def _f(self, s):
        return sum((1.0 + s / (2 * a)) ** (-a) for a in self.alphas)

    def _df(self, s):
        return sum(-0.5 * (1.0 + s / (2 * a)) ** (-a - 1) for a in self.alphas)

    def _d2f(self, s):
        return sum((a + 1) / (4 * a) * (1.0 + s / (2 * a)) ** (-a - 2) for a in self.alphas)

    def to_dict(self):
        return {"type": "rq_mixture", "alphas": list(self.alphas)}


class _DotProduct(Kernel):
    """k(x, y) = g(x . y)."""

    def _g(self, t):
        raise NotImplementedError

    def _dg(self, t):
        raise NotImplementedError

    def _d2g(self, t):
        raise NotImplementedError

    def gram(self, X, Y):
        X, Y = self._check(X, Y)
        return self._g(X @ Y.T)

    def derivs(self, X, Y):
        X, Y = self._check(X, Y)
        t = X @ Y.T
        g1, g2 = self._dg(t), self._d2g(t)
        n, m = t.shape
        D1 = g1[:, :, None] * np.broadcast_to(Y[None, :, :], (n, m, Y.shape[1]))
        D2 = g2[:, :, None, None] * np.einsum("bi,aj->abij", Y, X)
        D2 += np.eye(X.shape[1]) * g1[:, :, None, None]
        return self._g(t), D1, D2

    def diag_terms(self, X):
        X = _batch(X)
        t = np.einsum("ai,ai->a", X, X)
        return self._g(t), X.shape[1] * self._dg(t) + self._d2g(t) * t


class Linear(_DotProduct):
    def _g(self, t):
        return t

    def _dg(self, t):
        return np.ones_like(t)

    def _d2g(self, t):
        return np.zeros_like(t)

    def __eq__(self, other):
        return isinstance(other, Linear)

    def __hash__(self):
        return hash("linear")

    def __repr__(self):
        return "Linear()"

    def to_dict(self):
        return {"type": "linear"}


@dataclass(frozen=True)
class Polynomial(_DotProduct):
    """(scale * x.y + offset)^degree, as used for KID-style scores."""

    degree: int = 3
    offset: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise InputError("polynomial degree must be a positive integer")
        if self.offset < 0 or self.scale <= 0:
            raise InputError("polynomial kernel needs offset >= 0 and scale > 0")

    def _g(self, t):
        return (self.scale * t + self.offset) ** self.degree

    def _dg(self, t):
        p = self.degree
        return p * self.scale * (self.scale * t + self.offset) ** (p - 1)

    def _d2g(self, t):
        p = self.degree
        if p < 2:
            return np.zeros_like(t)
        return p * (p - 1) * self.scale**2 * (self.scale * t + self.offset) ** (p - 2)

    def to_dict(self):
        return {"type": "polynomial", "degree": self.degree, "offset": self.offset,
                "scale": self.scale}


class Composed(Kernel):
    """k(x, y) = top(phi(x), phi(y)) with ``phi`` a CriticNet; top is Gaussian or Linear."""

    def __init__(self, top: Kernel, net: CriticNet):
        if not isinstance(top, (Gaussian, Linear)):
            raise InputError("composed kernels take a Gaussian or Linear top kernel")
        self.top = top
        self.net = net

    @property
    def input_dim(self):
        return self.net.widths[0]

    def features(self, X):
        """``(phi(X), J(X))`` with shapes ``(n, s)`` and ``(n, s, d)``."""
        out, J, _ = forward_with_jacobian(self.net, _batch(X))
        return out, J

    def gram(self, X, Y):
        X, Y = self._check(X, Y)
        return self.top.gram(self.features(X)[0], self.features(Y)[0])

    def derivs(self, X, Y):
        X, Y = self._check(X, Y)
        FX, JX = self.features(X)
        FY, JY = self.features(Y)
        K, T1, T2 = self.top.derivs(FX, FY)
        D1 = np.einsum("abs,asi->abi", T1, JX)
        D2 = np.einsum("asi,abst,btj->abij", JX, T2, JY)
        return K, D1, D2

    def diag_terms(self, X):
        X = _batch(X)
        if self.input_dim != X.shape[1]:
            raise InputError(f"kernel expects dimension {self.input_dim}, got {X.shape[1]}")
        F, J = self.features(X)
        kxx, _ = self.top.diag_terms(F)
        if isinstance(self.top, Gaussian):
            tr = np.einsum("asi,asi->a", J, J) / self.top.bandwidth**2
        else:
            tr = np.einsum("asi,asi->a", J, J)
        return kxx, tr

    def to_dict(self):
        return {"type": "composed", "top": self.top.to_dict(), "net": self.net.to_dict()}

    def __repr__(self):
        return f"Composed({self.top!r}, widths={self.net.widths})"


def kernel_from_dict(data: dict) -> Kernel:
    kind = data.get("type")
    try:
        if kind == "gaussian":
            return Gaussian(float(data.get("bandwidth", 1.0)))
        if kind == "linear":
            return Linear()
        if kind == "polynomial":
            return Polynomial(int(data.get("degree", 3)), float(data.get("offset", 1.0)),
                              float(data.get("scale", 1.0)))
        if kind == "rq_mixture":
            return RationalQuadraticMixture(tuple(data.get("alphas", DEFAULT_RQ_ALPHAS)))
        if kind == "composed":
            return Composed(kernel_from_dict(data["top"]), CriticNet.from_dict(data["net"]))
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed kernel description: {exc}") from exc
    raise InputError(f"unknown kernel type {kind!r}")


def kernel_from_json(text: str) -> Kernel:
    return kernel_from_dict(json.loads(text))


# point-wise API ----------------------------------------------------------

def _pair(k, x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"points must be matching vectors, got {x.shape} and {y.shape}")
    return x[None, :], y[None, :]


def eval(k: Kernel, x, y) -> float:  # noqa: A001 - mirrors the kernel-evaluation verb
    X, Y = _pair(k, x, y)
    return float(k.gram(X, Y)[0, 0])


def grad_x(k: Kernel, x, y) -> np.ndarray:
    X, Y = _pair(k, x, y)
    return k.derivs(X, Y)[1][0, 0]


def grad_xy(k: Kernel, x, y) -> np.ndarray:
    X, Y = _pair(k, x, y)
    return k.derivs(X, Y)[2][0, 0]


def gram(k: Kernel, X, Y) -> np.ndarray:
    return k.gram(X, Y)


@dataclass
class GramBundle:
    """K (M, M); G (M d, M) of left derivatives; H (M d, M d) of mixed ones.

    Row ``(m, i)`` of G and H sits at index ``m * d + i``.
    """

    K: np.ndarray
    G: np.ndarray
    H: np.ndarray

    @property
    def size(self):
        return self.K.shape[0]

    def stacked(self) -> np.ndarray:
        return np.block([[self.K, self.G.T], [self.G, self.H]])


def gram_bundle(k: Kernel, X) -> GramBundle:
    X = _batch(X)
    M, d = X.shape
    K, D1, D2 = k.derivs(X, X)
    G = D1.transpose(0, 2, 1).reshape(M * d, M)
    H = D2.transpose(0, 2, 1, 3).reshape(M * d, M * d)
    K = 0.5 * (K + K.T)
    H = 0.5 * (H + H.T)
    return GramBundle(K, G, H)


def trace_terms(k: Kernel, X):
    """Means over X of ``k(x, x)`` and ``sum_i d^2 k / dx_i dy_i`` at ``(x, x)``."""
    kxx, tr = k.diag_terms(X)
    return float(np.mean(kxx)), float(np.mean(tr))
