"""Fully-connected Leaky-ReLU networks with analytic Jacobians.

A net with ``L`` layers computes

    h^0 = x,   h^l = W^l act(h^{l-1}) + b^l,   phi(x) = h^L

where ``act`` is the identity before the first layer and a leaky ReLU with
slope ``leak`` on the negative side elsewhere. The derivative of the leaky
ReLU at exactly zero is taken to be 1 (the positive branch).

Under the spectral parametrization each layer stores an unnormalized matrix
``Wbar`` and a scale ``gamma``; the weight actually used is
``gamma * Wbar / ||Wbar||_op``. Gradients treat the power-iteration singular
vectors as constants.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import InputError, UsageError

POWER_TOL = 1e-9
POWER_MAX_ITER = 500


def _power_iteration(W, v0=None, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    W = np.asarray(W, dtype=float)
    if v0 is None:
        v = np.linalg.norm(W, axis=0) + 1.0
    else:
        v = np.array(v0, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = np.ones(W.shape[1])
        nv = np.linalg.norm(v)
    v = v / nv
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            raise InputError("power iteration hit the null space of a zero matrix")
        w /= nw
        done = np.linalg.norm(w - v) <= tol
        v = w
        if done:
            break
    Wv = W @ v
    sigma = float(np.linalg.norm(Wv))
    return sigma, Wv / sigma, v


def spectral_norm(W) -> float:
    """Operator norm of ``W`` by power iteration (tol 1e-9, at most 500 steps)."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(W):
        raise InputError("spectral norm of a zero matrix")
    return _power_iteration(W)[0]


def condition_number(W) -> float:
    """sigma_max / sigma_min from a dense SVD; ``inf`` when sigma_min is 0."""
    s = np.linalg.svd(np.atleast_2d(np.asarray(W, dtype=float)), compute_uv=False)
    if s[-1] == 0.0:
        return float("inf")
    return float(s[0] / s[-1])


def leaky(h, leak):
    return np.where(h > 0, h, leak * h)


def leaky_mask(h, leak):
    return np.where(h >= 0, 1.0, leak)


@dataclass
class CriticNet:
    """Leaky-ReLU MLP. ``gammas is None`` means the standard parametrization."""

    weights: list
    biases: list
    leak: float = 0.2
    gammas: list | None = None
    _power_vecs: list = field(default_factory=list, repr=False, compare=False)
    _version: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        self.weights = [np.atleast_2d(np.array(W, dtype=float)) for W in self.weights]
        self.biases = [np.atleast_1d(np.array(b, dtype=float)) for b in self.biases]
        if not 0.0 < self.leak < 1.0:
            raise InputError(f"leak must lie in (0, 1), got {self.leak}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InputError("need one bias per weight matrix and at least one layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise InputError(f"layer {l + 1}: bias shape {b.shape} != ({W.shape[0]},)")
            if l > 0 and W.shape[1] != self.weights[l - 1].shape[0]:
                raise InputError(f"layer {l + 1}: input width {W.shape[1]} does not chain")
        if self.gammas is not None:
            self.gammas = [np.array(float(g)).reshape(1) for g in self.gammas]
            if len(self.gammas) != len(self.weights):
                raise InputError("one gamma per layer required")
        self._power_vecs = [None] * len(self.weights)

    @classmethod
    def spectral_from(cls, weights, biases, leak=0.2):
        """Spectral net whose gammas start at ||Wbar||_op, so it matches ``weights``."""
        gammas = [spectral_norm(W) for W in weights]
        return cls(weights, biases, leak, gammas)

    @property
    def spectral(self) -> bool:
        return self.gammas is not None

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def version(self) -> int:
        return self._version

    def touch(self):
        """Mark parameters as modified (invalidates forward caches)."""
        self._version += 1

    def parameters(self) -> list:
        params = list(self.weights) + list(self.biases)
        if self.spectral:
            params += list(self.gammas)
        return params

    def _layer_weight(self, l):
        if not self.spectral:
            return self.weights[l], None
        sigma, u, v = _power_iteration(self.weights[l], self._power_vecs[l])
        self._power_vecs[l] = v
        return self.gammas[l][0] * self.weights[l] / sigma, (sigma, u, v)

    def effective_weights(self) -> list:
        return [self._layer_weight(l)[0] for l in range(self.depth)]

    def copy(self) -> "CriticNet":
        gam = None if self.gammas is None else [float(g[0]) for g in self.gammas]
        return CriticNet([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.leak, gam)

    def as_standard(self) -> "CriticNet":
        return CriticNet(self.effective_weights(), [b.copy() for b in self.biases], self.leak)

    def __call__(self, x):
        return forward(self, x)[0]

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            entry = {"shape": list(W.shape), "weight": W.ravel().tolist(), "bias": b.tolist()}
            if self.spectral:
                entry["gamma"] = float(self.gammas[l][0])
            layers.append(entry)
        return {
            "format": "scaledmmd.criticnet/1",
            "parametrization": "spectral" if self.spectral else "standard",
            "leak": self.leak,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CriticNet":
        try:
            layers = data["layers"]
            weights = [np.array(e["weight"], dtype=float).reshape(e["shape"]) for e in layers]
            biases = [np.array(e["bias"], dtype=float) for e in layers]
            gammas = None
            if data.get("parametrization", "standard") == "spectral":
                gammas = [e["gamma"] for e in layers]
            return cls(weights, biases, float(data.get("leak", 0.2)), gammas)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed net description: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CriticNet":
        return cls.from_dict(json.loads(text))


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list          # pre-activations h^1..h^L, each (n, d_l)
    weights: list      # effective weights used
    spectral: list     # (sigma, u, v) per layer or None
    version: int
    net_id: int


@dataclass
class Grads:
    weights: list
    biases: list
    gammas: list | None
    inputs: np.ndarray

    def as_list(self) -> list:
        out = list(self.weights) + list(self.biases)
        if self.gammas is not None:
            out += list(self.gammas)
        return out


def _as_batch(net, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x) if single else x
    if X.ndim != 2 or X.shape[1] != net.widths[0]:
        raise InputError(f"input of shape {x.shape} does not match input width {net.widths[0]}")
    return X, single


def forward(net: CriticNet, x):
    """Evaluate the net. Returns ``(output, cache)``; the cache lists pre-activations.

    ``x`` may be a single point ``(d_0,)`` or a batch ``(n, d_0)``.
    """
    X, single = _as_batch(net, x)
    pre, Ws, spec = [], [], []
    a = X
    for l in range(net.depth):
        W, info = net._layer_weight(l)
        h = a @ W.T + net.biases[l]
        pre.append(h)
        Ws.append(W)
        spec.append(info)
        a = leaky(h, net.leak)
    out = pre[-1][0] if single else pre[-1]
    return out, ForwardCache(X, pre, Ws, spec, net.version, id(net))


def _jacobian_from_cache(net, cache):
    n = cache.x.shape[0]
    J = np.broadcast_to(cache.weights[0], (n,) + cache.weights[0].shape)
    for l in range(1, net.depth):
        m = leaky_mask(cache.pre[l - 1], net.leak)
        J = cache.weights[l] @ (m[:, :, None] * J)
    return np.array(J)


def jacobian(net: CriticNet, x):
    """d phi / d x: ``(d_L, d_0)`` for one point, ``(n, d_L, d_0)`` for a batch."""
    X, single = _as_batch(net, x)
    _, cache = forward(net, X)
    J = _jacobian_from_cache(net, cache)
    return J[0] if single else J


def forward_with_jacobian(net: CriticNet, x):
    """Batched ``(outputs, jacobians, cache)`` from a single pass."""
    X, _ = _as_batch(net, x)
    out, cache = forward(net, X)
    return out, _jacobian_from_cache(net, cache), cache


def param_grads(net: CriticNet, cache: ForwardCache, grad_out=None, grad_jac=None) -> Grads:
    """Reverse-mode gradients of a scalar loss through a cached forward pass.

    ``grad_out[n]`` is dLoss/dphi(x_n) with shape ``(n, d_L)``; ``grad_jac[n]`` is
    dLoss/dJ(x_n) with shape ``(n, d_L, d_0)`` for losses that depend on the
    input Jacobian. The Jacobian is piecewise constant in x, so it contributes
    nothing to bias or input gradients.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise UsageError("forward cache is stale: the net changed after forward()")
    n = cache.x.shape[0]
    L = net.depth
    leak = net.leak
    Ws = cache.weights
    masks = [leaky_mask(h, leak) for h in cache.pre[:-1]]
    dW = [np.zeros_like(W) for W in Ws]
    db = [np.zeros_like(b) for b in net.biases]
    dx = np.zeros_like(cache.x)

    if grad_out is not None:
        delta = np.asarray(grad_out, dtype=float).reshape(n, -1)
        for l in range(L - 1, -1, -1):
            a_prev = cache.x if l == 0 else leaky(cache.pre[l - 1], leak)
            dW[l] += delta.T @ a_prev
            db[l] += delta.sum(axis=0)
            back = delta @ Ws[l]
            if l == 0:
                dx = back
            else:
                delta = back * masks[l - 1]

    if grad_jac is not None:
        G = np.asarray(grad_jac, dtype=float).reshape(n, Ws[-1].shape[0], Ws[0].shape[1])
        # J = P_l W_l Q_l; Q_l maps x to the (masked) input of layer l, P_l maps h^l to output.
        Q = [None] * L
        Q[0] = np.broadcast_to(np.eye(Ws[0].shape[1]), (n,) + (Ws[0].shape[1],) * 2)
        for l in range(1, L):
            Q[l] = masks[l - 1][:, :, None] * (Ws[l - 1] @ Q[l - 1])
        P = np.broadcast_to(np.eye(Ws[-1].shape[0]), (n,) + (Ws[-1].shape[0],) * 2)
        for l in range(L - 1, -1, -1):
            R = np.swapaxes(P, 1, 2) @ G
            dW[l] += np.tensordot(R, Q[l], axes=([0, 2], [0, 2]))
            if l > 0:
                P = (P @ Ws[l]) * masks[l - 1][:, None, :]

    if not net.spectral:
        return Grads(dW, db, None, dx)

    dWbar, dgam = [], []
    for l in range(L):
        sigma, u, v = cache.spectral[l]
        Wbar = net.weights[l]
        gamma = net.gammas[l][0]
        inner = float(np.sum(dW[l] * Wbar))
        dWbar.append(gamma / sigma * dW[l] - gamma * inner / sigma**2 * np.outer(u, v))
        dgam.append(np.array([inner / sigma]))
    return Grads(dWbar, db, dgam, dx)


def normalize_to_psi1(net: CriticNet):
    """Rescale to unit-norm layers: returns ``(scale, net1)`` with phi = scale * phi_1."""
    scale = 1.0
    Ws, bs = [], []
    for W, b in zip(net.effective_weights(), net.biases):
        if not np.any(W):
            raise InputError("cannot normalize a net with an all-zero layer")
        s = spectral_norm(W)
        scale *= s
        Ws.append(W / s)
        bs.append(b / scale)
    return scale, CriticNet(Ws, bs, net.leak)


def conditioned_matrix(rows, cols, kappa, rng, top=1.0):
    """Random matrix with singular values drawn in ``[top / kappa, top]``.

    The largest singular value is exactly ``top`` and the condition number at
    most ``kappa``.
    """
    k = min(rows, cols)
    U, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    V, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    s = rng.uniform(top / kappa, top, size=k)
    s[0] = top
    return (U * s) @ V.T


def random_net(widths, rng, leak=0.2, kappa=None, unit_norm=False, bias_scale=0.1,
               spectral=False):
    """Random net; with ``kappa`` every layer has condition number <= kappa.

    ``unit_norm`` puts the net in the normalized set (all ||W^l||_op = 1).
    """
    Ws, bs = [], []
    for din, dout in zip(widths[:-1], widths[1:]):
        if kappa is None:
            W = rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)
        else:
            top = 1.0 if unit_norm else rng.uniform(0.5, 2.0)
            W = conditioned_matrix(dout, din, kappa, rng, top)
        Ws.append(W)
        bs.append(bias_scale * rng.standard_normal(dout))
    if spectral:
        return CriticNet.spectral_from(Ws, bs, leak)
    return CriticNet(Ws, bs, leak)


def linear_net(W, bias=None, leak=0.2) -> CriticNet:
    """Single affine layer ``x -> W x + b``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    b = np.zeros(W.shape[0]) if bias is None else bias
    return CriticNet([W], [b], leak)


def scaling_net(psi, dim=1) -> CriticNet:
    """``x -> psi * x``, the bandwidth family of the Dirac example."""
    return linear_net(psi * np.eye(dim))


@dataclass(frozen=True)
class ContinuityBoundParams:
    """Constants of the Wasserstein continuity bound for optimized SMMD.

    ``L_K`` is the Lipschitz constant of ``a -> K(a, .)`` into the RKHS of the
    top kernel and ``gamma_K`` its curvature constant (``trace grad_xy = gamma_K^2
    ||J||_F^2``); for a Gaussian top of bandwidth ``bw`` both equal ``1 / bw``.
    """

    L_K: float
    gamma_K: float
    kappa: float
    leak: float
    d_L: int
    depth: int

    def __post_init__(self):
        if min(self.L_K, self.gamma_K, self.d_L, self.depth) <= 0:
            raise InputError("continuity-bound constants must be positive")
        if self.kappa < 1:
            raise InputError("kappa must be >= 1")
        if not 0 < self.leak < 1:
            raise InputError("leak must lie in (0, 1)")

    @classmethod
    def for_gaussian(cls, bandwidth, kappa, net: CriticNet):
        return cls(1.0 / bandwidth, 1.0 / bandwidth, kappa, net.leak, net.widths[-1], net.depth)

    @property
    def Q_K(self):
        return self.L_K / self.gamma_K

    def constant(self) -> float:
        L, a = self.depth, self.leak
        return self.Q_K * self.kappa ** (L / 2) / (np.sqrt(self.d_L) * a ** (L / 2))

    def gradient_floor(self) -> float:
        """Claimed lower bound ``d_L alpha^L / kappa^L`` on ``||grad phi||_F^2`` over unit-norm nets."""
        return self.d_L * self.leak**self.depth / self.kappa**self.depth

    def gradient_floor_proved(self) -> float:
        """``d_L (alpha / kappa)^(2L)``: what the singular-value product argument yields."""
        return self.d_L * (self.leak / self.kappa) ** (2 * self.depth)


def in_psi_kappa(net: CriticNet, kappa, unit=False, tol=1e-9) -> bool:
    """Membership in the bounded-condition set (``unit`` adds ||W^l||_op = 1)."""
    for W in net.effective_weights():
        if condition_number(W) > kappa * (1 + tol):
            return False
        if unit and abs(np.linalg.norm(W, 2) - 1.0) > 1e-9:
            return False
    return True


def two_unit_net(alpha, leak=0.2) -> CriticNet:
    """``x -> [1, -1] act(W x)`` with ``W = [[1, 1], [1, 1 + alpha]]``.

    ``W`` becomes singular as ``alpha -> 0`` so the expected squared gradient
    vanishes while the Lipschitz constant does not.
    """
    W = np.array([[1.0, 1.0], [1.0, 1.0 + alpha]])
    return CriticNet([W, np.array([[1.0, -1.0]])], [np.zeros(2), np.zeros(1)], leak)


def piecewise_lipschitz(net: CriticNet) -> float:
    """Exact Lipschitz constant of a bias-free two-layer net.

    Bias-free, so each activation region is a cone through the origin; the
    constant is the largest Jacobian norm over the masks that occur.
    """
    if net.depth != 2 or any(np.any(b) for b in net.biases):
        raise InputError("piecewise_lipschitz handles bias-free two-layer nets only")
    W1, W2 = net.effective_weights()
    h = W1.shape[0]
    best = 0.0
    for bits in range(2**h):
        signs = np.array([1.0 if bits >> i & 1 else -1.0 for i in range(h)])
        # region {x : sign(W1 x) = signs} is nonempty iff the LP below has slack
        if not _cone_nonempty(W1 * signs[:, None]):
            continue
        m = np.where(signs > 0, 1.0, net.leak)
        best = max(best, np.linalg.norm(W2 @ (m[:, None] * W1), 2))
    return float(best)


def _cone_nonempty(A) -> bool:
    # maximize t s.t. A x >= t, |x|_inf <= 1
    n = A.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-A, np.ones((A.shape[0], 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(A.shape[0]),
                  bounds=[(-1, 1)] * n + [(None, 1)], method="highs")
    return res.status == 0 and -res.fun > 1e-12
