import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaledmmd.convex import Qcqp, kkt_residuals, solve
from scaledmmd.errors import InputError, NumericalError


def random_qcqp(rng, n=5, m=3, rank=None):
    Ps = []
    for _ in range(m):
        A = rng.normal(size=(rank or n, n))
        Ps.append(A.T @ A + 0.05 * np.eye(n))
    return Qcqp(rng.normal(size=n), Ps)


def oracle(q):
    """Independent conic solve of the same problem."""
    x = cp.Variable(q.dim)
    cons = [cp.quad_form(x, cp.psd_wrap(P)) <= 1 for P in q.constraints]
    prob = cp.Problem(cp.Maximize(q.c @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


def test_unit_ball():
    r = solve(Qcqp([1.0, 0.0], [np.eye(2)]))
    assert np.allclose(r.x, [1, 0], atol=1e-8) and np.isclose(r.duals[0], 0.5, atol=1e-8)


def test_diagonal_ellipse():
    r = solve(Qcqp([1.0, 0.0], [np.diag([4.0, 1.0])]))
    assert np.allclose(r.x, [0.5, 0], atol=1e-8)
    assert np.isclose(r.value, 0.5, atol=1e-8) and np.isclose(r.duals[0], 0.25, atol=1e-8)


def test_zero_objective():
    r = solve(Qcqp(np.zeros(3), [np.eye(3)]))
    assert r.value == 0.0 and np.all(r.duals == 0)


def test_inactive_constraint_has_zero_dual():
    r = solve(Qcqp([1.0, 0.0], [np.eye(2), 0.01 * np.eye(2)]))
    assert np.isclose(r.value, 1.0, atol=1e-8)
    assert abs(r.duals[1]) <= 1e-8


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_random_kkt_and_oracle(seed):
    rng = np.random.default_rng(seed)
    q = random_qcqp(rng, n=int(rng.integers(2, 7)), m=int(rng.integers(1, 5)))
    r = solve(q)
    assert max(r.kkt.values()) <= 1e-8
    assert r.kkt == kkt_residuals(q, r.x, r.duals)
    assert np.all(r.duals >= 0)
    ref = oracle(q)
    assert abs(r.value - ref) <= 1e-5 * max(1.0, abs(ref))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_euler_identity(seed):
    q = random_qcqp(np.random.default_rng(seed))
    r = solve(q)
    quad = np.array([r.x @ P @ r.x for P in q.constraints])
    assert abs(r.value - 2 * r.duals @ quad) <= 1e-8 * max(1.0, r.value)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_adding_constraints_never_increases_value(seed):
    rng = np.random.default_rng(seed)
    q = random_qcqp(rng, n=4, m=5)
    vals = [solve(Qcqp(q.c, q.constraints[:j])).value for j in range(1, 6)]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))


def test_rank_deficient_constraints(rng):
    # the sum of low-rank forms is definite, so the problem stays bounded
    n = 4
    Ps = [np.outer(v, v) for v in np.eye(n)]
    q = Qcqp(rng.normal(size=n), Ps)
    r = solve(q)
    assert np.isclose(r.value, np.abs(q.c).sum(), rtol=1e-8)
    assert max(r.kkt.values()) <= 1e-8


def test_input_validation():
    with pytest.raises(InputError):
        Qcqp([1.0], [])
    with pytest.raises(InputError):
        Qcqp([1.0, 0.0], [np.eye(3)])
    with pytest.raises(InputError):
        Qcqp([1.0, 0.0], [np.array([[1.0, 1.0], [0.0, 1.0]])])
    with pytest.raises(InputError):
        Qcqp([1.0, 0.0], [np.diag([1.0, -1.0])])


def test_unbounded_detected():
    with pytest.raises(NumericalError):
        solve(Qcqp([0.0, 1.0], [np.diag([1.0, 0.0])]))
