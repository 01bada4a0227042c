import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _util import fd_grad, losses_for, random_instance, rel_err
from u2a.errors import InvalidInputError
from u2a.forget import (
    ForgetLoss,
    InnerConfig,
    InnerProblem,
    forget_grad,
    forget_loss,
    reg_grad,
    reg_loss,
)
from u2a.policy import nll_grad


def dense_hessian(prob, omega, theta):
    d = theta.size
    return np.array([prob.hvp(omega, theta, e) for e in np.eye(d)]).T


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ForgetLoss("dpo")
    with pytest.raises(InvalidInputError):
        ForgetLoss("npo", npo_beta=0.0)
    with pytest.raises(InvalidInputError):
        ForgetLoss("graddiff")  # needs a retain split
    with pytest.raises(InvalidInputError):
        InnerConfig(lam=0.0)
    with pytest.raises(InvalidInputError):
        InnerConfig(hvp_mode="exact")


def test_ga_uniform_value():
    assert forget_loss(ForgetLoss("ga"), np.zeros((5, 4)), [0, 1, 2], np.zeros((5, 4))) == pytest.approx(
        -3 * math.log(4), abs=1e-12
    )


@pytest.mark.parametrize("beta", [0.1, 0.7, 2.0])
def test_npo_at_reference(beta):
    rng = np.random.default_rng(0)
    ts = rng.normal(size=(5, 4))
    loss = ForgetLoss("npo", npo_beta=beta)
    # -(2/b) log sigmoid(0) = +(2/b) ln 2
    assert forget_loss(loss, ts, [1, 3, 0], ts) == pytest.approx(2 / beta * math.log(2), rel=1e-14)
    # 2 sigmoid(0) = 1, so the gradient equals the GA gradient there
    ga = forget_grad(ForgetLoss("ga"), ts, [1, 3, 0], ts)
    np.testing.assert_allclose(forget_grad(loss, ts, [1, 3, 0], ts), ga, rtol=1e-12, atol=1e-15)


def test_graddiff_without_retain_term_is_ga():
    rng = np.random.default_rng(1)
    theta, ts = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    gd = ForgetLoss("graddiff", retain_weight=0.0, retain=((0, 1),))
    ga = ForgetLoss("ga")
    assert forget_loss(gd, theta, [2, 2, 1], ts) == forget_loss(ga, theta, [2, 2, 1], ts)
    np.testing.assert_array_equal(forget_grad(gd, theta, [2, 2, 1], ts), forget_grad(ga, theta, [2, 2, 1], ts))


def test_ga_grad_is_negated_nll_grad():
    rng = np.random.default_rng(2)
    theta = rng.normal(size=(6, 5))
    seq = [4, 0, 0, 3]
    np.testing.assert_allclose(forget_grad(ForgetLoss("ga"), theta, seq, theta), -nll_grad(theta, [seq]), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_forget_grads_match_finite_differences(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed, V=int(np.random.default_rng(seed).integers(2, 9)))
    ts = theta + 0.3 * rng.normal(size=theta.shape)
    for loss in losses_for(retain):
        g = forget_grad(loss, theta, seqs[0], ts)
        assert rel_err(g, fd_grad(lambda t: forget_loss(loss, t, seqs[0], ts), theta)) < 1e-6, loss.kind


def test_reg_loss_examples():
    rng = np.random.default_rng(3)
    ts = rng.normal(size=(4, 3))
    assert reg_loss(ts, ts) == 0.0
    np.testing.assert_array_equal(reg_grad(ts, ts), 0.0)
    e = np.zeros_like(ts)
    e[2, 1] = 1.0
    assert reg_loss(ts + e, ts) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(reg_grad(ts + e, ts), 2 * e.ravel(), atol=1e-15)
    t = rng.normal(size=(4, 3))
    assert reg_loss(t, ts) == pytest.approx(sum((a - b) ** 2 for a, b in zip(t.ravel(), ts.ravel())), rel=1e-14)
    with pytest.raises(InvalidInputError):
        reg_loss(t, ts[:2])


def test_inner_objective_reductions():
    rng, theta, seqs, retain, _, _ = random_instance(4)
    ts = theta + 0.2 * rng.normal(size=theta.shape)
    prob = InnerProblem(seqs, ts, cfg=InnerConfig(lam=1.5))
    zero = np.zeros(len(seqs))
    assert prob.objective(zero, ts) == 0.0
    np.testing.assert_array_equal(prob.gradient(zero, ts), 0.0)
    onehot = np.eye(len(seqs))[2]
    expect = forget_loss(ForgetLoss("ga"), theta, seqs[2], ts) + 1.5 * reg_loss(theta, ts)
    assert prob.objective(onehot, theta) == pytest.approx(expect, rel=1e-13)
    with pytest.raises(InvalidInputError):
        prob.objective(-onehot, theta)
    with pytest.raises(InvalidInputError):
        prob.gradient(np.ones(3), theta)


@pytest.mark.parametrize("seed", range(5))
def test_inner_grad_matches_finite_differences(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed)
    ts = theta + 0.3 * rng.normal(size=theta.shape)
    omega = rng.dirichlet(np.ones(len(seqs)))
    for loss in losses_for(retain):
        prob = InnerProblem(seqs, ts, loss, InnerConfig(lam=0.7))
        g = prob.gradient(omega, theta)
        assert rel_err(g, fd_grad(lambda t: prob.objective(omega, t), theta)) < 1e-6, loss.kind


def test_hvp_trivial_cases():
    rng, theta, seqs, _, _, _ = random_instance(5)
    prob = InnerProblem(seqs, theta, cfg=InnerConfig(lam=0.8))
    v = rng.normal(size=theta.size)
    np.testing.assert_array_equal(prob.hvp(np.zeros(len(seqs)), theta, v), 1.6 * v)
    np.testing.assert_array_equal(prob.hvp(rng.dirichlet(np.ones(len(seqs))), theta, np.zeros(theta.size)), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_hvp_analytic_matches_fd(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed)
    ts = theta + 0.3 * rng.normal(size=theta.shape)
    omega = rng.dirichlet(np.ones(len(seqs)))
    for loss in losses_for(retain):
        prob = InnerProblem(seqs, ts, loss)
        v = rng.normal(size=theta.size)
        a = prob.hvp(omega, theta, v)
        b = prob.hvp(omega, theta, v, mode="fd")
        assert rel_err(a, b) < 1e-4, loss.kind


@given(st.integers(0, 2**32 - 1))
def test_hvp_symmetric(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed % 1000)
    rng = np.random.default_rng(seed)
    omega = rng.dirichlet(np.ones(len(seqs)))
    u, v = rng.normal(size=(2, theta.size))
    for loss in losses_for(retain):
        prob = InnerProblem(seqs, theta, loss)
        assert abs(v @ prob.hvp(omega, theta, u) - u @ prob.hvp(omega, theta, v)) < 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_curvature_bound_against_dense_spectrum(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed)
    omega = rng.dirichlet(np.ones(len(seqs)))
    for loss in losses_for(retain):
        prob = InnerProblem(seqs, theta, loss)
        m = 2.0 * np.eye(theta.size) - dense_hessian(prob, omega, theta)
        top = np.linalg.eigvalsh((m + m.T) / 2).max()
        bound = prob.curvature_bound(omega, theta)
        # power iteration approaches the top eigenvalue from below
        assert bound <= top + 1e-8
        if loss.kind != "npo":
            assert bound == pytest.approx(top, rel=1e-3, abs=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_positive_definite_when_lambda_beats_bound(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed)
    omega = rng.dirichlet(np.ones(len(seqs))) * 0.9
    for loss in losses_for(retain)[:2]:
        bound = InnerProblem(seqs, theta, loss).curvature_bound(omega, theta)
        prob = InnerProblem(seqs, theta, loss, InnerConfig(lam=bound / 2 + 0.05))
        for v in rng.normal(size=(20, theta.size)):
            assert v @ prob.hvp(omega, theta, v) > 0


def test_inner_solve_zero_weights_returns_anchor():
    _, theta, seqs, _, _, _ = random_instance(6)
    sol = InnerProblem(seqs, theta).solve(np.zeros(len(seqs)))
    assert sol.steps == 0
    np.testing.assert_array_equal(sol.theta, theta)


def test_inner_solve_first_order_with_large_lambda():
    rng, theta, seqs, _, _, _ = random_instance(7)
    lam = 100.0
    prob = InnerProblem(seqs[:1], theta, cfg=InnerConfig(lam=lam, lr=1.0 / (2 * lam + 10), steps=20000))
    sol = prob.solve(np.ones(1), tol=1e-12)
    approx = theta.ravel() - prob.candidate_grads(theta)[0] / (2 * lam)
    assert np.max(np.abs(sol.theta.ravel() - approx)) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_inner_solve_unique_from_two_inits(seed):
    rng, theta, seqs, retain, _, _ = random_instance(seed)
    omega = rng.dirichlet(np.ones(len(seqs)))
    for loss in losses_for(retain):
        bound = InnerProblem(seqs, theta, loss).curvature_bound(omega, theta)
        lam = max(1.0, bound)  # 2 lam > B
        prob = InnerProblem(seqs, theta, loss, InnerConfig(lam=lam, lr=0.05, steps=50000))
        a = prob.solve(omega, tol=1e-10).theta
        b = prob.solve(omega, theta + rng.normal(size=theta.shape), tol=1e-10).theta
        assert np.max(np.abs(a - b)) < 1e-6, loss.kind


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_ga_unlearning_lowers_likelihood(seed, mass):
    rng, theta, seqs, _, _, _ = random_instance(seed % 1000)
    prob = InnerProblem(seqs, theta)
    omega = np.zeros(len(seqs))
    omega[0] = mass
    sol = prob.solve(omega, tol=1e-9)
    assert prob.loglik(sol.theta, [0])[0] <= prob.loglik(theta, [0])[0] + 1e-9
