import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadsel.first_step import (
    FirstStepError,
    FirstStepFit,
    SeparationError,
    conditional_logit_objective,
    fit_conditional_logit,
)
from dyadsel.data import DyadicPanel, switchers

from conftest import random_panel

HAND_DR = np.array([[0.5, -1.0], [1.2, 0.3], [-0.7, 0.8], [0.1, 0.1], [2.0, -1.5]])
HAND_T = np.array([1.0, 0.0, 1.0, 0.0, 1.0])


def test_zero_index_row():
    v, _, _ = conditional_logit_objective(np.zeros(2), np.zeros((1, 2)), np.array([1.0]))
    assert v == pytest.approx(np.log(0.5))


def test_gradient_at_zero():
    _, g, _ = conditional_logit_objective(np.zeros(2), HAND_DR, HAND_T)
    np.testing.assert_allclose(g, ((HAND_T - 0.5)[:, None] * HAND_DR).sum(0))


def _fd(f, x, eps=1e-6):
    out = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        out.append((f(x + e) - f(x - e)) / (2 * eps))
    return np.array(out)


def test_finite_differences():
    g0 = np.array([0.3, -0.4])
    v, grad, hess = conditional_logit_objective(g0, HAND_DR, HAND_T)
    fd_grad = _fd(lambda g: conditional_logit_objective(g, HAND_DR, HAND_T)[0], g0)
    np.testing.assert_allclose(grad, fd_grad, atol=1e-6)
    fd_hess = np.column_stack(
        [_fd(lambda g: conditional_logit_objective(g, HAND_DR, HAND_T)[1][k], g0) for k in range(2)]
    )
    np.testing.assert_allclose(hess, fd_hess, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_concave(g):
    _, _, hess = conditional_logit_objective(np.array(g), HAND_DR, HAND_T)
    assert np.linalg.eigvalsh(hess).max() <= 1e-12


def test_fit_converges(dgp_panel):
    fit = fit_conditional_logit(dgp_panel)
    assert fit.converged
    assert fit.gradient_norm <= 1e-8
    assert np.linalg.norm(fit.gamma_hat - [1.0, 1.0]) < 0.5
    dr, target = switchers(dgp_panel)
    assert fit.n_switchers == dr.shape[0] == int(np.sum(dgp_panel.d.sum(1) == 1))


def test_no_switchers():
    base = random_panel(n=6, seed=1)
    d = np.ones_like(base.d)
    y = base.w.sum(axis=2)
    panel = DyadicPanel(base.labels, base.src, base.dst, d, y, base.w, base.r)
    with pytest.raises(FirstStepError, match="no switching"):
        fit_conditional_logit(panel)


def test_perfect_separation():
    rng = np.random.default_rng(0)
    dr = rng.normal(size=(60, 2))
    target = (dr @ [1.0, 1.0] > 0).astype(float)
    with pytest.raises(SeparationError):
        fit_conditional_logit(dr=dr, target=target)


def test_rank_deficient():
    dr = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(FirstStepError, match="rank"):
        fit_conditional_logit(dr=dr, target=np.array([1, 0, 1, 0, 1.0]))


def test_relabel_and_order_invariance(dgp_panel):
    base = fit_conditional_logit(dgp_panel).gamma_hat
    perm = np.random.default_rng(5).permutation(dgp_panel.n)
    moved = fit_conditional_logit(dgp_panel.relabel(perm)).gamma_hat
    assert np.max(np.abs(moved - base)) < 1e-10
    dr, target = switchers(dgp_panel)
    order = np.random.default_rng(6).permutation(dr.shape[0])
    shuffled = fit_conditional_logit(dr=dr[order], target=target[order]).gamma_hat
    assert np.max(np.abs(shuffled - base)) < 1e-10


def test_directed_path_doubles_objective(dgp_panel):
    g = np.array([0.8, 1.1])
    v_u = conditional_logit_objective(g, *switchers(dgp_panel))[0]
    v_d = conditional_logit_objective(g, *switchers(dgp_panel.to_directed()))[0]
    assert v_d == pytest.approx(2 * v_u, rel=1e-13)
    fu = fit_conditional_logit(dgp_panel).gamma_hat
    fd = fit_conditional_logit(dgp_panel.to_directed()).gamma_hat
    assert np.max(np.abs(fu - fd)) < 1e-10


def test_round_trip_dict(dgp_panel):
    fit = fit_conditional_logit(dgp_panel)
    again = FirstStepFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(again.gamma_hat, fit.gamma_hat)
    assert again.iterations == fit.iterations
