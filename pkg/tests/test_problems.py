import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abssim.errors import DivergenceError, InputError
from abssim.problems import (HyperParams, LogisticProblem, ProblemSpec, QuadraticProblem,
                             batch_gradient, build_problem, full_gradient, full_loss,
                             local_sgd_steps, make_partition)

from conftest import central_difference


def test_quadratic_loss_single_sample():
    p = QuadraticProblem([[1.0, 0.0]], [0.0])
    assert full_loss(p, np.zeros(2)) == 0.0
    assert full_loss(p, np.array([2.0, 0.0])) == 2.0


def test_logistic_loss_at_zero_is_ln2():
    p = LogisticProblem.synthetic(dim=8, samples=64, seed=7)
    assert full_loss(p, np.zeros(8)) == pytest.approx(math.log(2), abs=1e-15)


def test_dimension_mismatch_rejected(quad):
    with pytest.raises(InputError):
        full_loss(quad, np.zeros(quad.dim + 1))


def test_non_finite_loss_is_divergence(quad):
    with pytest.raises(DivergenceError):
        full_loss(quad, np.full(quad.dim, np.inf))


def test_gradient_matches_finite_differences(any_problem):
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.standard_normal(any_problem.dim)
        fd = central_difference(any_problem.loss, w)
        g = full_gradient(any_problem, w)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-8)


def test_quadratic_gradient_closed_form(quad):
    w = np.random.default_rng(3).standard_normal(quad.dim)
    per_sample = quad.sample_grads(w, np.arange(quad.n_samples)).mean(axis=0)
    np.testing.assert_allclose(per_sample, quad.A @ w - quad.b, rtol=0, atol=1e-12)


def test_quadratic_optimum_is_stationary(quad):
    g = batch_gradient(quad, quad.optimum, np.arange(quad.n_samples), quad.n_samples, None)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_full_batch_equals_partition_gradient(quad):
    part = np.arange(0, 120, 3)
    w = np.ones(quad.dim)
    g = batch_gradient(quad, w, part, len(part), np.random.default_rng(0))
    Xp, yp = quad.X[part], quad.y[part]
    np.testing.assert_allclose(g, Xp.T @ (Xp @ w - yp) / len(part), atol=1e-12)


def test_batch_gradient_matches_scalar_loop(logistic):
    part = np.arange(logistic.n_samples)
    w = np.linspace(-0.5, 0.5, 8)
    g = batch_gradient(logistic, w, part, 4, np.random.default_rng(123))
    # independent oracle: same documented draw, per-sample scalar arithmetic
    idx = part[np.random.default_rng(123).integers(0, len(part), size=4)]
    ref = [0.0] * 8
    for i in idx:
        x, y = logistic.X[i], logistic.y[i]
        z = sum(x[j] * w[j] for j in range(8))
        s = 1.0 / (1.0 + math.exp(y * z))
        for j in range(8):
            ref[j] += -y * s * x[j] / 4
    np.testing.assert_allclose(g, ref, rtol=0, atol=1e-12)


def test_batch_gradient_errors(quad):
    rng = np.random.default_rng(0)
    with pytest.raises(InputError):
        batch_gradient(quad, np.zeros(quad.dim), np.array([], dtype=int), 1, rng)
    with pytest.raises(InputError):
        batch_gradient(quad, np.zeros(quad.dim), np.arange(3), 4, rng)


def test_batch_gradient_unbiased(logistic):
    w = np.full(8, 0.3)
    part = np.arange(logistic.n_samples)
    rng = np.random.default_rng(9)
    draws = np.array([batch_gradient(logistic, w, part, 4, rng) for _ in range(10_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - logistic.grad(w)) <= 4 * se)


def test_local_sgd_single_full_batch_step(quad):
    part = np.arange(quad.n_samples)
    hp = HyperParams(lr=0.05, batch_size=quad.n_samples, local_steps=1)
    w0 = np.ones(quad.dim)
    w1, upd, _ = local_sgd_steps(quad, w0, hp, part, np.random.default_rng(0))
    np.testing.assert_allclose(upd, 0.05 * (quad.A @ w0 - quad.b), atol=1e-12)
    np.testing.assert_allclose(w1, w0 - upd, atol=1e-15)


def test_local_sgd_zero_step(quad):
    hp = HyperParams(lr=0.0, batch_size=8, local_steps=5)
    w0 = np.arange(quad.dim, dtype=float)
    w1, upd, _ = local_sgd_steps(quad, w0, hp, np.arange(quad.n_samples), np.random.default_rng(0))
    np.testing.assert_array_equal(w1, w0)
    np.testing.assert_array_equal(upd, 0.0)


def test_local_sgd_matches_unrolled_loop():
    p = QuadraticProblem.synthetic(dim=10, samples=400, seed=4)
    part = np.arange(0, 400, 2)
    hp = HyperParams(lr=0.1, batch_size=32, local_steps=10)
    w0 = np.zeros(10)
    w_end, upd, last = local_sgd_steps(p, w0, hp, part, np.random.default_rng(77))

    rng = np.random.default_rng(77)
    w = w0.copy()
    for u in range(10):
        idx = part[rng.integers(0, len(part), size=32)]
        Xb, yb = p.X[idx], p.y[idx]
        r = Xb @ w - yb
        if u == 9:
            ref_last = 0.5 * np.mean(r ** 2)
        w = w - 0.1 * (Xb.T @ r) / 32
    np.testing.assert_allclose(w_end, w, rtol=0, atol=1e-12)
    np.testing.assert_allclose(upd, w0 - w, rtol=0, atol=1e-12)
    assert last == pytest.approx(ref_last, abs=1e-12)


def test_local_sgd_divergence_carries_round():
    p = QuadraticProblem.synthetic(dim=4, samples=40, seed=0, curvature=1e200)
    hp = HyperParams(lr=10.0, batch_size=40, local_steps=50)
    with pytest.raises(DivergenceError) as info:
        local_sgd_steps(p, np.ones(4), hp, np.arange(40), np.random.default_rng(0), round_index=7)
    assert info.value.round_index == 7


def test_partition_small_cases():
    rng = np.random.default_rng(0)
    parts = make_partition(8, 8, rng)
    assert sorted(int(p[0]) for p in parts) == list(range(8))
    assert all(len(p) == 1 for p in parts)
    (only,) = make_partition(8, 1, rng)
    assert sorted(only.tolist()) == list(range(8))
    with pytest.raises(InputError):
        make_partition(10, 3, rng)


@settings(max_examples=60, deadline=None)
@given(n_workers=st.integers(1, 12), per=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_partition_is_disjoint_equal_cover(n_workers, per, seed):
    M = n_workers * per
    parts = make_partition(M, n_workers, np.random.default_rng(seed))
    assert len(parts) == n_workers
    assert all(len(p) == per for p in parts)
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(M))


def test_partition_seed_3():
    parts = make_partition(100, 10, np.random.default_rng(3))
    assert len(set(np.concatenate(parts).tolist())) == 100 and all(len(p) == 10 for p in parts)


@pytest.mark.parametrize("kind", ["quadratic", "logistic", "tiny-mlp"])
def test_build_problem(kind):
    p = build_problem(ProblemSpec(kind=kind, dim=5, samples=50, widths=(2, 3, 1)))
    assert p.initial_model().shape == (p.dim,)
    assert np.isfinite(p.loss(p.initial_model()))


def test_quadratic_exposes_exact_constants():
    p = QuadraticProblem.synthetic(dim=8, samples=200, seed=0, condition=20, curvature=2.0)
    assert p.smoothness == pytest.approx(2.0, rel=1e-12)
    eig = np.linalg.eigvalsh(p.A)
    assert eig[0] == pytest.approx(0.1, rel=1e-10)
    assert p.optimal_loss <= p.loss(p.optimum + 1e-3)


def test_hyperparams_validation():
    with pytest.raises(InputError):
        HyperParams(lr=-1.0)
    with pytest.raises(InputError):
        HyperParams(batch_size=0)
    with pytest.raises(InputError):
        HyperParams(local_steps=0)
