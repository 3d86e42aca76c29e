import warnings

import numpy as np
import pytest

from nth_lab import linalg
from nth_lab.dynamics import (
    ShiftedParams,
    StepSizeWarning,
    FlowState,
    advance,
    backward_vectors,
    default_step,
    flow_step,
    grad_loss,
    grad_loss_factors,
    grad_theta_f,
    integrate,
    loss,
    residuals,
    skip_matrix,
    skip_product,
    spectral_diag,
)
from nth_lab.experiments import grad_check, loss_grad_check
from nth_lab.model import NetworkConfig, forward, init_params, make_dataset, network_output


def _self_labelled(cfg, p, ds):
    return p, ds.with_labels(network_output(forward(cfg, p, ds.inputs), p), bounded=False)


@pytest.fixture
def small():
    cfg = NetworkConfig(d=4, m=16, L=3)
    return cfg, init_params(cfg, 0), make_dataset(5, 4, 0)


def test_skip_matrix_identity_cases(small):
    cfg, p, ds = small
    cache = forward(cfg, p, ds.inputs[0])
    np.testing.assert_array_equal(skip_matrix(cfg, p, cache, 2, c_res=0.0), np.eye(cfg.m))
    zero = NetworkConfig(d=4, m=16, L=3, activation="zero")
    np.testing.assert_array_equal(skip_matrix(zero, p, forward(zero, p, ds.inputs[0]), 3), np.eye(cfg.m))
    with pytest.raises(IndexError):
        skip_matrix(cfg, p, cache, 1)


def test_skip_matrix_norm_bound():
    cfg = NetworkConfig(d=4, m=128, L=4)
    p = init_params(cfg, 1)
    cache = forward(cfg, p, make_dataset(1, 4, 1).inputs[0])
    for l in range(2, 5):
        E = skip_matrix(cfg, p, cache, l)
        bound = 1 + (cfg.c_res / cfg.L) * linalg.spectral_norm(p.layer(l)) / np.sqrt(cfg.m)
        assert linalg.spectral_norm(E) <= bound * (1 + 1e-9)


def test_empty_skip_product_is_identity(small):
    cfg, p, ds = small
    cache = forward(cfg, p, ds.inputs[0])
    prod = skip_product(cfg, p, cache, 3, 2)
    rng = linalg.make_rng(4)
    for _ in range(10):
        v = rng.standard_normal(cfg.m)
        np.testing.assert_array_equal(prod.matrix @ v, v)


def test_backward_vectors_match_explicit_products(small):
    cfg, p, ds = small
    cache = forward(cfg, p, ds.inputs[1])
    u = backward_vectors(cfg, p, cache)
    for l in range(1, cfg.L + 1):
        E = skip_product(cfg, p, cache, l + 1, cfg.L).matrix
        np.testing.assert_allclose(u[l], E.T @ p.a, rtol=1e-13, atol=1e-13)


def test_grad_f_structure(small):
    cfg, p, ds = small
    cache = forward(cfg, p, ds.inputs[0])
    g = grad_theta_f(cfg, p, cache)
    np.testing.assert_array_equal(g.a, cache.x[-1])
    q = p.copy()
    q.a[:] = 0.0
    gz = grad_theta_f(cfg, q, cache)
    assert not np.any(gz.W1) and not np.any(gz.W)
    # each weight block is rank one
    for l in range(2, cfg.L + 1):
        assert np.linalg.matrix_rank(g.W[l - 2]) == 1


@pytest.mark.parametrize("activation", ["softplus", "sigmoid", "identity"])
def test_grad_f_finite_differences(activation):
    cfg = NetworkConfig(d=4, m=16, L=3, activation=activation)
    p = init_params(cfg, 3)
    ds = make_dataset(5, 4, 3)
    rep = grad_check(cfg, p, ds, probes=80, rng=linalg.make_rng(0))
    assert rep["max_rel_error"] <= 1e-6


def test_grad_check_names_corrupted_block(small):
    cfg, p, ds = small
    rep = grad_check(cfg, p, ds, probes=200, rng=linalg.make_rng(0), fault=("W2", 5))
    assert rep["max_rel_error"] > 1e-6
    assert rep["worst"]["block"] == "W2" and rep["worst"]["index"] == 5


def test_grad_loss_cases(small):
    cfg, p, ds = small
    q, fitted = _self_labelled(cfg, p, ds)
    g, r = grad_loss(cfg, q, fitted)
    assert not np.any(r) and g.frobenius() == 0.0
    one = make_dataset(1, 4, 7)
    g1, r1 = grad_loss(cfg, p, one)
    gf = grad_theta_f(cfg, p, forward(cfg, p, one.inputs[0]))
    np.testing.assert_allclose(g1.flatten(), r1[0] * gf.flatten(), rtol=1e-13, atol=1e-15)
    assert loss_grad_check(cfg, p, ds, 80, linalg.make_rng(1)) <= 1e-6


def test_grad_loss_is_sum_of_sample_gradients(small):
    cfg, p, ds = small
    g, r = grad_loss(cfg, p, ds)
    cache = forward(cfg, p, ds.inputs)
    ref = sum(r[i] * grad_theta_f(cfg, p, cache.sample(i)).flatten() for i in range(ds.n)) / ds.n
    np.testing.assert_allclose(g.flatten(), ref, rtol=1e-12, atol=1e-15)


def test_shifted_params_match_dense(small):
    cfg, p, ds = small
    fg, _ = grad_loss_factors(cfg, p, ds)
    shifted = ShiftedParams(p, [(-0.3, fg)])
    dense = p.axpy(-0.3, fg.dense())
    X = forward(cfg, p, ds.inputs).x[1]
    np.testing.assert_allclose(shifted.apply(2, X), dense.apply(2, X), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(shifted.apply_T(3, X), dense.apply_T(3, X), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(shifted.materialize().flatten(), dense.flatten(), rtol=1e-14, atol=1e-15)


def test_dense_rk4_equivalence(small):
    cfg, p, ds = small
    h = 0.2

    def vel(q):
        return grad_loss(cfg, q, ds)[0] * -1.0

    k1 = vel(p)
    k2 = vel(p.axpy(h / 2, k1))
    k3 = vel(p.axpy(h / 2, k2))
    k4 = vel(p.axpy(h, k3))
    ref = p.axpy(h / 6, k1 + 2.0 * k2 + 2.0 * k3 + k4)
    np.testing.assert_allclose(advance(cfg, p, ds, h).flatten(), ref.flatten(), rtol=1e-13, atol=1e-14)


def test_zero_gradient_step_leaves_params(small):
    cfg, p, ds = small
    q, fitted = _self_labelled(cfg, p, ds)
    state = flow_step(FlowState(0.0, q, 0.1), cfg, fitted)
    np.testing.assert_array_equal(state.params.flatten(), q.flatten())
    assert state.t == 0.1


def test_rk4_against_richardson_euler(small):
    cfg, p, ds = small
    T = 0.5

    def run(h, scheme):
        return integrate(cfg, p, ds, T, h, scheme, check_loss=False).params.flatten()

    gaps = []
    for h in (0.05, 0.025):
        richardson = 2 * run(h / 2, "euler") - run(h, "euler")
        gaps.append(np.max(np.abs(run(h, "rk4") - richardson)))
    order = np.log2(gaps[0] / gaps[1])
    assert 1.7 <= order <= 2.3


def test_step_decreases_loss_on_default_config():
    cfg = NetworkConfig(d=4, m=512, L=4)
    ds = make_dataset(8, 4, 0)
    p = init_params(cfg, 0)
    for scheme in ("euler", "rk4"):
        after = flow_step(FlowState(0.0, p, 1e-3, scheme), cfg, ds).params
        assert loss(cfg, after, ds) <= loss(cfg, p, ds)


def test_large_euler_step_warns(small):
    cfg, p, ds = small
    with pytest.warns(StepSizeWarning):
        state = flow_step(FlowState(0.0, p, 50.0, "euler"), cfg, ds)
    assert state.warnings


def test_integrate_lands_on_T_and_loss_is_monotone(small):
    cfg, p, ds = small
    seen = []
    with warnings.catch_warnings():
        warnings.simplefilter("error", StepSizeWarning)
        final = integrate(cfg, p, ds, 1.0, 0.03, observer=lambda s: seen.append((s.t, loss(cfg, s.params, ds))))
    assert final.t == 1.0 and seen[0][0] == 0.0
    losses = [v for _, v in seen]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_flow_state_validation(small):
    _, p, _ = small
    with pytest.raises(ValueError):
        FlowState(0.0, p, 0.0)
    with pytest.raises(ValueError):
        FlowState(0.0, p, 0.1, "midpoint")


def test_default_step():
    assert default_step(0.01, 8) == pytest.approx(0.8)
    assert default_step(0.01, 8, lambda_max=16.0) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        default_step(0.0, 8)


def test_spectral_diag_floor_and_init(small):
    cfg, p, _ = small
    zero = p * 0.0
    assert spectral_diag(cfg, zero).xi == 1.0
    cfg = NetworkConfig(d=4, m=256, L=3)
    for seed in range(20):
        diag = spectral_diag(cfg, init_params(cfg, seed), tol=1e-8)
        assert 1.0 <= diag.xi <= 3.0
        assert diag.omega >= np.sqrt(cfg.m) * 0.9


def test_xi_stays_bounded_along_flow():
    cfg = NetworkConfig(d=4, m=1024, L=3)
    ds = make_dataset(8, 4, 0)
    p = init_params(cfg, 0)
    xi0 = spectral_diag(cfg, p, tol=1e-8).xi
    xs = []

    def observe(state):
        if len(xs) < 1000 and round(state.t / 2.5, 9) == round(state.t / 2.5):
            xs.append(spectral_diag(cfg, state.params, tol=1e-8).xi)

    integrate(cfg, p, ds, 10.0, 0.05, observer=observe)
    assert len(xs) >= 4
    assert max(xs) <= 1.1 * xi0


def test_residuals_and_loss_agree(small):
    cfg, p, ds = small
    r = residuals(cfg, p, ds)
    assert loss(cfg, p, ds) == pytest.approx(0.5 * np.mean(r**2))
