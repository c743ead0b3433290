import math

import numpy as np
import pytest

from cdpf import rng as streams
from cdpf.errors import IntegrationBlowupError, InvalidModelError
from cdpf.models import lorenz96_model, Lorenz96Params, ou_model
from cdpf.sde import (
    SdeModel,
    TimeGrid,
    euler_maruyama_step,
    propagate_paths,
    sample_kernel,
    simulate_ground_truth,
)


def linear_decay_model():
    return SdeModel(
        dim_x=1,
        dim_w=1,
        drift=lambda x, t: -np.asarray(x, dtype=float),
        diffusion=lambda x, t: np.zeros((1, 1)),
        scalar_noise=0.0,
    )


def test_em_step_linear_decay():
    model = linear_decay_model()
    out = euler_maruyama_step(model, np.array([1.0]), 0.0, 0.1, np.array([0.3]))
    assert out[0] == pytest.approx(0.9, abs=1e-15)


def test_em_step_identity_when_no_drift_no_noise():
    model = SdeModel(
        dim_x=3,
        dim_w=3,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.eye(3),
    )
    x = np.array([1.0, -2.0, 0.5])
    out = euler_maruyama_step(model, x, 0.0, 0.05, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_em_step_rejects_nonpositive_h():
    with pytest.raises(InvalidModelError):
        euler_maruyama_step(linear_decay_model(), np.array([1.0]), 0.0, 0.0, np.array([0.0]))


def test_em_one_step_ou_mean_matches_closed_form():
    # Monte Carlo mean of x + h*(-theta x) + sigma sqrt(h) Z vs x (1 - theta h)
    theta, sigma, h, x0 = 1.0, 1.0, 0.01, 1.0
    model = ou_model(theta, sigma)
    gen = streams.stream(11, 1)
    n = 10**5
    z = gen.standard_normal((n, 1))
    out = euler_maruyama_step(model, np.full((n, 1), x0), 0.0, h, z)
    exact = x0 * (1.0 - theta * h)
    se = sigma * math.sqrt(h) / math.sqrt(n)
    assert abs(float(np.mean(out)) - exact) < 3 * se


def test_sample_kernel_identity_for_zero_model():
    model = SdeModel(
        dim_x=2,
        dim_w=2,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.zeros((2, 2)),
        scalar_noise=0.0,
    )
    x = np.array([3.0, -1.0])
    for span, h in [(0.5, 0.1), (1.0, 0.001)]:
        out = sample_kernel(model, x, 0.0, span, h, streams.stream(0, 1))
        np.testing.assert_array_equal(out, x)


def test_sample_kernel_rejects_nondividing_substep():
    model = linear_decay_model()
    with pytest.raises(InvalidModelError):
        sample_kernel(model, np.array([1.0]), 0.0, 0.5, 0.3, streams.stream(0, 1))


def test_sample_kernel_ou_mean():
    # closed-form one-interval mean 2 e^{-0.5}, tolerance = EM bias + 3 MC SE
    theta, sigma, span, h, x0 = 1.0, 1.0, 0.5, 0.005, 2.0
    model = ou_model(theta, sigma)
    n = 10**5
    j = round(span / h)
    gen = streams.stream(3, 1)
    z = gen.standard_normal((n, j, 1))
    out = propagate_paths(model, np.full((n, 1), x0), 0.0, h, z)
    exact = x0 * math.exp(-theta * span)
    em_bias = abs(x0 * (math.exp(-theta * span) - (1.0 - theta * h) ** j))
    mc_se = math.sqrt(sigma**2 * (1 - math.exp(-2 * theta * span)) / (2 * theta) / n)
    assert abs(float(np.mean(out)) - exact) < em_bias + 3 * mc_se


def test_lorenz96_constant_forcing_state_is_fixed_point():
    params = Lorenz96Params(dim_x=8, forcing=8.0, sigma_x=0.0)
    model = lorenz96_model(params)
    x = np.full(8, params.forcing)
    out = sample_kernel(model, x, 0.0, 0.5, 0.001, streams.stream(7, 1))
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_simulate_ground_truth_m0_returns_initial_only():
    model = linear_decay_model()
    grid = TimeGrid(t0=0.0, h_o=0.1, h=0.01, n_steps=0)
    out = simulate_ground_truth(model, np.array([2.0]), grid, streams.stream(0, 1))
    assert out.shape == (1, 1)
    assert out[0, 0] == 2.0


def test_simulate_ground_truth_constant_for_zero_model():
    model = SdeModel(
        dim_x=2,
        dim_w=2,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.zeros((2, 2)),
        scalar_noise=0.0,
    )
    grid = TimeGrid(t0=0.0, h_o=0.1, h=0.01, n_steps=5)
    out = simulate_ground_truth(model, np.array([1.0, 2.0]), grid, streams.stream(0, 1))
    assert np.all(out == np.array([1.0, 2.0]))


def test_simulate_ground_truth_deterministic_bytes():
    model = ou_model(1.0, 1.0)
    grid = TimeGrid(t0=0.0, h_o=0.1, h=0.005, n_steps=20)
    a = simulate_ground_truth(model, np.array([1.0]), grid, streams.stream(42, streams.TRUTH))
    b = simulate_ground_truth(model, np.array([1.0]), grid, streams.stream(42, streams.TRUTH))
    assert a.tobytes() == b.tobytes()


def test_shape_preserved_each_step():
    model = lorenz96_model(Lorenz96Params(dim_x=6))
    x = np.zeros(6)
    out = euler_maruyama_step(model, x, 0.0, 0.001, np.zeros(6))
    assert out.shape == (6,)
    batch = propagate_paths(model, np.zeros((4, 6)), 0.0, 0.001,
                            streams.stream(1, 1).standard_normal((4, 3, 6)))
    assert batch.shape == (4, 6)


def test_blowup_guard_raises_with_time_and_norm():
    # cubic drift explodes in finite time from x=5 with h=0.5
    model = SdeModel(
        dim_x=1,
        dim_w=1,
        drift=lambda x, t: np.asarray(x, dtype=float) ** 3,
        diffusion=lambda x, t: np.zeros((1, 1)),
        scalar_noise=0.0,
    )
    with pytest.raises(IntegrationBlowupError) as err:
        sample_kernel(model, np.array([5.0]), 0.0, 5.0, 0.5, streams.stream(0, 1))
    assert err.value.sup_norm > 1e8 or math.isinf(err.value.sup_norm)
    assert err.value.time > 0


def test_nan_drift_raises_blowup():
    model = SdeModel(
        dim_x=1,
        dim_w=1,
        drift=lambda x, t: np.full_like(x, np.nan),
        diffusion=lambda x, t: np.zeros((1, 1)),
        scalar_noise=0.0,
    )
    with pytest.raises(IntegrationBlowupError):
        euler_maruyama_step(model, np.array([1.0]), 0.0, 0.1, np.array([0.0]))


def test_time_grid_validation():
    with pytest.raises(InvalidModelError):
        TimeGrid(t0=0.0, h_o=0.1, h=0.03, n_steps=5)
    grid = TimeGrid(t0=0.0, h_o=0.1, h=0.001, n_steps=3)
    assert grid.substeps == 100
    assert grid.time_at(3) == pytest.approx(0.3)


def test_weak_order_em_halves_with_h():
    # OU weak error for f(x) = x, coupled noise across levels plus an
    # exact-kernel control variate; the ratio between successive levels
    # must sit near 2.
    theta, sigma, span, x0 = 1.0, 1.0, 0.2, 2.0
    levels = [0.02, 0.01, 0.005]
    n_paths = 10**6
    gen = streams.stream(1234, 1)
    j_fine = round(span / min(levels))
    z_fine = gen.standard_normal((n_paths, j_fine))
    errors = []
    for h in levels:
        factor = round(h / min(levels))
        j = j_fine // factor
        z = z_fine[:, : j * factor].reshape(n_paths, j, factor).sum(axis=2) / math.sqrt(factor)
        decay = math.exp(-theta * h)
        sd = math.sqrt(sigma**2 * (1 - math.exp(-2 * theta * h)) / (2 * theta))
        x_em = np.full(n_paths, x0)
        x_exact = np.full(n_paths, x0)
        for step in range(j):
            noise = z[:, step]
            x_em = x_em * (1.0 - theta * h) + sigma * math.sqrt(h) * noise
            x_exact = x_exact * decay + sd * noise
        # E[x_exact] is the exact kernel mean, so the coupled difference
        # estimates the weak error with negligible variance
        errors.append(abs(float(np.mean(x_em - x_exact))))
    assert 1.6 < errors[0] / errors[1] < 2.4
    assert 1.6 < errors[1] / errors[2] < 2.4
