import math

import numpy as np
import pytest
from scipy import stats

from cdpf import rng as streams
from cdpf.errors import InvalidModelError, WeightDegeneracyError
from cdpf.filters import (
    FilterOptions,
    FilterProblem,
    KalmanState,
    ParticleEnsemble,
    auxiliary_pf_step,
    bootstrap_pf_step,
    constrained_pf_step,
    effective_sample_size,
    exact_discrete_filter_step,
    kalman_filter,
    kalman_step,
    multinomial_resample,
    normalize_log_weights,
    posterior_mean,
    resample_indices,
    run_filter,
    uniform_ensemble,
)
from cdpf.models import LinearGaussianSsm, ou_exact_kernel, ou_model
from cdpf.sde import TimeGrid
from cdpf.ssm import GaussianObservation


def scalar_lg_model(a=0.9, q=0.5, r=0.5, m0=0.0, p0=1.0):
    return LinearGaussianSsm(
        transition=np.array([[a]]), process_cov=np.array([[q]]),
        obs_matrix=np.array([[1.0]]), obs_cov=np.array([[r]]),
        prior_mean=np.array([m0]), prior_cov=np.array([[p0]]),
    )


# --- weights -----------------------------------------------------------------


def test_normalize_equal_weights():
    w = normalize_log_weights(np.full(5, -3.7))
    np.testing.assert_allclose(w, 0.2, atol=1e-15)


def test_normalize_with_minus_inf():
    w = normalize_log_weights(np.array([0.0, -np.inf]))
    np.testing.assert_array_equal(w, [1.0, 0.0])


def test_normalize_log_ratio():
    w = normalize_log_weights(np.array([0.0, -math.log(3.0)]))
    np.testing.assert_allclose(w, [0.75, 0.25], atol=1e-15)


def test_normalize_all_minus_inf_raises():
    with pytest.raises(WeightDegeneracyError):
        normalize_log_weights(np.array([-np.inf, -np.inf]))


def test_ess_bounds():
    assert effective_sample_size(np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert effective_sample_size(np.full(10, 0.1)) == pytest.approx(10.0)


# --- resampling --------------------------------------------------------------


def test_resample_point_mass():
    states = np.array([[1.0], [2.0], [3.0]])
    out = multinomial_resample(states, np.array([1.0, 0.0, 0.0]), streams.stream(0, 1))
    np.testing.assert_array_equal(out, np.ones((3, 1)))


def test_resample_offspring_counts_chi_square():
    # uniform weights: total offspring over R repetitions ~ Multinomial(N R, 1/N)
    n, reps = 16, 1000
    gen = streams.stream(77, 1)
    counts = np.zeros(n)
    for _ in range(reps):
        idx = resample_indices(np.full(n, 1.0 / n), gen)
        counts += np.bincount(idx, minlength=n)
    expected = reps  # N R / N draws per cell
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < stats.chi2.ppf(0.99, df=n - 1)


def test_resample_unbiased_under_nonuniform_weights():
    n, reps = 8, 10**4
    gen = streams.stream(78, 1)
    w = np.array([0.3, 0.2, 0.15, 0.1, 0.1, 0.07, 0.05, 0.03])
    counts = np.zeros(n)
    for _ in range(reps):
        counts += np.bincount(resample_indices(w, gen), minlength=n)
    mean_counts = counts / reps
    se = np.sqrt(n * w * (1 - w) / reps)
    assert np.all(np.abs(mean_counts - n * w) < 4 * se)


# --- bootstrap step ----------------------------------------------------------


def identity_propagate(states):
    return states.copy(), np.ones(states.shape[0], dtype=int)


def test_bootstrap_constant_likelihood_mean_is_propagated_average():
    states = streams.stream(4, 1).standard_normal((50, 2))
    ens = uniform_ensemble(states)
    _, trace = bootstrap_pf_step(
        ens, identity_propagate, lambda x: np.zeros(x.shape[0]), streams.stream(4, 2)
    )
    np.testing.assert_allclose(trace.mean, states.mean(axis=0), atol=1e-12)
    assert trace.ess == pytest.approx(50.0)
    assert trace.log_ml_increment == pytest.approx(0.0, abs=1e-12)


def test_bootstrap_single_particle_kept():
    ens = uniform_ensemble(np.array([[3.0]]))
    out, trace = bootstrap_pf_step(
        ens, identity_propagate, lambda x: np.array([-40.0]), streams.stream(1, 1)
    )
    np.testing.assert_array_equal(out.states, [[3.0]])
    assert trace.ess == pytest.approx(1.0)


def test_bootstrap_degeneracy_raises_with_max_loglik():
    ens = uniform_ensemble(np.zeros((4, 1)))
    with pytest.raises(WeightDegeneracyError) as err:
        bootstrap_pf_step(
            ens, identity_propagate, lambda x: np.full(4, -np.inf), streams.stream(1, 1)
        )
    assert err.value.max_log_likelihood == -np.inf


def _pf_posterior_mean_lg(model, observations, n_particles, seed):
    """Bootstrap PF on a linear-Gaussian model with exact one-step kernels."""
    a = float(model.transition[0, 0])
    sq = math.sqrt(float(model.process_cov[0, 0]))
    obs = GaussianObservation(obs_matrix=model.obs_matrix, noise_cov=model.obs_cov)
    gen = streams.stream(seed, 9)
    states = model.prior_mean[0] + math.sqrt(model.prior_cov[0, 0]) * gen.standard_normal(
        (n_particles, 1)
    )
    ens = uniform_ensemble(states)
    means = []
    from cdpf.ssm import gaussian_log_likelihood

    for y in observations:
        def propagate(s):
            return a * s + sq * gen.standard_normal(s.shape), np.ones(s.shape[0], dtype=int)

        ens, trace = bootstrap_pf_step(
            ens, propagate, lambda x, _y=y: gaussian_log_likelihood(obs, _y, x), gen
        )
        means.append(trace.mean[0])
    return np.array(means)


def test_bootstrap_matches_kalman_on_scalar_model():
    model = scalar_lg_model()
    gen = streams.stream(2024, 1)
    xs = [float(gen.standard_normal())]
    ys = []
    for _ in range(20):
        xs.append(0.9 * xs[-1] + math.sqrt(0.5) * float(gen.standard_normal()))
        ys.append(xs[-1] + math.sqrt(0.5) * float(gen.standard_normal()))
    ys = np.array(ys).reshape(-1, 1)
    k_means, k_covs = kalman_filter(model, ys)
    n = 10**5
    pf_means = _pf_posterior_mean_lg(model, ys, n, seed=3)
    tol = 3.0 * np.sqrt(k_covs[:, 0, 0]) / math.sqrt(n)
    # sequential MC error compounds slightly; allow a small multiple
    assert np.all(np.abs(pf_means - k_means[:, 0]) < 5 * tol)


# --- constrained step --------------------------------------------------------


def test_constrained_step_is_bootstrap_step_for_whole_space():
    states = streams.stream(6, 1).standard_normal((30, 2))
    loglik = lambda x: -0.5 * np.sum(x * x, axis=-1)
    a, ta = bootstrap_pf_step(uniform_ensemble(states), identity_propagate, loglik,
                              streams.stream(6, 2))
    b, tb = constrained_pf_step(uniform_ensemble(states), identity_propagate, loglik,
                                streams.stream(6, 2))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(ta.mean, tb.mean)


# --- auxiliary step ----------------------------------------------------------


def test_auxiliary_with_flat_likelihood_matches_propagated_average():
    states = streams.stream(8, 1).standard_normal((40, 1))
    ens = uniform_ensemble(states)
    _, trace = auxiliary_pf_step(
        ens,
        identity_propagate,
        lambda s: s,
        lambda x: np.zeros(x.shape[0]),
        streams.stream(8, 2),
    )
    # flat weights: ancestors uniform, second-stage weights uniform
    assert trace.ess == pytest.approx(40.0)


def test_auxiliary_deterministic_kernel_second_stage_flat():
    # when propagation equals the predictive point, second-stage weights
    # cancel exactly and the ESS is maximal
    states = streams.stream(9, 1).standard_normal((25, 1))
    loglik = lambda x: -0.5 * np.sum(x * x, axis=-1)
    _, trace = auxiliary_pf_step(
        uniform_ensemble(states), identity_propagate, lambda s: s, loglik,
        streams.stream(9, 2),
    )
    assert trace.ess == pytest.approx(25.0)


def test_auxiliary_matches_kalman_on_scalar_model():
    model = scalar_lg_model()
    gen = streams.stream(31, 1)
    ys = []
    x = 0.0
    for _ in range(10):
        x = 0.9 * x + math.sqrt(0.5) * float(gen.standard_normal())
        ys.append(x + math.sqrt(0.5) * float(gen.standard_normal()))
    ys = np.array(ys).reshape(-1, 1)
    k_means, k_covs = kalman_filter(model, ys)

    from cdpf.ssm import gaussian_log_likelihood

    obs = GaussianObservation(obs_matrix=model.obs_matrix, noise_cov=model.obs_cov)
    n = 10**5
    gen2 = streams.stream(32, 1)
    ens = uniform_ensemble(gen2.standard_normal((n, 1)))
    means = []
    for y in ys:
        def propagate(s):
            return 0.9 * s + math.sqrt(0.5) * gen2.standard_normal(s.shape), np.ones(
                s.shape[0], dtype=int
            )

        ens, trace = auxiliary_pf_step(
            ens, propagate, lambda s: 0.9 * s,
            lambda xx, _y=y: gaussian_log_likelihood(obs, _y, xx), gen2,
        )
        means.append(trace.mean[0])
    tol = 5 * 3.0 * np.sqrt(k_covs[:, 0, 0]) / math.sqrt(n)
    assert np.all(np.abs(np.array(means) - k_means[:, 0]) < tol)


# --- Kalman ------------------------------------------------------------------


def test_kalman_no_information_limit():
    model = scalar_lg_model(a=0.8, q=0.0, r=1e12, m0=2.0, p0=1.0)
    state = kalman_step(KalmanState(model.prior_mean, model.prior_cov), model, np.array([100.0]))
    assert state.mean[0] == pytest.approx(1.6, abs=1e-6)


def test_kalman_scalar_hand_case():
    # A=1, Q=1, R=1, prior (0, 1), y=2: predict (0, 2), gain 2/3,
    # posterior mean 4/3, variance 2/3
    model = scalar_lg_model(a=1.0, q=1.0, r=1.0, m0=0.0, p0=1.0)
    state = kalman_step(KalmanState(model.prior_mean, model.prior_cov), model, np.array([2.0]))
    assert state.mean[0] == pytest.approx(4.0 / 3.0, abs=1e-12)
    assert state.covariance[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_kalman_covariance_stays_symmetric_psd():
    gen = streams.stream(44, 1)
    a = np.array([[0.9, 0.1], [-0.2, 0.8]])
    model = LinearGaussianSsm(
        transition=a, process_cov=0.3 * np.eye(2),
        obs_matrix=np.array([[1.0, 0.0]]), obs_cov=np.array([[0.4]]),
        prior_mean=np.zeros(2), prior_cov=np.eye(2),
    )
    state = KalmanState(model.prior_mean, model.prior_cov)
    for _ in range(1000):
        state = kalman_step(state, model, gen.standard_normal(1))
        assert np.allclose(state.covariance, state.covariance.T, atol=1e-10)
        assert np.min(np.linalg.eigvalsh(state.covariance)) >= -1e-10


# --- exact discrete filter ---------------------------------------------------


def test_discrete_filter_pure_prediction():
    k = np.array([[0.7, 0.3], [0.2, 0.8]])
    prior = np.array([0.4, 0.6])
    post, z = exact_discrete_filter_step(prior, k, np.ones(2))
    np.testing.assert_allclose(post, k.T @ prior, atol=1e-15)
    assert z == pytest.approx(1.0)


def test_discrete_filter_bayes_update():
    post, _ = exact_discrete_filter_step(
        np.array([0.5, 0.5]), np.eye(2), np.array([2.0, 1.0])
    )
    np.testing.assert_allclose(post, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


def test_discrete_filter_composition_associative():
    gen = streams.stream(12, 1)
    from cdpf.models import mixing_discrete_ssm

    ssm = mixing_discrete_ssm(5, 0.4, gen, n_steps=6)
    p = ssm.prior.copy()
    for n in range(6):
        p, _ = exact_discrete_filter_step(p, ssm.transition, ssm.likelihoods[n])
    # single-pass matrix recursion
    q = ssm.prior.copy()
    for n in range(6):
        unnorm = ssm.likelihoods[n] * (ssm.transition.T @ q)
        q = unnorm / unnorm.sum()
    np.testing.assert_allclose(p, q, atol=1e-14)


# --- posterior mean ----------------------------------------------------------


def test_posterior_mean_cases():
    single = ParticleEnsemble(np.array([[7.0]]), np.array([0.0]), normalized=True)
    assert posterior_mean(single)[0] == pytest.approx(7.0)
    pair = uniform_ensemble(np.array([[1.0], [-1.0]]))
    assert posterior_mean(pair)[0] == pytest.approx(0.0)
    weighted = ParticleEnsemble(
        np.array([[0.0], [4.0]]), np.log(np.array([0.75, 0.25])), normalized=True
    )
    assert posterior_mean(weighted)[0] == pytest.approx(1.0)


# --- run_filter --------------------------------------------------------------


def ou_problem(m=5, h_o=0.1, h=0.01, sigma_y2=0.5):
    model = ou_model(1.0, 1.0)
    grid = TimeGrid(t0=0.0, h_o=h_o, h=h, n_steps=m)
    obs = GaussianObservation(obs_matrix=np.array([[1.0]]), noise_cov=np.array([[sigma_y2]]))
    return FilterProblem(sde=model, grid=grid, obs=obs,
                         prior_mean=np.zeros(1), prior_std=1.0)


def test_run_filter_m0_initial_stats_only():
    problem = ou_problem(m=0)
    result = run_filter(problem, np.zeros((0, 1)), FilterOptions(n_particles=20), seed=1)
    assert result.estimates.shape == (0, 1)
    assert result.initial_mean.shape == (1,)


def test_run_filter_sequential_vs_parallel_identical():
    problem = ou_problem(m=8)
    gen = streams.stream(3, streams.TRUTH)
    ys = gen.standard_normal((8, 1))
    opts_seq = FilterOptions(algorithm="bootstrap", n_particles=64, parallelism="sequential")
    opts_par = FilterOptions(algorithm="bootstrap", n_particles=64, parallelism="auto")
    a = run_filter(problem, ys, opts_seq, seed=99)
    b = run_filter(problem, ys, opts_par, seed=99)
    assert a.estimates.tobytes() == b.estimates.tobytes()
    np.testing.assert_array_equal(a.trace.ess, b.trace.ess)


def test_run_filter_invariant_under_initial_permutation():
    problem = ou_problem(m=6)
    ys = streams.stream(5, streams.TRUTH).standard_normal((6, 1))
    init = streams.stream(5, streams.PRIOR).standard_normal((32, 1))
    opts = FilterOptions(algorithm="bootstrap", n_particles=32)
    a = run_filter(problem, ys, opts, seed=7, initial_states=init)
    perm = streams.stream(5, 99).permutation(32)
    b = run_filter(problem, ys, opts, seed=7, initial_states=init[perm])
    assert a.estimates.tobytes() == b.estimates.tobytes()


def test_run_filter_rejection_mode_whole_space_matches_bootstrap():
    problem = ou_problem(m=5)
    ys = streams.stream(6, streams.TRUTH).standard_normal((5, 1))
    boot = run_filter(problem, ys, FilterOptions(algorithm="bootstrap", n_particles=40), seed=11)
    rej = run_filter(
        problem, ys,
        FilterOptions(algorithm="constrained-rejection", n_particles=40,
                      threshold=-1e12, c0_side=None),
        seed=11,
    )
    assert boot.estimates.tobytes() == rej.estimates.tobytes()
    assert np.all(rej.trace.attempts_max == 1)


def test_run_filter_constrained_matches_kalman_with_generous_threshold():
    # Theorem-2 regime: a huge constraint set leaves the posterior untouched
    m = 10
    problem = ou_problem(m=m, h_o=0.1, h=0.001)
    kernel = ou_exact_kernel(1.0, 1.0, 0.1)
    lg = LinearGaussianSsm(
        transition=np.array([[kernel.decay]]), process_cov=np.array([[kernel.variance]]),
        obs_matrix=np.array([[1.0]]), obs_cov=np.array([[0.5]]),
        prior_mean=np.zeros(1), prior_cov=np.array([[1.0]]),
    )
    gen = streams.stream(2025, 1)
    x = float(gen.standard_normal())
    ys = []
    for _ in range(m):
        x = kernel.decay * x + math.sqrt(kernel.variance) * float(gen.standard_normal())
        ys.append(x + math.sqrt(0.5) * float(gen.standard_normal()))
    ys = np.array(ys).reshape(-1, 1)
    k_means, k_covs = kalman_filter(lg, ys)
    n = 20000
    result = run_filter(
        problem, ys,
        FilterOptions(algorithm="constrained-rejection", n_particles=n, threshold=-50.0),
        seed=5,
    )
    tol = 3.0 * np.sqrt(k_covs[:, 0, 0]) / math.sqrt(n)
    # small extra slack: EM kernel bias at h=1e-3 plus sequential MC error
    assert np.all(np.abs(result.estimates[:, 0] - k_means[:, 0]) < 5 * tol + 0.01)


def test_run_filter_rejection_postcondition():
    problem = ou_problem(m=4)
    truth_gen = streams.stream(8, streams.TRUTH)
    ys = 0.3 * truth_gen.standard_normal((4, 1))
    result = run_filter(
        problem, ys,
        FilterOptions(algorithm="constrained-rejection", n_particles=30, threshold=-4.0,
                      c0_side=6.0, keep_steps=(1, 2, 3, 4)),
        seed=13,
    )
    from cdpf.ssm import gaussian_log_likelihood

    for n, (states, _) in result.kept.items():
        logg = gaussian_log_likelihood(problem.obs, ys[n - 1], states)
        assert np.all(logg > -4.0)
    assert np.all(result.trace.attempts_total >= 30)


def test_run_filter_paper_mode_survives_degeneracy():
    problem = ou_problem(m=3)
    ys = np.full((3, 1), 1e200)  # squared residual overflows, log g = -inf
    opts = FilterOptions(algorithm="bootstrap", n_particles=16)
    with pytest.raises(WeightDegeneracyError):
        run_filter(problem, ys, opts, seed=1)
    softened = FilterOptions(algorithm="bootstrap", n_particles=16, paper_mode=True)
    result = run_filter(problem, ys, softened, seed=1)
    assert result.degenerate_steps == 3
    assert np.all(result.trace.degenerate)
    assert np.all(np.isfinite(result.estimates))


def test_run_filter_rejects_mismatched_observation_count():
    problem = ou_problem(m=4)
    with pytest.raises(InvalidModelError):
        run_filter(problem, np.zeros((3, 1)), FilterOptions(n_particles=8), seed=0)


def test_filter_options_validation():
    with pytest.raises(InvalidModelError):
        FilterOptions(algorithm="smoother")
    with pytest.raises(InvalidModelError):
        FilterOptions(n_particles=0)
    with pytest.raises(InvalidModelError):
        FilterOptions(parallelism="cluster")
