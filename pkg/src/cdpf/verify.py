"""Numerical verification suites for the stability, approximation, Monte
Carlo and discretisation guarantees.

Each suite runs at desk scale with frozen tolerances and returns a report of
named checks; the CLI prints the measured quantities and fails (exit code 4)
if any check misses its window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams
from .analysis import (
    clamped_gaussian_mean,
    constraint_gap_exact,
    contraction_profile,
    fit_rate,
    mixing_constant,
)
from .filters import (
    bootstrap_pf_step,
    kalman_filter,
    normalize_log_weights,
    uniform_ensemble,
)
from .models import (
    DiscreteSsm,
    LinearGaussianSsm,
    mixing_discrete_ssm,
    ou_exact_kernel,
    truncate_discrete_kernel,
)
from .ssm import GaussianObservation, gaussian_log_likelihood

# frozen acceptance windows
MC_RATE_SLOPE_WINDOW = (-0.65, -0.35)
WEAK_ORDER_SLOPE_WINDOW = (0.7, 1.3)
EXACT_ARITHMETIC_TOL = 1e-12


@dataclass
class Check:
    name: str
    passed: bool
    measured: str
    requirement: str


@dataclass
class SuiteReport:
    suite: str
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, measured: str, requirement: str) -> None:
        self.checks.append(Check(name, bool(passed), measured, requirement))

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"[{status}] {self.suite}/{c.name}: {c.measured} (need {c.requirement})")
        return out


# ---------------------------------------------------------------------------
# stability: exact TV contraction against the mixing bound
# ---------------------------------------------------------------------------


def verify_stability(seed: int = 0, n_fixtures: int = 20, n_max: int = 50) -> SuiteReport:
    """TV contraction of exact filters never exceeds the mixing bound, on
    random mixing fixtures and on truncated-kernel fixtures."""
    report = SuiteReport("stability")
    gen = streams.stream(seed, 1)
    worst_margin = -math.inf
    for k in range(n_fixtures):
        n_states = int(gen.integers(2, 11))
        target = float(gen.uniform(0.15, 0.85))
        ssm = mixing_discrete_ssm(n_states, target, gen, n_steps=n_max)
        mu, eta = gen.dirichlet(np.ones(n_states), size=2)
        ratios, bounds = contraction_profile(ssm, mu, eta, n_max)
        excess = float(np.max(ratios - bounds))
        worst_margin = max(worst_margin, excess)
    report.add(
        "mixing-contraction",
        worst_margin <= EXACT_ARITHMETIC_TOL,
        f"max ratio-bound excess {worst_margin:.3e} over {n_fixtures} fixtures",
        f"<= {EXACT_ARITHMETIC_TOL:g}",
    )

    worst_margin = -math.inf
    for k in range(n_fixtures):
        n_states = int(gen.integers(4, 11))
        base = mixing_discrete_ssm(n_states, 0.2, gen, n_steps=n_max)
        keep_size = int(gen.integers(2, n_states))
        keep = np.sort(gen.choice(n_states, size=keep_size, replace=False))
        sub, gamma_bar, sup_norm = truncate_discrete_kernel(base.transition, keep)
        gamma = gamma_bar**2 / sup_norm**2
        ssm = DiscreteSsm(
            transition=sub,
            prior=np.full(keep_size, 1.0 / keep_size),
            likelihoods=base.likelihoods[:, keep],
        )
        mu, eta = gen.dirichlet(np.ones(keep_size), size=2)
        ratios, bounds = contraction_profile(ssm, mu, eta, n_max, gamma=gamma)
        excess = float(np.max(ratios - bounds))
        worst_margin = max(worst_margin, excess)
    report.add(
        "truncated-contraction",
        worst_margin <= EXACT_ARITHMETIC_TOL,
        f"max ratio-bound excess {worst_margin:.3e} over {n_fixtures} fixtures",
        f"<= {EXACT_ARITHMETIC_TOL:g}",
    )
    return report


# ---------------------------------------------------------------------------
# Monte Carlo rate: bootstrap filter vs Kalman oracle
# ---------------------------------------------------------------------------


def _scalar_lg_model() -> LinearGaussianSsm:
    return LinearGaussianSsm(
        transition=np.array([[0.9]]),
        process_cov=np.array([[0.5]]),
        obs_matrix=np.array([[1.0]]),
        obs_cov=np.array([[0.5]]),
        prior_mean=np.zeros(1),
        prior_cov=np.array([[1.0]]),
    )


def _lg_observations(model: LinearGaussianSsm, n_steps: int, seed: int) -> np.ndarray:
    gen = streams.stream(seed, streams.TRUTH)
    a = float(model.transition[0, 0])
    sq = math.sqrt(float(model.process_cov[0, 0]))
    sr = math.sqrt(float(model.obs_cov[0, 0]))
    x = float(model.prior_mean[0]) + math.sqrt(float(model.prior_cov[0, 0])) * float(
        gen.standard_normal()
    )
    ys = np.empty((n_steps, 1))
    for n in range(n_steps):
        x = a * x + sq * float(gen.standard_normal())
        ys[n, 0] = x + sr * float(gen.standard_normal())
    return ys


def _bootstrap_lg_estimate(model, observations, obs, n_particles, rng, f) -> float:
    """f-moment of the weighted pre-resampling ensemble at the final step."""
    a = float(model.transition[0, 0])
    sq = math.sqrt(float(model.process_cov[0, 0]))
    states = model.prior_mean[0] + math.sqrt(model.prior_cov[0, 0]) * rng.standard_normal(
        (n_particles, 1)
    )
    ens = uniform_ensemble(states)
    estimate = 0.0
    for y in observations:
        new_states = a * ens.states + sq * rng.standard_normal((n_particles, 1))
        log_w = gaussian_log_likelihood(obs, y, new_states)
        weights = normalize_log_weights(log_w)
        estimate = float(weights @ f(new_states[:, 0]))
        idx = np.searchsorted(np.cumsum(weights), rng.random(n_particles), side="right")
        ens = uniform_ensemble(new_states[np.minimum(idx, n_particles - 1)])
    return estimate


def verify_mc_rate(
    seed: int = 0,
    n_levels: tuple[int, ...] = (100, 1000, 10000),
    repetitions: int = 200,
    n_steps: int = 20,
) -> SuiteReport:
    """Fitted N^(-1/2) rate of the bootstrap filter on a scalar model.

    The reference value is the exact Kalman posterior moment of the identity
    clamped to [-5, 5], computed in closed form.
    """
    report = SuiteReport("rate")
    model = _scalar_lg_model()
    ys = _lg_observations(model, n_steps, seed)
    means, covs = kalman_filter(model, ys)
    target = clamped_gaussian_mean(
        float(means[-1, 0]), math.sqrt(float(covs[-1, 0, 0])), -5.0, 5.0
    )
    obs = GaussianObservation(obs_matrix=model.obs_matrix, noise_cov=model.obs_cov)
    f = lambda x: np.clip(x, -5.0, 5.0)
    rmse = []
    for level_idx, n_particles in enumerate(n_levels):
        errs = np.empty(repetitions)
        for rep in range(repetitions):
            rng = streams.stream(seed, streams.PARTICLE, level_idx, rep)
            estimate = _bootstrap_lg_estimate(model, ys, obs, n_particles, rng, f)
            errs[rep] = estimate - target
        rmse.append(math.sqrt(float(np.mean(errs * errs))))
    fit = fit_rate(np.asarray(n_levels, dtype=float), np.asarray(rmse))
    lo, hi = MC_RATE_SLOPE_WINDOW
    report.add(
        "bootstrap-vs-kalman-slope",
        lo <= fit.slope <= hi,
        f"slope {fit.slope:.3f}, RMSE {['%.2e' % r for r in rmse]}",
        f"in [{lo}, {hi}]",
    )
    return report


# ---------------------------------------------------------------------------
# weak order: exact-kernel filter vs Euler-kernel filter on the OU model
# ---------------------------------------------------------------------------


def _ou_em_kernel_params(theta: float, sigma: float, h: float, n_sub: int):
    a = (1.0 - theta * h) ** n_sub
    step_var = sigma * sigma * h
    ratio = (1.0 - theta * h) ** 2
    q = step_var * (1.0 - ratio**n_sub) / (1.0 - ratio)
    return a, q


def ou_filter_discretisation_errors(
    theta: float = 1.0,
    sigma: float = 1.0,
    sigma_y2: float = 0.5,
    h_o: float = 0.1,
    n_steps: int = 20,
    h_levels: tuple[float, ...] = (0.02, 0.01, 0.005),
    seed: int = 0,
    clamp: tuple[float, float] = (-5.0, 5.0),
):
    """Per-h gap between the exact-kernel filter and the Euler-kernel filter.

    Both filters are Gaussian (the Euler chain is linear), so the posterior
    moments of the clamped identity are computed exactly; the only shared
    randomness is the observation record.
    """
    exact = ou_exact_kernel(theta, sigma, h_o)
    base = LinearGaussianSsm(
        transition=np.array([[exact.decay]]),
        process_cov=np.array([[exact.variance]]),
        obs_matrix=np.array([[1.0]]),
        obs_cov=np.array([[sigma_y2]]),
        prior_mean=np.zeros(1),
        prior_cov=np.array([[sigma**2 / (2 * theta)]]),
    )
    ys = _lg_observations(base, n_steps, seed)
    means, covs = kalman_filter(base, ys)
    lo, hi = clamp
    exact_moments = np.array(
        [clamped_gaussian_mean(float(m[0]), math.sqrt(float(c[0, 0])), lo, hi)
         for m, c in zip(means, covs)]
    )
    errors = []
    for h in h_levels:
        n_sub = round(h_o / h)
        a_h, q_h = _ou_em_kernel_params(theta, sigma, h, n_sub)
        em_model = LinearGaussianSsm(
            transition=np.array([[a_h]]),
            process_cov=np.array([[q_h]]),
            obs_matrix=np.array([[1.0]]),
            obs_cov=np.array([[sigma_y2]]),
            prior_mean=np.zeros(1),
            prior_cov=np.array([[sigma**2 / (2 * theta)]]),
        )
        m_h, c_h = kalman_filter(em_model, ys)
        moments_h = np.array(
            [clamped_gaussian_mean(float(m[0]), math.sqrt(float(c[0, 0])), lo, hi)
             for m, c in zip(m_h, c_h)]
        )
        errors.append(float(np.mean(np.abs(moments_h - exact_moments))))
    return np.asarray(h_levels, dtype=float), np.asarray(errors)


def verify_weak_order(seed: int = 0) -> SuiteReport:
    report = SuiteReport("weak-order")
    levels, errors = ou_filter_discretisation_errors(seed=seed)
    fit = fit_rate(levels, errors)
    lo, hi = WEAK_ORDER_SLOPE_WINDOW
    report.add(
        "ou-filter-h-slope",
        lo <= fit.slope <= hi,
        f"slope {fit.slope:.3f}, errors {['%.2e' % e for e in errors]}",
        f"in [{lo}, {hi}]",
    )
    return report


# ---------------------------------------------------------------------------
# constraint gap: Theorem-2 limit on a nested finite-state family
# ---------------------------------------------------------------------------


def nested_gap_fixture(seed: int = 13, n_states: int = 8, n_steps: int = 12):
    """Mixing fixture plus constraints growing along stationary mass."""
    gen = streams.stream(seed, 1)
    ssm = mixing_discrete_ssm(n_states, 0.45, gen, n_steps=n_steps)
    stationary = np.linalg.matrix_power(ssm.transition, 50)[0]
    order = np.argsort(stationary)[::-1]
    sizes = list(range(3, n_states + 1, 2))
    if sizes[-1] != n_states:
        sizes.append(n_states)
    return ssm, [order[:k] for k in sizes]


def verify_constraint_gap(seed: int = 13) -> SuiteReport:
    report = SuiteReport("constraint-gap")
    ssm, constraints = nested_gap_fixture(seed=seed)
    gaps, eps = constraint_gap_exact(ssm, constraints)
    report.add(
        "gap-monotone",
        bool(np.all(np.diff(gaps) <= EXACT_ARITHMETIC_TOL)),
        f"gaps {['%.3e' % g for g in gaps]}",
        "non-increasing",
    )
    report.add(
        "gap-zero-at-full-space",
        gaps[-1] == 0.0,
        f"final gap {gaps[-1]:.3e}",
        "== 0",
    )
    report.add(
        "eps-nondecreasing-to-one",
        bool(np.all(np.diff(eps) >= -EXACT_ARITHMETIC_TOL) and abs(eps[-1] - 1.0) < 1e-9),
        f"eps {['%.4f' % e for e in eps]}",
        "non-decreasing, -> 1",
    )
    return report


SUITES = {
    "stability": verify_stability,
    "rate": verify_mc_rate,
    "weak-order": verify_weak_order,
    "constraint-gap": verify_constraint_gap,
}
