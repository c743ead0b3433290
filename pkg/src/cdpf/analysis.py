"""Metrics and numerical theorem checks: NMSE, total variation and mixing
constants, contraction profiles, convergence-rate fits, weighted KDE and the
exact constrained-filter gap on finite state spaces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateConstraintError, InvalidModelError, NotMixingError
from .filters import exact_discrete_filter_step
from .models import DiscreteSsm

Array = np.ndarray


def nmse(truth: Array, estimates: Array) -> float:
    """Error power over signal power: ``sum ||X_n - Xhat_n||^2 / sum ||X_n||^2``."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if truth.shape != estimates.shape or truth.shape[0] < 1:
        raise InvalidModelError("truth and estimates must have equal nonzero lengths")
    denom = float(np.sum(truth * truth))
    if denom == 0.0:
        raise InvalidModelError("signal power is zero; NMSE undefined")
    diff = truth - estimates
    return float(np.sum(diff * diff)) / denom


def tv_distance(p: Array, q: Array) -> float:
    """Total variation distance ``0.5 * sum |p_i - q_i|`` between pmfs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.sum(np.abs(p - q)))


def mixing_constant(transition: Array) -> float:
    """Largest admissible mixing constant of a strictly positive kernel.

    Per target state the density ratio across sources is bounded below by
    ``min_i K(i, j) / max_i K(i, j)``; the admissible constant is the square
    root of the worst column, capped at 1.
    """
    k = np.asarray(transition, dtype=float)
    if np.any(k <= 0):
        raise NotMixingError("transition matrix has a zero entry; not mixing")
    ratios = k.min(axis=0) / k.max(axis=0)
    return min(1.0, float(np.sqrt(np.min(ratios))))


def contraction_profile(
    ssm: DiscreteSsm,
    mu: Array,
    eta: Array,
    n_max: int,
    gamma: float | None = None,
) -> tuple[Array, Array]:
    """Exact TV contraction ratios of two filters against the stability bound.

    Runs the exact recursion from priors ``mu`` and ``eta`` and returns, for
    ``n = 0 .. n_max``, the ratio ``TV(pi_n, pi'_n) / TV(mu, eta)`` together
    with the bound ``(1 - gamma^2)^n / gamma^2``.  ``gamma`` defaults to the
    kernel's mixing constant.
    """
    if ssm.likelihoods is None or ssm.likelihoods.shape[0] < n_max:
        raise InvalidModelError("fixture must carry likelihood vectors for every step")
    if gamma is None:
        gamma = mixing_constant(ssm.transition)
    base = tv_distance(mu, eta)
    ratios = np.empty(n_max + 1)
    bounds = np.empty(n_max + 1)
    g2 = gamma * gamma
    p, q = np.asarray(mu, dtype=float), np.asarray(eta, dtype=float)
    for n in range(n_max + 1):
        ratios[n] = 0.0 if base == 0.0 else tv_distance(p, q) / base
        bounds[n] = (1.0 - g2) ** n / g2
        if n < n_max:
            p, _ = exact_discrete_filter_step(p, ssm.transition, ssm.likelihoods[n])
            q, _ = exact_discrete_filter_step(q, ssm.transition, ssm.likelihoods[n])
    return ratios, bounds


@dataclass(frozen=True)
class RateFit:
    """Log-log regression of errors against levels (N or h)."""

    levels: Array
    errors: Array
    slope: float
    intercept: float
    r_squared: float


def fit_rate(levels: Sequence[float], errors: Sequence[float]) -> RateFit:
    """Least-squares fit of ``log(error)`` on ``log(level)``."""
    levels = np.asarray(levels, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if levels.size != errors.size or levels.size < 2:
        raise InvalidModelError("need at least two (level, error) pairs")
    diffs = np.diff(levels)
    if not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise InvalidModelError("levels must be strictly monotone")
    if np.any(errors < 0):
        raise InvalidModelError("errors must be non-negative")
    log_l = np.log(levels)
    log_e = np.log(np.maximum(errors, 1e-300))
    slope, intercept = np.polyfit(log_l, log_e, 1)
    fitted = slope * log_l + intercept
    ss_res = float(np.sum((log_e - fitted) ** 2))
    ss_tot = float(np.sum((log_e - np.mean(log_e)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(levels=levels, errors=errors, slope=float(slope),
                   intercept=float(intercept), r_squared=r2)


def mc_rate_fit(
    error_fn: Callable[[int, int], float],
    n_levels: Sequence[int],
    repetitions: int,
) -> RateFit:
    """Empirical Monte Carlo rate: RMSE over repeated runs per particle count.

    ``error_fn(n_particles, repetition)`` returns one signed or absolute
    error; the per-level RMSE is fitted against the particle counts.
    """
    if len(n_levels) < 3:
        raise InvalidModelError("need at least 3 particle-count levels")
    if repetitions < 50:
        raise InvalidModelError("need at least 50 repetitions per level")
    rmse = []
    for n in n_levels:
        errs = np.array([error_fn(int(n), rep) for rep in range(repetitions)])
        rmse.append(math.sqrt(float(np.mean(errs * errs))))
    return fit_rate(np.asarray(n_levels, dtype=float), np.asarray(rmse))


def weak_order_fit(
    exact_step: Callable[[Array, float, Array], Array],
    approx_step: Callable[[Array, float, Array], Array],
    x0: float,
    dt: float,
    h_levels: Sequence[float],
    n_paths: int,
    rng: np.random.Generator,
    f: Callable[[Array], Array] = lambda x: x,
) -> RateFit:
    """Weak error of a one-step scheme against the exact kernel, per substep size.

    Both steppers receive the same standard-normal variates, coarsened from a
    common finest-level noise array, so the estimated error
    ``|mean f(X_approx) - mean f(X_exact)|`` has far smaller variance than the
    bias being measured.  Each ``h`` in ``h_levels`` must be an integer
    multiple of the smallest one, and ``dt`` an integer multiple of each.
    """
    if len(h_levels) < 3:
        raise InvalidModelError("need at least 3 substep levels")
    h_levels = sorted(float(h) for h in h_levels)
    h_fine = h_levels[0]
    j_fine = round(dt / h_fine)
    if abs(dt / h_fine - j_fine) > 1e-9:
        raise InvalidModelError("dt must be an integer multiple of the finest substep")
    z_fine = rng.standard_normal((n_paths, j_fine))
    errors = []
    for h in h_levels:
        factor = round(h / h_fine)
        if abs(h / h_fine - factor) > 1e-9 or j_fine % factor:
            raise InvalidModelError(
                "every level must divide dt and be a multiple of the finest substep"
            )
        j = j_fine // factor
        z = z_fine[:, : j * factor].reshape(n_paths, j, factor).sum(axis=2) / math.sqrt(factor)
        x_a = np.full(n_paths, float(x0))
        x_e = np.full(n_paths, float(x0))
        for step in range(j):
            x_a = approx_step(x_a, h, z[:, step])
            x_e = exact_step(x_e, h, z[:, step])
        errors.append(abs(float(np.mean(f(x_a) - f(x_e)))))
    return fit_rate(np.asarray(h_levels), np.asarray(errors))


@dataclass(frozen=True)
class DensityEstimate:
    """Gaussian-kernel density values on a grid."""

    grid: Array
    values: Array
    bandwidth: float


def silverman_bandwidth(samples: Array, weights: Array | None = None) -> float:
    """Rule-of-thumb bandwidth ``1.06 * sigma * N^(-1/5)`` on the weighted sample."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if weights is None:
        weights = np.full(n, 1.0 / n)
    mean = float(np.sum(weights * samples))
    var = float(np.sum(weights * (samples - mean) ** 2))
    sigma = math.sqrt(max(var, 0.0))
    if sigma == 0.0:
        return 1e-6 * (1.0 + abs(mean))
    return 1.06 * sigma * n ** (-0.2)


def kde_marginal(
    samples: Array,
    weights: Array | None,
    grid: Array,
    bandwidth: float | None = None,
) -> DensityEstimate:
    """Weighted Gaussian kernel density estimate on ``grid``.

    The bandwidth defaults to Silverman's rule; a degenerate sample falls
    back to a tiny positive bandwidth so the estimate stays well defined.
    """
    samples = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if samples.size < 2:
        raise InvalidModelError("KDE needs at least two samples")
    if np.any(np.diff(grid) <= 0):
        raise InvalidModelError("grid must be strictly increasing")
    n = samples.size
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=float)
        weights = weights / np.sum(weights)
    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples, weights)
    if bandwidth <= 0:
        raise InvalidModelError("bandwidth must be positive")
    u = (grid[:, None] - samples[None, :]) / bandwidth
    kernel = np.exp(-0.5 * u * u) / (bandwidth * math.sqrt(2.0 * math.pi))
    return DensityEstimate(grid=grid, values=kernel @ weights, bandwidth=float(bandwidth))


def constraint_gap_exact(
    ssm: DiscreteSsm,
    nested_constraints: Sequence[Array],
    n_steps: int | None = None,
) -> tuple[Array, Array]:
    """Exact gap between the true and the constrained finite-state filters.

    For each constraint (an index set; sets must be nested and growing) the
    constrained recursion truncates the prior and every transition row to the
    set and renormalises.  Returned per constraint: the worst-case test
    function gap ``max_n sup_{|f|<=1} |pi_n(f) - pihat_n(f)|`` (evaluated as
    twice the total variation distance) and the retained transition mass
    ``eps = min_{x' in C} K(x', C)``.
    """
    if ssm.likelihoods is None:
        raise InvalidModelError("fixture must carry likelihood vectors")
    if n_steps is None:
        n_steps = ssm.likelihoods.shape[0]
    k = ssm.transition
    s = ssm.n_states
    prev: set[int] = set()
    for keep in nested_constraints:
        current = set(int(i) for i in np.asarray(keep))
        if not prev <= current:
            raise InvalidModelError("constraints must be nested")
        prev = current

    gaps = np.empty(len(nested_constraints))
    eps = np.empty(len(nested_constraints))
    for idx, keep in enumerate(nested_constraints):
        keep = np.asarray(sorted(set(int(i) for i in np.asarray(keep))), dtype=int)
        mask = np.zeros(s)
        mask[keep] = 1.0
        retained = (k * mask[None, :]).sum(axis=1)
        eps_l = float(np.min(retained[keep]))
        if eps_l <= 0.0:
            raise DegenerateConstraintError(
                f"constraint retains zero transition mass (set {keep.tolist()})"
            )
        prior_mass = float(np.sum(ssm.prior * mask))
        if prior_mass <= 0.0:
            raise DegenerateConstraintError("constraint removes all prior mass")
        eps[idx] = eps_l

        if keep.size == s:
            # unconstrained: run the identical recursion so the gap is exactly 0
            k_hat = k
            p_hat = ssm.prior.copy()
        else:
            k_hat = k * mask[None, :]
            k_hat = k_hat / k_hat.sum(axis=1, keepdims=True)
            p_hat = ssm.prior * mask / prior_mass
        p = ssm.prior.copy()
        worst = 0.0
        for n in range(n_steps):
            g = ssm.likelihoods[n]
            p, _ = exact_discrete_filter_step(p, k, g)
            p_hat, _ = exact_discrete_filter_step(p_hat, k_hat, g)
            worst = max(worst, 2.0 * tv_distance(p, p_hat))
        gaps[idx] = worst
    return gaps, eps


# ---------------------------------------------------------------------------
# small statistical helpers used by verification suites and tests
# ---------------------------------------------------------------------------


def clamped_gaussian_mean(mean: float, std: float, lo: float, hi: float) -> float:
    """Exact ``E[clip(X, lo, hi)]`` for ``X ~ N(mean, std^2)``."""
    if std <= 0:
        return min(max(mean, lo), hi)
    a = (lo - mean) / std
    b = (hi - mean) / std
    phi_a = math.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    phi_b = math.exp(-0.5 * b * b) / math.sqrt(2.0 * math.pi)
    cdf_a, cdf_b = float(ndtr(a)), float(ndtr(b))
    return (
        lo * cdf_a
        + hi * (1.0 - cdf_b)
        + mean * (cdf_b - cdf_a)
        - std * (phi_b - phi_a)
    )


def ks_statistic(samples: Array, cdf: Callable[[Array], Array]) -> float:
    """Kolmogorov-Smirnov distance between a sample and a reference CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))
