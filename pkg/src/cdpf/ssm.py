"""Observation likelihoods, constraint sets, truncated-kernel rejection
sampling and the barrier-modified drift.

All likelihood computations stay in the log domain; the unnormalised
convention is used throughout, so ``log g(x) = 0`` exactly at ``y = m(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConstraintInfeasibleError, InvalidModelError
from .sde import SdeModel

Array = np.ndarray


@dataclass(frozen=True)
class GaussianObservation:
    """Linear observation ``y = obs_matrix @ x + N(0, noise_cov)``.

    ``obs_matrix`` has shape ``(dim_y, dim_x)``.  The precision matrix and the
    Cholesky factor of the noise covariance are cached at construction.
    """

    obs_matrix: Array
    noise_cov: Array
    _precision: Array = field(init=False, repr=False)
    _chol: Array = field(init=False, repr=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.obs_matrix, dtype=float))
        cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        object.__setattr__(self, "obs_matrix", c)
        object.__setattr__(self, "noise_cov", cov)
        if cov.shape != (c.shape[0], c.shape[0]):
            raise InvalidModelError("noise covariance shape does not match dim_y")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise InvalidModelError("noise covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidModelError("noise covariance must be positive definite") from exc
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_precision", np.linalg.inv(cov))

    @property
    def dim_y(self) -> int:
        return self.obs_matrix.shape[0]

    @property
    def dim_x(self) -> int:
        return self.obs_matrix.shape[1]


def observe_mean(obs: GaussianObservation, x: Array) -> Array:
    """Noise-free observation ``m(x)``; broadcasts over leading axes of ``x``."""
    return np.asarray(x, dtype=float) @ obs.obs_matrix.T


def sample_observation(obs: GaussianObservation, x: Array, rng: np.random.Generator) -> Array:
    m = observe_mean(obs, x)
    z = rng.standard_normal(m.shape)
    return m + z @ obs._chol.T


def gaussian_log_likelihood(obs: GaussianObservation, y: Array, x: Array):
    """Unnormalised log-likelihood ``-0.5 ||y - m(x)||^2_{Sigma^-1}``.

    Maximal value 0 is attained exactly at ``y = m(x)``.  Vectorised over
    leading axes of ``x``; returns a float for a single state.
    """
    resid = np.asarray(y, dtype=float) - observe_mean(obs, x)
    val = -0.5 * np.einsum("...i,ij,...j->...", resid, obs._precision, resid)
    return float(val) if val.ndim == 0 else val


def log_likelihood_gradient(obs: GaussianObservation, y: Array, x: Array) -> Array:
    """Gradient of :func:`gaussian_log_likelihood` w.r.t. the state."""
    resid = np.asarray(y, dtype=float) - observe_mean(obs, x)
    return (resid @ obs._precision) @ obs.obs_matrix


@dataclass(frozen=True)
class ConstraintSet:
    """Compact set described by a membership test and a smooth violation measure.

    ``violation(x) == 0`` exactly when ``contains(x)`` is true; outside the
    set the violation grows smoothly, and ``violation_gradient`` is its
    derivative (used by the barrier drift).
    """

    contains: Callable[[Array], Array]
    violation: Callable[[Array], Array]
    violation_gradient: Callable[[Array], Array]
    tag: str


def superlevel_constraint(
    obs: GaussianObservation, y: Array, threshold: float
) -> ConstraintSet:
    """High-likelihood region ``{x : log g(x) > threshold}`` (open set).

    The violation is ``max(0, threshold - log g(x))`` and its gradient is
    ``-grad log g`` wherever the set is violated.
    """
    y = np.asarray(y, dtype=float)

    def contains(x):
        return gaussian_log_likelihood(obs, y, x) > threshold

    def violation(x):
        return np.maximum(0.0, threshold - gaussian_log_likelihood(obs, y, x))

    def violation_gradient(x):
        logg = np.asarray(gaussian_log_likelihood(obs, y, x))
        grad = -log_likelihood_gradient(obs, y, x)
        return np.where((logg < threshold)[..., None], grad, 0.0)

    return ConstraintSet(contains, violation, violation_gradient, tag="superlevel")


def hypercube_constraint(center: Array, side: float) -> ConstraintSet:
    """Closed hypercube of side length ``side`` around ``center``.

    The violation is the summed squared overshoot beyond each face.
    """
    if side <= 0:
        raise InvalidModelError("hypercube side must be positive")
    center = np.asarray(center, dtype=float)
    half = side / 2.0

    def contains(x):
        return np.all(np.abs(np.asarray(x, dtype=float) - center) <= half, axis=-1)

    def violation(x):
        over = np.maximum(0.0, np.abs(np.asarray(x, dtype=float) - center) - half)
        return np.sum(over * over, axis=-1)

    def violation_gradient(x):
        d = np.asarray(x, dtype=float) - center
        over = np.maximum(0.0, np.abs(d) - half)
        return 2.0 * over * np.sign(d)

    return ConstraintSet(contains, violation, violation_gradient, tag="hypercube")


def product_constraint(*sets: ConstraintSet) -> ConstraintSet:
    """Intersection of constraint sets; violations add, membership is joint."""
    if not sets:
        raise InvalidModelError("product of zero constraints is undefined")

    def contains(x):
        out = sets[0].contains(x)
        for c in sets[1:]:
            out = np.logical_and(out, c.contains(x))
        return out

    def violation(x):
        return sum(c.violation(x) for c in sets)

    def violation_gradient(x):
        return sum(c.violation_gradient(x) for c in sets)

    return ConstraintSet(contains, violation, violation_gradient, tag="product")


def sample_constrained_kernel_rejection(
    sampler: Callable[[np.random.Generator], Array],
    constraint: ConstraintSet,
    max_attempts: int,
    rng: np.random.Generator,
    start=None,
) -> tuple[Array, int]:
    """Draw from a truncated kernel by rejection.

    ``sampler(rng)`` must return one draw from the unconstrained kernel;
    draws are repeated until one lands in the constraint set, which makes the
    accepted sample an exact draw from the renormalised truncated kernel.
    Returns ``(sample, attempts)``; the attempt count feeds the retained-mass
    diagnostics.
    """
    if max_attempts < 1:
        raise InvalidModelError("max_attempts must be >= 1")
    for attempt in range(1, max_attempts + 1):
        x = sampler(rng)
        if constraint.contains(x):
            return x, attempt
    raise ConstraintInfeasibleError(
        attempts=max_attempts, start=start, acceptance_estimate=1.0 / max_attempts
    )


def sample_constrained_prior(
    prior_sampler: Callable[[np.random.Generator], Array],
    constraint: ConstraintSet,
    max_attempts: int,
    rng: np.random.Generator,
) -> Array:
    """Rejection draw from the prior truncated to ``constraint``."""
    x, _ = sample_constrained_kernel_rejection(
        prior_sampler, constraint, max_attempts, rng
    )
    return x


@dataclass(frozen=True)
class BarrierConfig:
    """Parameters of the soft constraint pull added to the drift.

    ``strength`` scales the pull, ``margin`` activates it already inside a
    buffer zone around the set boundary, and ``ramp`` is the exponent of the
    time weight that switches the pull on across an observation interval.
    """

    strength: float
    margin: float = 2.0
    ramp: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.strength) and self.strength > 0):
            raise InvalidModelError("barrier strength must be positive and finite")
        if self.margin < 0:
            raise InvalidModelError("barrier margin must be >= 0")
        if not (np.isfinite(self.ramp) and self.ramp >= 1):
            raise InvalidModelError("barrier ramp exponent must be >= 1")


def barrier_drift(
    model: SdeModel,
    obs: GaussianObservation,
    y_next: Array,
    threshold: float,
    cfg: BarrierConfig,
    t_start: float,
    t_end: float,
) -> SdeModel:
    """Model whose drift steers trajectories into the superlevel set of the
    upcoming observation.

    The added term is ``strength * w(t) * grad log g(x)`` wherever
    ``log g(x) < threshold + margin``, with
    ``w(t) = ((t - t_start) / (t_end - t_start)) ** ramp`` clipped to [0, 1],
    so the pull is off at ``t_start`` and fully on at ``t_end``.  States deep
    inside the set keep the base drift exactly.
    """
    if t_end <= t_start:
        raise InvalidModelError("barrier interval must have positive length")
    y_next = np.asarray(y_next, dtype=float)
    activation = threshold + cfg.margin
    span = t_end - t_start

    def drift(x, t):
        base = np.asarray(model.drift(x, t), dtype=float)
        w = (t - t_start) / span
        if w <= 0.0:
            return base
        w = min(w, 1.0) ** cfg.ramp
        logg = np.asarray(gaussian_log_likelihood(obs, y_next, x))
        active = logg < activation
        if not np.any(active):
            return base
        pull = log_likelihood_gradient(obs, y_next, x)
        return base + (cfg.strength * w) * np.where(active[..., None], pull, 0.0)

    return SdeModel(
        dim_x=model.dim_x,
        dim_w=model.dim_w,
        drift=drift,
        diffusion=model.diffusion,
        constant_diffusion=model.constant_diffusion,
        scalar_noise=model.scalar_noise,
    )
