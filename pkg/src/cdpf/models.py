"""Concrete model instances: stochastic Lorenz 96, Ornstein-Uhlenbeck oracles,
random observation matrices and finite-state fixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidModelError, NotMixingError
from .sde import SdeModel

Array = np.ndarray

_SIMPLEX_ATOL = 1e-12


@dataclass(frozen=True)
class Lorenz96Params:
    """Parameters of the stochastic Lorenz 96 system with additive noise."""

    dim_x: int
    forcing: float = 8.0
    sigma_x: float = math.sqrt(0.5)

    def __post_init__(self):
        if self.dim_x < 4:
            raise InvalidModelError("Lorenz 96 needs dim_x >= 4 for distinct cyclic indices")
        if self.sigma_x < 0:
            raise InvalidModelError("diffusion scale must be >= 0")


def lorenz96_drift(x: Array, forcing: float) -> Array:
    """Cyclic Lorenz 96 drift, vectorised over leading axes.

    ``drift_i = x_{i-1} (x_{i+1} - x_{i-2}) - x_i + forcing`` with indices
    taken modulo the state dimension (last axis).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise InvalidModelError("Lorenz 96 drift needs at least 4 coordinates")
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return xm1 * (xp1 - xm2) - x + forcing


def lorenz96_model(params: Lorenz96Params) -> SdeModel:
    """Lorenz 96 as an :class:`SdeModel` with diffusion ``sigma_x * I``."""
    d = params.dim_x
    forcing = params.forcing
    sigma = params.sigma_x

    def drift(x, t):
        return lorenz96_drift(x, forcing)

    def diffusion(x, t):
        return sigma * np.eye(d)

    return SdeModel(
        dim_x=d,
        dim_w=d,
        drift=drift,
        diffusion=diffusion,
        constant_diffusion=sigma * np.eye(d),
        scalar_noise=sigma,
    )


def ou_model(theta: float, sigma: float) -> SdeModel:
    """Scalar Ornstein-Uhlenbeck model ``dX = -theta X dt + sigma dW``."""
    if theta <= 0 or sigma < 0:
        raise InvalidModelError("need theta > 0 and sigma >= 0")

    def drift(x, t):
        return -theta * np.asarray(x, dtype=float)

    def diffusion(x, t):
        return np.array([[sigma]])

    return SdeModel(
        dim_x=1,
        dim_w=1,
        drift=drift,
        diffusion=diffusion,
        constant_diffusion=np.array([[sigma]]),
        scalar_noise=sigma,
    )


@dataclass(frozen=True)
class OuExactKernel:
    """Exact OU transition over a fixed lag: ``X' = decay * x + N(0, variance)``."""

    decay: float
    variance: float

    def mean(self, x_prev):
        return self.decay * np.asarray(x_prev, dtype=float)

    def sample(self, x_prev, rng: np.random.Generator, size=None):
        m = self.mean(x_prev)
        if size is None:
            return m + math.sqrt(self.variance) * rng.standard_normal(np.shape(m))
        return m + math.sqrt(self.variance) * rng.standard_normal(size)


def ou_exact_kernel(theta: float, sigma: float, dt: float) -> OuExactKernel:
    """Closed-form OU transition: decay ``e^{-theta dt}``, variance
    ``sigma^2 (1 - e^{-2 theta dt}) / (2 theta)``."""
    if theta <= 0 or sigma <= 0 or dt <= 0:
        raise InvalidModelError("need theta > 0, sigma > 0 and dt > 0")
    decay = math.exp(-theta * dt)
    variance = sigma * sigma * (1.0 - math.exp(-2.0 * theta * dt)) / (2.0 * theta)
    return OuExactKernel(decay=decay, variance=variance)


def make_observation_matrix(
    dim_x: int, dim_y: int, sigma_v: float, rng: np.random.Generator
) -> Array:
    """Draw the random observation matrix ``H`` of shape ``(dim_x, dim_y)``.

    Each column is a distinct standard basis vector (indices sampled without
    replacement) plus i.i.d. ``N(0, sigma_v^2)`` interference on every entry.
    """
    if not 1 <= dim_y <= dim_x:
        raise InvalidModelError(f"need 1 <= dim_y <= dim_x, got dim_y={dim_y}, dim_x={dim_x}")
    indices = rng.choice(dim_x, size=dim_y, replace=False)
    h = np.zeros((dim_x, dim_y))
    h[indices, np.arange(dim_y)] = 1.0
    h += sigma_v * rng.standard_normal((dim_x, dim_y))
    return h


def _check_spd(mat: Array, name: str, *, strict: bool) -> None:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidModelError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise InvalidModelError(f"{name} must be symmetric")
    smallest = float(np.min(np.linalg.eigvalsh(mat)))
    bad = smallest <= 0.0 if strict else smallest < -1e-10
    if bad:
        kind = "positive definite" if strict else "positive semi-definite"
        raise InvalidModelError(f"{name} must be {kind}")


@dataclass(frozen=True)
class LinearGaussianSsm:
    """Linear-Gaussian state space model; exact filtering oracle world.

    ``x_n = transition @ x_{n-1} + N(0, process_cov)`` and
    ``y_n = obs_matrix @ x_n + N(0, obs_cov)``.
    """

    transition: Array
    process_cov: Array
    obs_matrix: Array
    obs_cov: Array
    prior_mean: Array
    prior_cov: Array

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "process_cov", np.asarray(self.process_cov, dtype=float))
        object.__setattr__(self, "obs_matrix", np.asarray(self.obs_matrix, dtype=float))
        object.__setattr__(self, "obs_cov", np.asarray(self.obs_cov, dtype=float))
        object.__setattr__(self, "prior_mean", np.asarray(self.prior_mean, dtype=float))
        object.__setattr__(self, "prior_cov", np.asarray(self.prior_cov, dtype=float))
        _check_spd(self.process_cov, "process covariance", strict=False)
        _check_spd(self.obs_cov, "observation covariance", strict=True)
        _check_spd(self.prior_cov, "prior covariance", strict=False)
        d = self.transition.shape[0]
        if self.transition.shape != (d, d) or self.process_cov.shape != (d, d):
            raise InvalidModelError("transition and process covariance shapes disagree")
        if self.obs_matrix.shape[1] != d:
            raise InvalidModelError("observation matrix has wrong state dimension")

    @property
    def dim_x(self) -> int:
        return self.transition.shape[0]

    @property
    def dim_y(self) -> int:
        return self.obs_matrix.shape[0]


@dataclass(frozen=True)
class DiscreteSsm:
    """Finite-state SSM: row-stochastic transition matrix, simplex prior and
    (optionally) one positive likelihood vector per step."""

    transition: Array
    prior: Array
    likelihoods: Array | None = None

    def __post_init__(self):
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "prior", np.asarray(self.prior, dtype=float))
        k = self.transition
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise InvalidModelError("transition matrix must be square")
        if np.any(k < 0):
            raise InvalidModelError("transition matrix entries must be >= 0")
        if np.max(np.abs(k.sum(axis=1) - 1.0)) > _SIMPLEX_ATOL:
            raise InvalidModelError("transition matrix rows must sum to 1")
        if self.prior.shape != (k.shape[0],):
            raise InvalidModelError("prior has wrong length")
        if np.any(self.prior < 0) or abs(self.prior.sum() - 1.0) > _SIMPLEX_ATOL:
            raise InvalidModelError("prior must lie on the probability simplex")
        if self.likelihoods is not None:
            g = np.asarray(self.likelihoods, dtype=float)
            object.__setattr__(self, "likelihoods", g)
            if g.ndim != 2 or g.shape[1] != k.shape[0]:
                raise InvalidModelError("likelihood vectors have wrong shape")
            if np.any(g <= 0):
                raise InvalidModelError("likelihood vectors must be strictly positive")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


def mixing_discrete_ssm(
    n_states: int,
    gamma_target: float,
    rng: np.random.Generator,
    n_steps: int = 0,
) -> DiscreteSsm:
    """Random finite-state fixture whose transition matrix is mixing with
    constant at least ``gamma_target``.

    The matrix blends uniform-row and random row-stochastic parts; the blend
    weight is chosen per column so that
    ``min_i K(i, j) / max_i K(i, j) >= gamma_target**2`` for every ``j``.
    When ``n_steps > 0`` the fixture also carries that many random positive
    likelihood vectors.
    """
    if n_states < 2:
        raise InvalidModelError("need at least 2 states")
    if not 0.0 < gamma_target < 1.0:
        raise InvalidModelError("gamma_target must lie strictly between 0 and 1")
    gamma_target = min(gamma_target, 1.0 - 1e-6)
    g2 = gamma_target * gamma_target

    base_row = rng.dirichlet(5.0 * np.ones(n_states))
    rough = rng.dirichlet(np.ones(n_states), size=n_states)
    alpha = 1.0
    for j in range(n_states):
        lo, hi = float(np.min(rough[:, j])), float(np.max(rough[:, j]))
        slack = g2 * hi - lo
        if slack > 0:
            c = base_row[j] * (1.0 - g2) / slack
            alpha = min(alpha, c / (1.0 + c))
    transition = (1.0 - alpha) * base_row[None, :] + alpha * rough
    transition /= transition.sum(axis=1, keepdims=True)

    likelihoods = None
    if n_steps > 0:
        likelihoods = rng.uniform(0.1, 2.0, size=(n_steps, n_states))
    prior = rng.dirichlet(np.ones(n_states))
    return DiscreteSsm(transition=transition, prior=prior, likelihoods=likelihoods)


def truncate_discrete_kernel(transition: Array, keep: Array) -> tuple[Array, float, float]:
    """Restrict a positive transition matrix to the states in ``keep``.

    Returns the renormalised kernel on the retained states together with
    ``gamma_bar`` (the smallest retained original entry) and the overall sup
    norm of the original kernel, the two ingredients of the truncated-kernel
    stability constant.
    """
    k = np.asarray(transition, dtype=float)
    keep = np.asarray(keep, dtype=int)
    if np.any(k <= 0):
        raise NotMixingError("truncation fixture requires a strictly positive kernel")
    sub = k[np.ix_(keep, keep)]
    row_mass = sub.sum(axis=1, keepdims=True)
    gamma_bar = float(np.min(sub))
    sup_norm = float(np.max(k))
    return sub / row_mass, gamma_bar, sup_norm
