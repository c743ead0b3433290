"""Euler-Maruyama time stepping and kernel samplers for Ito diffusions.

The continuous-time signal solves ``dX = a(X, t) dt + s(X, t) dW``.  Between
two observation times the transition kernel is approximated by chaining
Euler-Maruyama substeps of size ``h``; one chained pass constitutes a single
draw from the approximate kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IntegrationBlowupError, InvalidModelError

Array = np.ndarray

#: a state with sup norm beyond this is treated as a diverged trajectory
BLOWUP_LIMIT = 1.0e8

#: relative tolerance when checking that the substep divides an interval
_GRID_RTOL = 1e-9


@dataclass(frozen=True)
class SdeModel:
    """Drift/diffusion pair with dimensions.

    ``drift(x, t)`` must accept states of shape ``(..., dim_x)`` and broadcast
    over leading axes.  ``diffusion(x, t)`` returns ``(dim_x, dim_w)`` for
    state-independent noise or ``(..., dim_x, dim_w)`` in general.  For
    additive noise, set ``constant_diffusion`` (or ``scalar_noise`` when the
    matrix is ``scale * I``) so steppers can skip re-evaluation.
    """

    dim_x: int
    dim_w: int
    drift: Callable[[Array, float], Array]
    diffusion: Callable[[Array, float], Array]
    constant_diffusion: Array | None = None
    scalar_noise: float | None = None

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_w < 1:
            raise InvalidModelError("state and noise dimensions must be positive")


@dataclass(frozen=True)
class TimeGrid:
    """Observation grid ``t_n = t0 + n * h_o`` with Euler substep ``h``.

    Times are always reconstructed from step counts (``t0 + n * h_o``,
    ``+ j * h`` inside an interval) rather than accumulated, so long runs do
    not drift.
    """

    t0: float
    h_o: float
    h: float
    n_steps: int

    def __post_init__(self):
        if self.h_o <= 0 or self.h <= 0:
            raise InvalidModelError("observation interval and substep must be positive")
        if self.n_steps < 0:
            raise InvalidModelError("number of observation times must be >= 0")
        ratio = self.h_o / self.h
        if abs(ratio - round(ratio)) > _GRID_RTOL * ratio or round(ratio) < 1:
            raise InvalidModelError(
                f"substep h={self.h} does not divide the observation interval h_o={self.h_o}"
            )

    @property
    def substeps(self) -> int:
        """Number of Euler substeps per observation interval."""
        return round(self.h_o / self.h)

    def time_at(self, n: int) -> float:
        return self.t0 + n * self.h_o


def _check_state(x: Array, t: float) -> None:
    if np.all(np.isfinite(x)):
        sup = float(np.max(np.abs(x))) if x.size else 0.0
        if sup <= BLOWUP_LIMIT:
            return
    else:
        sup = math.inf
    raise IntegrationBlowupError(t, sup)


def _noise_term(model: SdeModel, x: Array, t: float, z: Array) -> Array:
    if model.scalar_noise is not None:
        return model.scalar_noise * z
    s = model.constant_diffusion
    if s is None:
        s = np.asarray(model.diffusion(x, t), dtype=float)
    if s.ndim == 2:
        return z @ s.T
    return np.einsum("...ij,...j->...i", s, z)


def euler_maruyama_step(
    model: SdeModel, x: Array, t: float, h: float, z: Array
) -> Array:
    """One Euler-Maruyama step ``x + h a(x,t) + sqrt(h) s(x,t) z``.

    ``z`` is a standard-normal draw of shape ``(..., dim_w)`` supplied by the
    caller.  Raises :class:`IntegrationBlowupError` if the result is
    non-finite or its sup norm exceeds :data:`BLOWUP_LIMIT`.
    """
    if h <= 0:
        raise InvalidModelError("step size must be positive")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    out = x + h * np.asarray(model.drift(x, t), dtype=float)
    out = out + math.sqrt(h) * _noise_term(model, x, t, z)
    _check_state(out, t + h)
    return out


def propagate_paths(
    model: SdeModel, states: Array, t_start: float, h: float, z: Array
) -> Array:
    """Advance a batch of states through ``J`` Euler-Maruyama substeps.

    Parameters
    ----------
    states : array, shape (..., dim_x)
    z : array, shape (..., J, dim_w)
        Standard-normal draws, one row per substep.

    Returns
    -------
    array of shape ``(..., dim_x)`` after the final substep.
    """
    x = np.array(states, dtype=float)
    n_sub = z.shape[-2]
    sqrt_h = math.sqrt(h)
    for j in range(n_sub):
        t = t_start + j * h
        x = x + h * np.asarray(model.drift(x, t), dtype=float)
        x += sqrt_h * _noise_term(model, x, t, z[..., j, :])
        _check_state(x, t + h)
    return x


def _substep_count(t_start: float, t_end: float, h: float) -> int:
    span = t_end - t_start
    if span <= 0:
        raise InvalidModelError("t_end must be after t_start")
    ratio = span / h
    n = round(ratio)
    if n < 1 or abs(ratio - n) > _GRID_RTOL * max(ratio, 1.0):
        raise InvalidModelError(
            f"substep h={h} does not divide the interval ({t_start}, {t_end})"
        )
    return n


def sample_kernel(
    model: SdeModel,
    x_prev: Array,
    t_start: float,
    t_end: float,
    h: float,
    rng: np.random.Generator,
) -> Array:
    """Draw once from the approximate transition kernel over ``(t_start, t_end]``.

    Chains ``(t_end - t_start) / h`` Euler-Maruyama substeps starting at
    ``x_prev``; the interval length must be an integer multiple of ``h``.
    """
    n_sub = _substep_count(t_start, t_end, h)
    z = rng.standard_normal((n_sub, model.dim_w))
    return propagate_paths(model, np.asarray(x_prev, dtype=float), t_start, h, z)


def simulate_ground_truth(
    model: SdeModel, x0: Array, grid: TimeGrid, rng: np.random.Generator
) -> Array:
    """Simulate the signal at the observation times ``t_0 ... t_M``.

    Returns an array of shape ``(M + 1, dim_x)``; row ``n`` is the state at
    ``grid.time_at(n)``.  A single RNG stream drives the whole trajectory.
    """
    x = np.asarray(x0, dtype=float)
    if x.shape != (model.dim_x,):
        raise InvalidModelError(
            f"initial state has shape {x.shape}, expected ({model.dim_x},)"
        )
    out = np.empty((grid.n_steps + 1, model.dim_x))
    out[0] = x
    for n in range(1, grid.n_steps + 1):
        x = sample_kernel(model, x, grid.time_at(n - 1), grid.time_at(n), grid.h, rng)
        out[n] = x
    return out
