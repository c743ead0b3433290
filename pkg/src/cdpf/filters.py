"""Filtering algorithms: bootstrap, auxiliary and constrained particle
filters, the Kalman oracle and the exact finite-state recursion.

The particle cycle follows the standard propagate / weight / resample
pattern: particles move through the (possibly constrained) transition kernel,
are weighted by the observation likelihood, and are then resampled
multinomially back to an unweighted ensemble.  Posterior summaries are always
taken from the weighted, pre-resampling ensemble.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as streams
from .errors import (
    ConstraintInfeasibleError,
    IntegrationBlowupError,
    InvalidModelError,
    WeightDegeneracyError,
)
from .models import LinearGaussianSsm
from .sde import SdeModel, TimeGrid, propagate_paths
from .ssm import (
    BarrierConfig,
    ConstraintSet,
    GaussianObservation,
    barrier_drift,
    gaussian_log_likelihood,
    hypercube_constraint,
    superlevel_constraint,
)

Array = np.ndarray

ALGORITHMS = ("bootstrap", "auxiliary", "constrained-rejection", "constrained-barrier")

_PARALLEL_CHUNKS = 4


@dataclass
class ParticleEnsemble:
    """Particle states with log weights; ``normalized`` means the weights
    (after exponentiation) sum to one."""

    states: Array
    log_weights: Array
    normalized: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.states.ndim != 2:
            raise InvalidModelError("particle states must have shape (N, dim_x)")
        if self.log_weights.shape != (self.states.shape[0],):
            raise InvalidModelError("log weights must have one entry per particle")
        if self.states.shape[0] < 1:
            raise InvalidModelError("need at least one particle")

    @property
    def n_particles(self) -> int:
        return self.states.shape[0]

    def weights(self) -> Array:
        if self.normalized:
            return np.exp(self.log_weights)
        return normalize_log_weights(self.log_weights)


def uniform_ensemble(states: Array) -> ParticleEnsemble:
    """Unweighted ensemble (the state right after a resampling pass)."""
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    return ParticleEnsemble(states, np.full(n, -math.log(n)), normalized=True)


@dataclass
class StepTrace:
    """Per-step diagnostics of a particle filter."""

    mean: Array
    ess: float
    log_ml_increment: float
    attempts_total: int
    attempts_max: int
    wall_time: float
    degenerate: bool = False


@dataclass
class FilterTrace:
    """Stacked per-step diagnostics over a whole run."""

    means: Array
    ess: Array
    log_ml_increments: Array
    attempts_total: Array
    attempts_max: Array
    wall_times: Array
    degenerate: Array

    @classmethod
    def from_steps(cls, entries: list[StepTrace], dim_x: int) -> "FilterTrace":
        if not entries:
            z = np.zeros(0)
            return cls(np.zeros((0, dim_x)), z, z, z.astype(int), z.astype(int), z, z.astype(bool))
        return cls(
            means=np.array([e.mean for e in entries]),
            ess=np.array([e.ess for e in entries]),
            log_ml_increments=np.array([e.log_ml_increment for e in entries]),
            attempts_total=np.array([e.attempts_total for e in entries]),
            attempts_max=np.array([e.attempts_max for e in entries]),
            wall_times=np.array([e.wall_time for e in entries]),
            degenerate=np.array([e.degenerate for e in entries]),
        )


def logsumexp(log_v: Array) -> float:
    log_v = np.asarray(log_v, dtype=float)
    m = np.max(log_v)
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(log_v - m))))


def normalize_log_weights(log_w: Array) -> Array:
    """Exponentiate-and-normalise with max subtraction.

    Raises :class:`WeightDegeneracyError` when no entry is finite.
    """
    log_w = np.asarray(log_w, dtype=float)
    m = np.max(log_w)
    if not m > -np.inf:
        raise WeightDegeneracyError(float(m))
    w = np.exp(log_w - m)
    return w / np.sum(w)


def effective_sample_size(weights: Array) -> float:
    """ESS = 1 / sum(w^2) for normalised weights; lies in [1, N]."""
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights * weights))


def resample_indices(weights: Array, rng: np.random.Generator) -> Array:
    """N i.i.d. categorical draws (multinomial resampling ancestors)."""
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0]
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, n - 1)


def multinomial_resample(states: Array, weights: Array, rng: np.random.Generator) -> Array:
    """Resample states by N i.i.d. categorical draws from ``weights``."""
    return np.asarray(states, dtype=float)[resample_indices(weights, rng)]


def posterior_mean(ensemble: ParticleEnsemble) -> Array:
    """Weighted ensemble mean."""
    return ensemble.weights() @ ensemble.states


# ---------------------------------------------------------------------------
# particle filter steps
# ---------------------------------------------------------------------------

PropagateFn = Callable[[Array], tuple[Array, Array]]
LogLikFn = Callable[[Array], Array]


def _pf_step(
    ensemble: ParticleEnsemble,
    propagate: PropagateFn,
    log_likelihood: LogLikFn,
    rng: np.random.Generator,
):
    t_wall = time.perf_counter()
    states, attempts = propagate(ensemble.states)
    log_w = np.asarray(log_likelihood(states), dtype=float)
    if not np.max(log_w) > -np.inf:
        raise WeightDegeneracyError(float(np.max(log_w)))
    weights = normalize_log_weights(log_w)
    n = states.shape[0]
    trace = StepTrace(
        mean=weights @ states,
        ess=effective_sample_size(weights),
        log_ml_increment=logsumexp(log_w) - math.log(n),
        attempts_total=int(np.sum(attempts)),
        attempts_max=int(np.max(attempts)),
        wall_time=time.perf_counter() - t_wall,
    )
    resampled = uniform_ensemble(multinomial_resample(states, weights, rng))
    return resampled, trace, (states, weights)


def bootstrap_pf_step(
    ensemble: ParticleEnsemble,
    propagate: PropagateFn,
    log_likelihood: LogLikFn,
    rng: np.random.Generator,
) -> tuple[ParticleEnsemble, StepTrace]:
    """One propagate / weight / resample cycle of the standard filter.

    ``propagate`` draws every particle from the transition kernel and returns
    ``(new_states, attempts)``; ``log_likelihood`` evaluates ``log g_n``.  The
    entering ensemble is assumed unweighted (post-resampling).
    """
    resampled, trace, _ = _pf_step(ensemble, propagate, log_likelihood, rng)
    return resampled, trace


def constrained_pf_step(
    ensemble: ParticleEnsemble,
    propagate: PropagateFn,
    log_likelihood: LogLikFn,
    rng: np.random.Generator,
) -> tuple[ParticleEnsemble, StepTrace]:
    """Standard cycle run on the constrained model.

    Identical to :func:`bootstrap_pf_step` except that ``propagate`` draws
    from the truncated kernel (exact rejection) or from the barrier-modified
    dynamics (approximate); the weights stay the plain likelihood.
    """
    resampled, trace, _ = _pf_step(ensemble, propagate, log_likelihood, rng)
    return resampled, trace


def auxiliary_pf_step(
    ensemble: ParticleEnsemble,
    propagate: PropagateFn,
    predictive_point: Callable[[Array], Array],
    log_likelihood: LogLikFn,
    rng: np.random.Generator,
) -> tuple[ParticleEnsemble, StepTrace]:
    """Two-stage auxiliary cycle.

    Ancestors are pre-selected by the likelihood of a deterministic
    predictive point, then propagated; second-stage weights divide out the
    first-stage factor.
    """
    resampled, trace, _ = _apf_step(ensemble, propagate, predictive_point, log_likelihood, rng)
    return resampled, trace


def _apf_step(
    ensemble: ParticleEnsemble,
    propagate: PropagateFn,
    predictive_point: Callable[[Array], Array],
    log_likelihood: LogLikFn,
    rng: np.random.Generator,
):
    t_wall = time.perf_counter()
    mu = predictive_point(ensemble.states)
    stage1 = np.asarray(log_likelihood(mu), dtype=float)
    if not np.max(stage1) > -np.inf:
        raise WeightDegeneracyError(float(np.max(stage1)))
    lam = normalize_log_weights(stage1)
    ancestors = resample_indices(lam, rng)
    states, attempts = propagate(ensemble.states[ancestors])
    log_w = np.asarray(log_likelihood(states), dtype=float) - stage1[ancestors]
    if not np.max(log_w) > -np.inf:
        raise WeightDegeneracyError(float(np.max(log_w)))
    weights = normalize_log_weights(log_w)
    n = states.shape[0]
    trace = StepTrace(
        mean=weights @ states,
        ess=effective_sample_size(weights),
        log_ml_increment=(logsumexp(stage1) + logsumexp(log_w) - 2.0 * math.log(n)),
        attempts_total=int(np.sum(attempts)),
        attempts_max=int(np.max(attempts)),
        wall_time=time.perf_counter() - t_wall,
    )
    resampled = uniform_ensemble(multinomial_resample(states, weights, rng))
    return resampled, trace, (states, weights)


# ---------------------------------------------------------------------------
# oracles: Kalman filter and exact finite-state recursion
# ---------------------------------------------------------------------------


@dataclass
class KalmanState:
    mean: Array
    covariance: Array


def kalman_step(state: KalmanState, model: LinearGaussianSsm, y: Array) -> KalmanState:
    """Predict with (A, Q), update with (C, R); Joseph-form covariance."""
    a, q = model.transition, model.process_cov
    c, r = model.obs_matrix, model.obs_cov
    m = a @ state.mean
    p = a @ state.covariance @ a.T + q
    s = c @ p @ c.T + r
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise InvalidModelError("innovation covariance is not positive definite") from exc
    gain = np.linalg.solve(s, c @ p).T
    m = m + gain @ (np.asarray(y, dtype=float) - c @ m)
    j = np.eye(p.shape[0]) - gain @ c
    p = j @ p @ j.T + gain @ r @ gain.T
    p = 0.5 * (p + p.T)
    return KalmanState(mean=m, covariance=p)


def kalman_filter(model: LinearGaussianSsm, observations: Array):
    """Run the exact filter over all observations.

    Returns ``(means, covariances)`` with one row per observation.
    """
    state = KalmanState(model.prior_mean.copy(), model.prior_cov.copy())
    means, covs = [], []
    for y in np.asarray(observations, dtype=float):
        state = kalman_step(state, model, y)
        means.append(state.mean)
        covs.append(state.covariance)
    return np.array(means), np.array(covs)


def exact_discrete_filter_step(
    prior: Array, transition: Array, likelihood: Array
) -> tuple[Array, float]:
    """Finite-state prediction-update: ``xi = K^T prior``,
    ``posterior ∝ g * xi``.  Returns the posterior and the normaliser."""
    xi = np.asarray(transition, dtype=float).T @ np.asarray(prior, dtype=float)
    unnorm = np.asarray(likelihood, dtype=float) * xi
    z = float(np.sum(unnorm))
    return unnorm / z, z


# ---------------------------------------------------------------------------
# full filter runs on continuous-discrete problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterProblem:
    """Everything a filter needs about the model: SDE dynamics, observation
    model, time grid and a Gaussian prior ``N(prior_mean, prior_std^2 I)``."""

    sde: SdeModel
    grid: TimeGrid
    obs: GaussianObservation
    prior_mean: Array
    prior_std: float


@dataclass(frozen=True)
class FilterOptions:
    """Algorithm selection and tuning knobs for :func:`run_filter`."""

    algorithm: str = "bootstrap"
    n_particles: int = 100
    threshold: float = -8.0
    c0_side: float | None = None
    barrier: BarrierConfig | None = None
    max_attempts: int = 1000
    paper_mode: bool = False
    parallelism: str = "sequential"
    keep_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidModelError(f"unknown algorithm {self.algorithm!r}")
        if self.n_particles < 1:
            raise InvalidModelError("need at least one particle")
        if self.parallelism not in ("sequential", "auto"):
            raise InvalidModelError("parallelism must be 'sequential' or 'auto'")


@dataclass
class FilterResult:
    """Output of a full filter run."""

    estimates: Array
    initial_mean: Array
    trace: FilterTrace
    kept: dict[int, tuple[Array, Array]]
    degenerate_steps: int


def _chunk_ranges(n: int, n_chunks: int):
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunked(worker, n: int, parallel: bool):
    """Apply ``worker(lo, hi)`` over index ranges, optionally in threads.

    Results are reassembled in index order, so the execution schedule never
    affects the output.
    """
    if not parallel or n < 2:
        return [worker(0, n)]
    ranges = _chunk_ranges(n, _PARALLEL_CHUNKS)
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        futures = [pool.submit(worker, lo, hi) for lo, hi in ranges]
        return [f.result() for f in futures]


def _draw_noise_blocks(seed: int, step: int, lo: int, hi: int, n_sub: int, dim_w: int) -> Array:
    out = np.empty((hi - lo, n_sub, dim_w))
    for i in range(lo, hi):
        gen = streams.stream(seed, streams.PARTICLE, step, i)
        out[i - lo] = gen.standard_normal((n_sub, dim_w))
    return out


def _propagate_em(model, grid, step, seed, parallel):
    """Propagator drawing per-particle noise blocks and chaining EM substeps."""
    t_start = grid.time_at(step - 1)
    n_sub = grid.substeps

    def propagate(states: Array):
        n = states.shape[0]

        def worker(lo, hi):
            z = _draw_noise_blocks(seed, step, lo, hi, n_sub, model.dim_w)
            return propagate_paths(model, states[lo:hi], t_start, grid.h, z)

        parts = _run_chunked(worker, n, parallel)
        return np.concatenate(parts, axis=0), np.ones(n, dtype=int)

    return propagate


def _propagate_rejection(model, grid, step, seed, constraint, max_attempts, parallel):
    """Propagator drawing from the truncated kernel by per-particle rejection.

    Each particle owns one stream for the whole step, so retries consume that
    particle's stream only and results do not depend on scheduling.
    """
    t_start = grid.time_at(step - 1)
    n_sub = grid.substeps

    def propagate(states: Array):
        n = states.shape[0]

        def worker(lo, hi):
            gens = [streams.stream(seed, streams.PARTICLE, step, i) for i in range(lo, hi)]
            block = states[lo:hi]
            out = np.empty_like(block)
            attempts = np.zeros(hi - lo, dtype=int)
            pending = np.arange(hi - lo)
            for _ in range(max_attempts):
                z = np.empty((pending.size, n_sub, model.dim_w))
                for row, i in enumerate(pending):
                    z[row] = gens[i].standard_normal((n_sub, model.dim_w))
                candidates = propagate_paths(model, block[pending], t_start, grid.h, z)
                attempts[pending] += 1
                ok = np.asarray(constraint.contains(candidates), dtype=bool)
                accepted = pending[ok]
                out[accepted] = candidates[ok]
                pending = pending[~ok]
                if pending.size == 0:
                    return out, attempts
            raise ConstraintInfeasibleError(
                attempts=max_attempts,
                start=block[pending[0]],
                acceptance_estimate=1.0 / max_attempts,
            )

        parts = _run_chunked(worker, n, parallel)
        out = np.concatenate([p[0] for p in parts], axis=0)
        attempts = np.concatenate([p[1] for p in parts])
        return out, attempts

    return propagate


def _deterministic_em_mean(model, grid, step):
    """Noise-free Euler chaining; the auxiliary filter's predictive point."""
    t_start = grid.time_at(step - 1)
    n_sub = grid.substeps

    def predictive_point(states: Array):
        x = np.array(states, dtype=float)
        for j in range(n_sub):
            t = t_start + j * grid.h
            x = x + grid.h * np.asarray(model.drift(x, t), dtype=float)
        return x

    return predictive_point


def _sample_initial(problem: FilterProblem, options: FilterOptions, seed: int) -> Array:
    """Draw the initial ensemble from the prior, truncated to the start-up
    hypercube for constrained algorithms.

    The Gaussian prior has independent coordinates and the hypercube is a
    product of intervals, so the truncation is sampled exactly one coordinate
    at a time (joint rejection would stall in high dimension).
    """
    n, d = options.n_particles, problem.sde.dim_x
    mean = np.asarray(problem.prior_mean, dtype=float)
    std = problem.prior_std
    constrained = options.algorithm.startswith("constrained") and options.c0_side is not None
    half = options.c0_side / 2.0 if constrained else np.inf
    out = np.empty((n, d))
    for i in range(n):
        gen = streams.stream(seed, streams.PRIOR, 0, i)
        x = mean + std * gen.standard_normal(d)
        if constrained:
            for _ in range(options.max_attempts):
                bad = np.abs(x - mean) > half
                if not np.any(bad):
                    break
                x[bad] = mean[bad] + std * gen.standard_normal(int(np.sum(bad)))
            else:
                raise ConstraintInfeasibleError(
                    attempts=options.max_attempts, start=mean,
                    acceptance_estimate=1.0 / options.max_attempts,
                )
        out[i] = x
    return out


def _canonical_order(states: Array) -> Array:
    """Sort particles lexicographically by coordinates.

    Initial ensembles are canonicalised this way, which makes filter output
    invariant under permutations of the starting particles.
    """
    order = np.lexsort(states.T[::-1])
    return states[order]


def run_filter(
    problem: FilterProblem,
    observations: Array,
    options: FilterOptions,
    seed: int,
    initial_states: Array | None = None,
) -> FilterResult:
    """Run a particle filter over a full observation record.

    Per-step estimates are posterior means of the weighted pre-resampling
    ensemble.  With ``paper_mode`` a weight-degenerate step falls back to
    uniform weights instead of aborting, so benchmark runs always finish.
    Deterministic for fixed ``seed`` in both parallelism modes.
    """
    observations = np.asarray(observations, dtype=float)
    if observations.ndim == 1:
        if observations.size:
            observations = observations.reshape(-1, 1)
        else:
            observations = observations.reshape(0, problem.obs.dim_y)
    n_obs = observations.shape[0]
    if n_obs != problem.grid.n_steps:
        raise InvalidModelError(
            f"got {n_obs} observations for a grid with {problem.grid.n_steps} steps"
        )
    parallel = options.parallelism == "auto"
    if initial_states is None:
        initial_states = _sample_initial(problem, options, seed)
    ensemble = uniform_ensemble(_canonical_order(np.asarray(initial_states, dtype=float)))
    initial_mean = posterior_mean(ensemble)

    entries: list[StepTrace] = []
    kept: dict[int, tuple[Array, Array]] = {}
    estimates = np.empty((n_obs, problem.sde.dim_x))
    degenerate_steps = 0
    keep = set(options.keep_steps)

    for n in range(1, n_obs + 1):
        y = observations[n - 1]
        log_g = lambda x, _y=y: gaussian_log_likelihood(problem.obs, _y, x)
        resample_rng = streams.stream(seed, streams.RESAMPLE, n)

        if options.algorithm == "constrained-rejection":
            constraint = superlevel_constraint(problem.obs, y, options.threshold)
            propagate = _propagate_rejection(
                problem.sde, problem.grid, n, seed, constraint,
                options.max_attempts, parallel,
            )
        elif options.algorithm == "constrained-barrier":
            if options.barrier is None:
                raise InvalidModelError("constrained-barrier requires a BarrierConfig")
            model_n = barrier_drift(
                problem.sde, problem.obs, y, options.threshold, options.barrier,
                problem.grid.time_at(n - 1), problem.grid.time_at(n),
            )
            propagate = _propagate_em(model_n, problem.grid, n, seed, parallel)
        else:
            propagate = _propagate_em(problem.sde, problem.grid, n, seed, parallel)

        try:
            if options.algorithm == "auxiliary":
                predictive = _deterministic_em_mean(problem.sde, problem.grid, n)
                ensemble, trace, weighted = _apf_step(
                    ensemble, propagate, predictive, log_g, resample_rng
                )
            else:
                ensemble, trace, weighted = _pf_step(ensemble, propagate, log_g, resample_rng)
        except WeightDegeneracyError as err:
            if not options.paper_mode:
                err.step = n
                err.partial_estimates = estimates[: n - 1].copy()
                err.initial_mean = initial_mean
                raise
            states, attempts = propagate(ensemble.states)
            n_p = states.shape[0]
            weights = np.full(n_p, 1.0 / n_p)
            trace = StepTrace(
                mean=weights @ states,
                ess=float(n_p),
                log_ml_increment=-math.inf,
                attempts_total=int(np.sum(attempts)),
                attempts_max=int(np.max(attempts)),
                wall_time=0.0,
                degenerate=True,
            )
            ensemble = uniform_ensemble(multinomial_resample(states, weights, resample_rng))
            weighted = (states, weights)
            degenerate_steps += 1
        except (IntegrationBlowupError, ConstraintInfeasibleError) as err:
            err.step = n
            err.partial_estimates = estimates[: n - 1].copy()
            err.initial_mean = initial_mean
            raise

        estimates[n - 1] = trace.mean
        entries.append(trace)
        if n in keep:
            kept[n] = weighted

    return FilterResult(
        estimates=estimates,
        initial_mean=initial_mean,
        trace=FilterTrace.from_steps(entries, problem.sde.dim_x),
        kept=kept,
        degenerate_steps=degenerate_steps,
    )
