"""Twin experiments: simulate a ground truth, observe it, filter it, score it.

Every random ingredient draws from a named stream of the run seed, so a
simulate-then-filter pipeline is reproducible end to end and benchmark
repetitions can run in any order (or concurrently) without changing a byte
of output.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .analysis import nmse
from .config import ExperimentConfig, config_hash, data_hash, with_overrides
from .errors import FILTER_RUNTIME_ERRORS, InvalidModelError
from .filters import FilterOptions, FilterProblem, FilterResult, run_filter
from .models import Lorenz96Params, lorenz96_model, make_observation_matrix, ou_model
from .sde import SdeModel, TimeGrid, sample_kernel, simulate_ground_truth
from .ssm import BarrierConfig, GaussianObservation, observe_mean

Array = np.ndarray

#: spin-up horizon (time units) before the truth trajectory starts
SPINUP_TIME = 5.0


@dataclass(frozen=True)
class SimulationData:
    """One synthetic data record of a twin experiment."""

    truth: Array           # (M + 1, d_x), row 0 is the initial state
    observations: Array    # (M, d_y)
    obs_matrix: Array      # (d_x, d_y), column style
    grid: TimeGrid


def make_sde(cfg: ExperimentConfig) -> SdeModel:
    if cfg.model.kind == "lorenz96":
        params = Lorenz96Params(
            dim_x=cfg.model.d_x, forcing=cfg.model.forcing, sigma_x=cfg.model.sigma_x
        )
        return lorenz96_model(params)
    return ou_model(cfg.model.theta, cfg.model.sigma)


def prior_std(cfg: ExperimentConfig) -> float:
    """Spread of the filter prior around the true initial state."""
    if cfg.model.kind == "lorenz96":
        return cfg.model.sigma_x
    return math.sqrt(cfg.model.sigma**2 / (2.0 * cfg.model.theta))


def _initial_truth_state(cfg: ExperimentConfig, model: SdeModel, seed: int) -> Array:
    gen = streams.stream(seed, streams.INITIAL_STATE)
    if cfg.model.kind == "lorenz96":
        x = cfg.model.forcing + gen.standard_normal(cfg.model.d_x)
        n_spin = max(1, round(SPINUP_TIME / cfg.h))
        return sample_kernel(model, x, 0.0, n_spin * cfg.h, cfg.h, gen)
    return prior_std(cfg) * gen.standard_normal(1)


def simulate_data(cfg: ExperimentConfig, seed: int | None = None) -> SimulationData:
    """Generate truth, observation matrix and observations for one trial."""
    if seed is None:
        seed = cfg.run.seed
    model = make_sde(cfg)
    grid = TimeGrid(t0=0.0, h_o=cfg.observation.h_o, h=cfg.h, n_steps=cfg.run.n_observations)
    h_matrix = make_observation_matrix(
        cfg.model.d_x, cfg.observation.d_y, cfg.observation.sigma_v,
        streams.stream(seed, streams.OBSERVATION_MATRIX),
    )
    x0 = _initial_truth_state(cfg, model, seed)
    truth = simulate_ground_truth(model, x0, grid, streams.stream(seed, streams.TRUTH))
    obs = GaussianObservation(
        obs_matrix=h_matrix.T,
        noise_cov=cfg.observation.sigma_y**2 * np.eye(cfg.observation.d_y),
    )
    noise_gen = streams.stream(seed, streams.OBSERVATION_NOISE)
    ys = observe_mean(obs, truth[1:]) + cfg.observation.sigma_y * noise_gen.standard_normal(
        (grid.n_steps, cfg.observation.d_y)
    )
    return SimulationData(truth=truth, observations=ys, obs_matrix=h_matrix, grid=grid)


def make_problem(cfg: ExperimentConfig, data: SimulationData) -> FilterProblem:
    obs = GaussianObservation(
        obs_matrix=data.obs_matrix.T,
        noise_cov=cfg.observation.sigma_y**2 * np.eye(cfg.observation.d_y),
    )
    return FilterProblem(
        sde=make_sde(cfg),
        grid=data.grid,
        obs=obs,
        prior_mean=data.truth[0].copy(),
        prior_std=prior_std(cfg),
    )


def filter_options(
    cfg: ExperimentConfig,
    paper_mode: bool = False,
    parallelism: str | None = None,
    keep_steps: tuple[int, ...] = (),
) -> FilterOptions:
    barrier = BarrierConfig(
        strength=cfg.filter.barrier.beta,
        margin=cfg.filter.barrier.delta,
        ramp=cfg.filter.barrier.q,
    )
    return FilterOptions(
        algorithm=cfg.filter.algorithm,
        n_particles=cfg.filter.n_particles,
        threshold=cfg.filter.constraint.threshold,
        c0_side=cfg.filter.constraint.c0_side,
        barrier=barrier,
        max_attempts=cfg.filter.max_attempts,
        paper_mode=paper_mode,
        parallelism=parallelism or cfg.run.parallelism,
        keep_steps=keep_steps,
    )


@dataclass
class RunRecord:
    """Deterministic scalar summary of one filter run (wall time excluded
    from file output; it is reported on stderr instead)."""

    algorithm: str
    seed: int
    config_digest: str
    data_digest: str
    nmse: float
    ess_min: float
    ess_mean: float
    ess_median: float
    log_ml_total: float
    attempts_total: int
    attempts_max: int
    degenerate_steps: int
    wall_time: float


def score_run(cfg: ExperimentConfig, seed: int, data: SimulationData,
              result: FilterResult, wall_time: float) -> RunRecord:
    value = nmse(data.truth[1:], result.estimates) if data.grid.n_steps else 0.0
    ess = result.trace.ess
    return RunRecord(
        algorithm=cfg.filter.algorithm,
        seed=seed,
        config_digest=config_hash(cfg),
        data_digest=data_hash(cfg),
        nmse=value,
        ess_min=float(np.min(ess)) if ess.size else float(cfg.filter.n_particles),
        ess_mean=float(np.mean(ess)) if ess.size else float(cfg.filter.n_particles),
        ess_median=float(np.median(ess)) if ess.size else float(cfg.filter.n_particles),
        log_ml_total=float(np.sum(result.trace.log_ml_increments)) if ess.size else 0.0,
        attempts_total=int(np.sum(result.trace.attempts_total)),
        attempts_max=int(np.max(result.trace.attempts_max)) if ess.size else 0,
        degenerate_steps=result.degenerate_steps,
        wall_time=wall_time,
    )


def run_twin(
    cfg: ExperimentConfig,
    seed: int | None = None,
    paper_mode: bool = False,
    parallelism: str | None = None,
    keep_steps: tuple[int, ...] = (),
):
    """Simulate one data record and filter it; returns (record, result, data)."""
    if seed is None:
        seed = cfg.run.seed
    data = simulate_data(cfg, seed)
    problem = make_problem(cfg, data)
    opts = filter_options(cfg, paper_mode=paper_mode, parallelism=parallelism,
                          keep_steps=keep_steps)
    started = time.perf_counter()
    result = run_filter(problem, data.observations, opts, seed)
    wall = time.perf_counter() - started
    return score_run(cfg, seed, data, result, wall), result, data


@dataclass
class BenchmarkCell:
    d_x: int
    algorithm: str
    repetitions: int
    nmse_mean: float
    nmse_std: float
    degenerate_runs: int


def _benchmark_rep(cfg: ExperimentConfig, rep_seed: int, paper_mode: bool,
                   parallelism: str) -> tuple[float, bool]:
    """One benchmark repetition; aborted runs score the NMSE of whatever
    estimates were produced, with the last one held to the end."""
    data = simulate_data(cfg, rep_seed)
    problem = make_problem(cfg, data)
    opts = filter_options(cfg, paper_mode=paper_mode, parallelism=parallelism)
    try:
        result = run_filter(problem, data.observations, opts, rep_seed)
        return nmse(data.truth[1:], result.estimates), result.degenerate_steps > 0
    except FILTER_RUNTIME_ERRORS as err:
        partial = getattr(err, "partial_estimates", np.zeros((0, cfg.model.d_x)))
        m = data.grid.n_steps
        padded = np.empty((m, cfg.model.d_x))
        hold = getattr(err, "initial_mean", data.truth[0])
        for n in range(m):
            if n < partial.shape[0]:
                hold = partial[n]
            padded[n] = hold
        return nmse(data.truth[1:], padded), True


def benchmark_sweep(
    cfg: ExperimentConfig,
    dx_grid: list[int],
    algorithms: list[str],
    repetitions: int,
    paper_mode: bool = False,
    parallelism: str = "sequential",
) -> list[BenchmarkCell]:
    """Mean and spread of NMSE per (dimension, algorithm) cell.

    Every repetition derives its own root seed from ``(d_x, repetition)``, and
    all algorithms of one repetition consume the identical data record, so
    the sweep is invariant to execution order.  Output rows are sorted by
    ``(d_x, algorithm)``.
    """
    if repetitions < 2:
        raise InvalidModelError("benchmark needs at least 2 repetitions")
    jobs = []
    for d_x in dx_grid:
        for algorithm in algorithms:
            cell_cfg = with_overrides(
                cfg, model__d_x=int(d_x), filter__algorithm=algorithm,
                observation__d_y=max(1, int(d_x) // 2),
            )
            jobs.append((int(d_x), algorithm, cell_cfg))

    def run_cell(d_x, algorithm, cell_cfg):
        values, degenerate = [], 0
        for rep in range(repetitions):
            rep_seed = streams.derive_seed(cfg.run.seed, d_x, rep)
            value, was_degenerate = _benchmark_rep(
                cell_cfg, rep_seed, paper_mode, "sequential"
            )
            values.append(value)
            degenerate += int(was_degenerate)
        values = np.asarray(values)
        return BenchmarkCell(
            d_x=d_x, algorithm=algorithm, repetitions=repetitions,
            nmse_mean=float(np.mean(values)), nmse_std=float(np.std(values, ddof=1)),
            degenerate_runs=degenerate,
        )

    if parallelism == "auto" and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(4, len(jobs))) as pool:
            cells = list(pool.map(lambda j: run_cell(*j), jobs))
    else:
        cells = [run_cell(*job) for job in jobs]
    cells.sort(key=lambda c: (c.d_x, c.algorithm))
    return cells
