"""Experiment configuration: parsing, validation, canonicalisation, hashing.

Configs are YAML trees with five sections (model, observation, integration,
filter, run).  Defaults resolve to the benchmark's reference values:
forcing 8, diffusion scale sqrt(1/2), observation variance 1/2, interference
scale 5e-4, substep 1e-3, interval 0.1, superlevel threshold -8, start-up
hypercube side 3 * sigma_x, 100 particles.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import yaml

from .errors import ConfigError

MODEL_KINDS = ("lorenz96", "ou")
ALGORITHMS = ("bootstrap", "auxiliary", "constrained-rejection", "constrained-barrier")
PARALLELISM = ("sequential", "auto")

_SIGMA_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class ModelSection:
    kind: str = "lorenz96"
    d_x: int = 50
    forcing: float = 8.0
    sigma_x: float = _SIGMA_HALF
    theta: float = 1.0
    sigma: float = 1.0


@dataclass(frozen=True)
class ObservationSection:
    d_y: int = 25
    sigma_y: float = _SIGMA_HALF
    sigma_v: float = 5e-4
    h_o: float = 0.1


@dataclass(frozen=True)
class ConstraintSection:
    threshold: float = -8.0
    c0_side: float = 3.0 * _SIGMA_HALF


@dataclass(frozen=True)
class BarrierSection:
    beta: float = 20.0
    delta: float = 2.0
    q: float = 1.0


@dataclass(frozen=True)
class FilterSection:
    algorithm: str = "bootstrap"
    n_particles: int = 100
    constraint: ConstraintSection = ConstraintSection()
    barrier: BarrierSection = BarrierSection()
    max_attempts: int = 1000


@dataclass(frozen=True)
class RunSection:
    n_observations: int = 200
    seed: int = 1
    repetitions: int = 10
    parallelism: str = "sequential"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = ModelSection()
    observation: ObservationSection = ObservationSection()
    h: float = 1e-3
    filter: FilterSection = FilterSection()
    run: RunSection = RunSection()


def _need(mapping, field: str, kind, path: str, default):
    if not isinstance(mapping, dict):
        raise ConfigError("expected a mapping", path.rsplit(".", 1)[0] or path)
    value = mapping.get(field, default)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", path)
    return value


def _check_unknown(mapping, known, path):
    if not isinstance(mapping, dict):
        raise ConfigError("expected a mapping", path)
    for key in mapping:
        if key not in known:
            raise ConfigError(f"unknown field {key!r}", f"{path}.{key}" if path else key)


def from_mapping(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping and resolve all defaults.

    Raises :class:`ConfigError` with the offending field path.
    """
    if raw is None:
        raw = {}
    _check_unknown(raw, {"model", "observation", "integration", "filter", "run"}, "")

    m = raw.get("model", {})
    _check_unknown(m, {"kind", "d_x", "F", "sigma_x", "theta", "sigma"}, "model")
    kind = _need(m, "kind", str, "model.kind", "lorenz96")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"must be one of {MODEL_KINDS}, got {kind!r}", "model.kind")
    if kind == "ou":
        d_x = 1
        if "d_x" in m and m["d_x"] != 1:
            raise ConfigError("the OU model is scalar; d_x must be 1", "model.d_x")
    else:
        d_x = _need(m, "d_x", int, "model.d_x", 50)
        if d_x < 4:
            raise ConfigError("must be >= 4", "model.d_x")
    sigma_x = _need(m, "sigma_x", float, "model.sigma_x", _SIGMA_HALF)
    if sigma_x < 0:
        raise ConfigError("must be >= 0", "model.sigma_x")
    theta = _need(m, "theta", float, "model.theta", 1.0)
    if theta <= 0:
        raise ConfigError("must be > 0", "model.theta")
    sigma = _need(m, "sigma", float, "model.sigma", 1.0)
    if sigma <= 0:
        raise ConfigError("must be > 0", "model.sigma")
    model = ModelSection(
        kind=kind, d_x=d_x,
        forcing=_need(m, "F", float, "model.F", 8.0),
        sigma_x=sigma_x, theta=theta, sigma=sigma,
    )

    o = raw.get("observation", {})
    _check_unknown(o, {"d_y", "sigma_y", "sigma_v", "h_o"}, "observation")
    default_dy = 1 if kind == "ou" else max(1, d_x // 2)
    d_y = _need(o, "d_y", int, "observation.d_y", default_dy)
    if not 1 <= d_y <= d_x:
        raise ConfigError(f"must satisfy 1 <= d_y <= d_x ({d_x})", "observation.d_y")
    sigma_y = _need(o, "sigma_y", float, "observation.sigma_y", _SIGMA_HALF)
    if sigma_y <= 0:
        raise ConfigError("must be > 0", "observation.sigma_y")
    sigma_v = _need(o, "sigma_v", float, "observation.sigma_v", 5e-4)
    if sigma_v < 0:
        raise ConfigError("must be >= 0", "observation.sigma_v")
    h_o = _need(o, "h_o", float, "observation.h_o", 0.1)
    if h_o <= 0:
        raise ConfigError("must be > 0", "observation.h_o")
    observation = ObservationSection(d_y=d_y, sigma_y=sigma_y, sigma_v=sigma_v, h_o=h_o)

    integ = raw.get("integration", {})
    _check_unknown(integ, {"h"}, "integration")
    h = _need(integ, "h", float, "integration.h", 1e-3)
    if h <= 0:
        raise ConfigError("must be > 0", "integration.h")
    ratio = h_o / h
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise ConfigError(f"h={h} must divide h_o={h_o}", "integration.h")

    f = raw.get("filter", {})
    _check_unknown(f, {"algorithm", "N", "constraint", "barrier", "max_attempts"}, "filter")
    algorithm = _need(f, "algorithm", str, "filter.algorithm", "bootstrap")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"must be one of {ALGORITHMS}, got {algorithm!r}", "filter.algorithm")
    n_particles = _need(f, "N", int, "filter.N", 100)
    if n_particles < 1:
        raise ConfigError("must be >= 1", "filter.N")
    c = f.get("constraint", {}) if isinstance(f, dict) else {}
    _check_unknown(c, {"threshold", "c0_side"}, "filter.constraint")
    constraint = ConstraintSection(
        threshold=_need(c, "threshold", float, "filter.constraint.threshold", -8.0),
        c0_side=_need(c, "c0_side", float, "filter.constraint.c0_side", 3.0 * sigma_x),
    )
    if constraint.c0_side <= 0:
        raise ConfigError("must be > 0", "filter.constraint.c0_side")
    b = f.get("barrier", {}) if isinstance(f, dict) else {}
    _check_unknown(b, {"beta", "delta", "q"}, "filter.barrier")
    barrier = BarrierSection(
        beta=_need(b, "beta", float, "filter.barrier.beta", 2.0 / h_o),
        delta=_need(b, "delta", float, "filter.barrier.delta", 2.0),
        q=_need(b, "q", float, "filter.barrier.q", 1.0),
    )
    if barrier.beta <= 0:
        raise ConfigError("must be > 0", "filter.barrier.beta")
    if barrier.delta < 0:
        raise ConfigError("must be >= 0", "filter.barrier.delta")
    if barrier.q < 1:
        raise ConfigError("must be >= 1", "filter.barrier.q")
    max_attempts = _need(f, "max_attempts", int, "filter.max_attempts", 1000)
    if max_attempts < 1:
        raise ConfigError("must be >= 1", "filter.max_attempts")
    filt = FilterSection(
        algorithm=algorithm, n_particles=n_particles,
        constraint=constraint, barrier=barrier, max_attempts=max_attempts,
    )

    r = raw.get("run", {})
    _check_unknown(r, {"M", "seed", "repetitions", "parallelism"}, "run")
    n_obs = _need(r, "M", int, "run.M", 200)
    if n_obs < 0:
        raise ConfigError("must be >= 0", "run.M")
    seed = _need(r, "seed", int, "run.seed", 1)
    if not 0 <= seed < 2**64:
        raise ConfigError("must be an unsigned 64-bit integer", "run.seed")
    repetitions = _need(r, "repetitions", int, "run.repetitions", 10)
    if repetitions < 1:
        raise ConfigError("must be >= 1", "run.repetitions")
    parallelism = _need(r, "parallelism", str, "run.parallelism", "sequential")
    if parallelism not in PARALLELISM:
        raise ConfigError(f"must be one of {PARALLELISM}", "run.parallelism")
    run = RunSection(n_observations=n_obs, seed=seed,
                     repetitions=repetitions, parallelism=parallelism)

    return ExperimentConfig(model=model, observation=observation, h=h, filter=filt, run=run)


def to_mapping(cfg: ExperimentConfig) -> dict:
    """Canonical fully-resolved mapping; a fixed point of parse/serialize."""
    return {
        "model": {
            "kind": cfg.model.kind,
            "d_x": cfg.model.d_x,
            "F": cfg.model.forcing,
            "sigma_x": cfg.model.sigma_x,
            "theta": cfg.model.theta,
            "sigma": cfg.model.sigma,
        },
        "observation": {
            "d_y": cfg.observation.d_y,
            "sigma_y": cfg.observation.sigma_y,
            "sigma_v": cfg.observation.sigma_v,
            "h_o": cfg.observation.h_o,
        },
        "integration": {"h": cfg.h},
        "filter": {
            "algorithm": cfg.filter.algorithm,
            "N": cfg.filter.n_particles,
            "constraint": {
                "threshold": cfg.filter.constraint.threshold,
                "c0_side": cfg.filter.constraint.c0_side,
            },
            "barrier": {
                "beta": cfg.filter.barrier.beta,
                "delta": cfg.filter.barrier.delta,
                "q": cfg.filter.barrier.q,
            },
            "max_attempts": cfg.filter.max_attempts,
        },
        "run": {
            "M": cfg.run.n_observations,
            "seed": cfg.run.seed,
            "repetitions": cfg.run.repetitions,
            "parallelism": cfg.run.parallelism,
        },
    }


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping")
    return from_mapping(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_mapping(cfg), sort_keys=True)


def _digest(mapping: dict) -> str:
    blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the full canonical config."""
    return _digest(to_mapping(cfg))


def data_hash(cfg: ExperimentConfig) -> str:
    """Digest of the sections that determine the simulated data.

    Runs that differ only in filter settings share this hash, which pins the
    fact that they consumed identical truth/observation records.
    """
    full = to_mapping(cfg)
    shared = {
        "model": full["model"],
        "observation": full["observation"],
        "integration": full["integration"],
        "M": full["run"]["M"],
        "seed": full["run"]["seed"],
    }
    return _digest(shared)


def with_overrides(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    """Rebuild a config with a few scalar overrides (seed, algorithm, d_x, ...)."""
    mapping = to_mapping(cfg)
    for dotted, value in updates.items():
        parts = dotted.split("__")
        node = mapping
        for key in parts[:-1]:
            node = node[key]
        node[parts[-1]] = value
    return from_mapping(mapping)
