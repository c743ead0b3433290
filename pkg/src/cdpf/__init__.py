"""Constrained particle filters for discretely observed Ito diffusions.

Library layout:

- :mod:`cdpf.sde` -- Euler-Maruyama stepping and transition-kernel samplers
- :mod:`cdpf.models` -- Lorenz 96, Ornstein-Uhlenbeck and finite-state models
- :mod:`cdpf.ssm` -- likelihoods, constraint sets, rejection and barrier tools
- :mod:`cdpf.filters` -- particle filters, Kalman and exact discrete oracles
- :mod:`cdpf.analysis` -- metrics, rate fits, KDE and stability checks
- :mod:`cdpf.experiment`, :mod:`cdpf.cli` -- twin experiments and the CLI
"""

from .errors import (
    CdpfError,
    ConfigError,
    ConstraintInfeasibleError,
    DegenerateConstraintError,
    IntegrationBlowupError,
    InvalidModelError,
    NotMixingError,
    VerificationFailure,
    WeightDegeneracyError,
)
from .sde import SdeModel, TimeGrid, euler_maruyama_step, sample_kernel, simulate_ground_truth
from .models import (
    DiscreteSsm,
    LinearGaussianSsm,
    Lorenz96Params,
    lorenz96_drift,
    lorenz96_model,
    make_observation_matrix,
    mixing_discrete_ssm,
    ou_exact_kernel,
    ou_model,
)
from .ssm import (
    BarrierConfig,
    ConstraintSet,
    GaussianObservation,
    barrier_drift,
    gaussian_log_likelihood,
    hypercube_constraint,
    sample_constrained_kernel_rejection,
    sample_constrained_prior,
    superlevel_constraint,
)
from .filters import (
    FilterOptions,
    FilterProblem,
    FilterResult,
    ParticleEnsemble,
    auxiliary_pf_step,
    bootstrap_pf_step,
    constrained_pf_step,
    exact_discrete_filter_step,
    kalman_filter,
    kalman_step,
    multinomial_resample,
    normalize_log_weights,
    posterior_mean,
    run_filter,
)
from .analysis import (
    DensityEstimate,
    RateFit,
    constraint_gap_exact,
    contraction_profile,
    kde_marginal,
    mc_rate_fit,
    mixing_constant,
    nmse,
    tv_distance,
    weak_order_fit,
)

__version__ = "0.1.0"
