"""Exception types raised across the library."""


class CdpfError(Exception):
    """Base class for all library errors."""


class IntegrationBlowupError(CdpfError):
    """A numerical SDE trajectory left the admissible region (NaN/Inf or huge norm)."""

    def __init__(self, time: float, sup_norm: float):
        self.time = time
        self.sup_norm = sup_norm
        super().__init__(
            f"integration blow-up at t={time:.6g} (sup norm {sup_norm:.3e})"
        )


class ConstraintInfeasibleError(CdpfError):
    """Rejection sampling against a constraint set exhausted its attempt budget."""

    def __init__(self, attempts: int, start=None, acceptance_estimate: float = 0.0):
        self.attempts = attempts
        self.start = start
        self.acceptance_estimate = acceptance_estimate
        super().__init__(
            f"no accepted draw in {attempts} attempts "
            f"(acceptance estimate <= {acceptance_estimate:.3e})"
        )


class WeightDegeneracyError(CdpfError):
    """Every particle log-likelihood is -inf; the weighted ensemble is undefined."""

    def __init__(self, max_log_likelihood: float, step: int | None = None):
        self.max_log_likelihood = max_log_likelihood
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"all particle weights vanished{where} "
            f"(max log-likelihood {max_log_likelihood})"
        )


class NotMixingError(CdpfError):
    """A transition matrix has a zero entry, so no mixing constant exists."""


class DegenerateConstraintError(CdpfError):
    """A constraint retains zero transition mass for some admissible source state."""


class InvalidModelError(CdpfError):
    """Model ingredients violate their contracts (shapes, definiteness, ...)."""


class ConfigError(CdpfError):
    """An experiment configuration failed validation."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        prefix = f"{field}: " if field else ""
        super().__init__(prefix + message)


class VerificationFailure(CdpfError):
    """A verification suite check fell outside its stated tolerance."""


#: errors that abort a filter run at runtime (CLI exit code 3)
FILTER_RUNTIME_ERRORS = (
    IntegrationBlowupError,
    ConstraintInfeasibleError,
    WeightDegeneracyError,
)
