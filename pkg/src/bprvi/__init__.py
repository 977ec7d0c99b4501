"""Profile regression: a truncated Dirichlet-process mixture of Bernoulli
profiles with a logistic outcome model, fitted by full-rank stochastic
variational inference."""

__version__ = "0.1.0"

from .errors import ConfigError, DomainError, NumericalError  # noqa: E402
from .model import CohortData, ModelConfig  # noqa: E402
from .svi import SviConfig, VariationalState, fit  # noqa: E402
from .mcmc import McmcConfig, rwm_sample  # noqa: E402

__all__ = [
    "__version__",
    "CohortData",
    "ModelConfig",
    "SviConfig",
    "VariationalState",
    "McmcConfig",
    "fit",
    "rwm_sample",
    "DomainError",
    "NumericalError",
    "ConfigError",
]
