"""kolmokit: heat-kernel machinery for kinetic (degenerate Kolmogorov) SDEs.

Anisotropic Gaussian proxies, parametrix series for the transition density,
minimal-energy deterministic control, mollified flows, and Monte Carlo audits
of two-sided density bounds and gradient decay rates.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    closedform,
    coefficients,
    control,
    flow,
    frozen,
    geometry,
    montecarlo,
    parametrix,
)
from .errors import (  # noqa: F401
    DomainError,
    IntegrationError,
    ModelError,
    NumericError,
    ValidationError,
)
