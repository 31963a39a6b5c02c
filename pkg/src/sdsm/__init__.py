"""Monte Carlo laboratory for measure-valued branching with interacting motion.

Simulates interacting-branching particle systems with a common-noise spatial
correlation, the associated function-valued dual jump process, and closed-form
moment formulas, and statistically cross-validates the three against each
other and against exactly solvable special cases.
"""

from sdsm.kernels import (
    CoefficientFn,
    ConfigurationError,
    InteractionKernel,
    LevyKernel,
    ModelSpec,
    SpecValidationError,
    a_of,
    compute_rho,
    killing_rate_b,
    levy_exp_moment,
    make_spec,
    psi_full,
    psi_killed,
)

__version__ = "0.1.0"

__all__ = [
    "CoefficientFn",
    "ConfigurationError",
    "InteractionKernel",
    "LevyKernel",
    "ModelSpec",
    "SpecValidationError",
    "a_of",
    "compute_rho",
    "killing_rate_b",
    "levy_exp_moment",
    "make_spec",
    "psi_full",
    "psi_killed",
    "__version__",
]
