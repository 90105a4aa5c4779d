"""Friction-aware portfolio control laboratory.

Submodules
----------
sde
    Market SDEs, reproducible Brownian paths, flow Jacobians and BEL weights.
frictions, ledger
    Execution and liquidation prices; the cash/value/wealth books.
risk
    CVaR, entropic risk, expectiles, bPOE and positivity bounds.
mo, rl
    The myopic controller and the policy-gradient baseline.
pnl
    Reduced Hamiltonian, PnL distributions and MO-vs-RL dominance tests.
phantom
    Phantom-profit audit of leaky signals and training bias.
cad
    Control-affects-dynamics premium and the MO+CAD surplus.
harness
    YAML scenarios, experiment runners and the ``myopic-lab`` CLI.
"""

from .exceptions import (BlowUpError, ConfigurationError, ConvergenceError, DepthExhaustionError, DivergenceError,
                         EllipticityError, NumericalDomainError)
from .mo import FeasibleSet, MyopicController, SeparableGain
from .rl import PolicyGradientController

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BlowUpError",
    "ConfigurationError",
    "ConvergenceError",
    "DepthExhaustionError",
    "DivergenceError",
    "EllipticityError",
    "NumericalDomainError",
    "FeasibleSet",
    "MyopicController",
    "SeparableGain",
    "PolicyGradientController",
]
