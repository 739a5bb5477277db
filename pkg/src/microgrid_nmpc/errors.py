"""Exception hierarchy shared by all microgrid_nmpc modules.

Every exception carries a machine-readable ``category`` and the process
``exit_code`` the CLI returns when it escapes to the top level.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional


class MicrogridError(Exception):
    """Base class for all expected failures."""

    category = "internal"
    exit_code = 1


class ConfigError(MicrogridError, ValueError):
    category = "config"
    exit_code = 2


class GridSpecError(MicrogridError, ValueError):
    category = "grid-spec"
    exit_code = 3


class EnvelopeError(MicrogridError, ValueError):
    """Relaxation envelope cannot be built from the given bounds."""

    category = "envelope"
    exit_code = 4


class PowerFlowError(MicrogridError):
    category = "power-flow"
    exit_code = 5


class NoConvergence(PowerFlowError):
    category = "no-convergence"


class OutOfBounds(PowerFlowError, ValueError):
    category = "out-of-bounds"


class NoFeasiblePoint(MicrogridError):
    category = "no-feasible-point"
    exit_code = 6


class NumericalFailure(MicrogridError):
    category = "numerical"
    exit_code = 7


class ReferenceInfeasible(MicrogridError):
    category = "infeasible"
    exit_code = 8


class SubproblemInfeasible(MicrogridError):
    """Closed-loop subproblem had no feasible point.

    Attributes:
        step: Closed-loop step index at which the failure happened
        dump_path: Program dump written for offline diagnosis (if any)
    """

    category = "infeasible"
    exit_code = 8

    def __init__(self, message: str, step: int = -1, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path


class ScenarioError(MicrogridError, ValueError):
    category = "scenario"
    exit_code = 9


class EncodingError(MicrogridError, ValueError):
    category = "encoding"
    exit_code = 10
