"""Error types raised by the simulator and analysis modules.

Every error carries the module that raised it so the CLI can print
``error [<module>.<ErrorName>]: <detail>`` and exit with ``exit_code``.
"""

from typing import Optional


class SimulationError(Exception):
    """Base class for all simulator errors."""

    module = "byzantine_dsgd"
    exit_code = 1

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail)
        self.detail = detail

    @property
    def qualified_name(self) -> str:
        return f"{self.module}.{type(self).__name__}"


# topology

class DisconnectedHonestSubgraph(SimulationError):
    """The subgraph induced by honest agents is not connected."""

    module = "topology"


class BetaOutOfRange(SimulationError):
    """The spectral gap of a mixing matrix is not in (0, 1]."""

    module = "topology"

    def __init__(self, beta: float) -> None:
        super().__init__(f"beta={beta!r} is not in (0, 1]")
        self.beta = beta


class NoValidTrial(SimulationError):
    """Every sampled contraction configuration was degenerate."""

    module = "topology"


# aggregation

class DimensionMismatch(SimulationError):
    module = "aggregation"


class TooFewInputs(SimulationError):
    module = "aggregation"


class InvalidWeights(SimulationError):
    module = "aggregation"


# attacks

class VictimNotVisible(SimulationError):
    module = "attacks"

    def __init__(self, victim: int) -> None:
        super().__init__(f"victim agent {victim} is not among the visible honest messages")
        self.victim = victim


# learner

class BadMagic(SimulationError):
    module = "learner"


class LengthMismatch(SimulationError):
    module = "learner"


# engine

class NonFiniteModel(SimulationError):
    """A model coordinate became NaN or infinite."""

    module = "engine"

    def __init__(self, step: int, agent: Optional[int] = None) -> None:
        where = f" at agent {agent}" if agent is not None else ""
        super().__init__(f"non-finite model at step {step}{where}")
        self.step = step
        self.agent = agent


# analysis

class GridMismatch(SimulationError):
    module = "analysis"


class HypothesisViolated(SimulationError):
    module = "analysis"

    def __init__(self, rho: float, rho_star: float) -> None:
        super().__init__(f"rho={rho!r} is not below rho*={rho_star!r}")
        self.rho = rho
        self.rho_star = rho_star


class DeltaZero(SimulationError):
    module = "analysis"


class EmptyWindow(SimulationError):
    module = "analysis"
