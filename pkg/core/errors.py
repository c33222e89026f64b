#!/usr/bin/env python3
"""Exception types for SoftSplat Sim"""

from typing import Any, Dict, Optional


class SoftSplatError(Exception):
    """Base class for every failure raised by the simulator stack."""
    pass


class ValidationError(SoftSplatError):
    """A value object or operation input violates its invariants."""
    pass


class SerializationError(SoftSplatError):
    """Dataset or checkpoint IO failed, or stored data is inconsistent."""
    pass


class ConfigError(SoftSplatError):
    """The configuration file or a command-line override is invalid."""
    pass


class StabilityError(SoftSplatError):
    """Oracle time step exceeds the explicit integrator's stability bound."""
    pass


class ReachabilityError(SoftSplatError):
    """A scripted grasp target lies outside the kinematic chain's workspace."""
    pass


class CalibrationError(SoftSplatError):
    """Real-to-sim estimation cannot produce a well-defined answer."""
    pass


class ClusteringError(SoftSplatError):
    """Hierarchy construction kept producing empty clusters."""
    pass


class SimulationDivergedError(SoftSplatError):
    """The learned simulator produced non-finite values."""

    def __init__(self, frame: int, detail: str = ""):
        self.frame = frame
        message = f"simulation diverged at frame {frame}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class TrainingDivergedError(SoftSplatError):
    """Training loss became non-finite; carries the last good parameters."""

    def __init__(self, stage: str, epoch: int, last_good_state: Optional[Dict[str, Any]] = None):
        self.stage = stage
        self.epoch = epoch
        self.last_good_state = last_good_state
        super().__init__(f"non-finite loss in {stage} at epoch {epoch}")
