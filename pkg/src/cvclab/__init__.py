"""Flow-matching editing lab: FlowEdit and Conditioned Velocity Correction on exact Gaussian-mixture flows."""

__version__ = "0.1.0"
