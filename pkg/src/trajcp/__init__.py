"""Online conformal calibration of sampled forecast trajectories."""

__version__ = "0.1.0"
