"""Federated PCA by noisy over-the-air gradient aggregation with region-adaptive power control."""

from .harness import ExperimentConfig, desk_config, run, sweep

__all__ = ["ExperimentConfig", "desk_config", "run", "sweep"]
__version__ = "0.1.0"
