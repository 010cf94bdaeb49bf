"""dynaguide: discriminator-guided diffusion for spatiotemporal dynamics.

Pipeline: pseudo-spectral 2D turbulence simulation -> unconditional /
conditional score-model training and time-consistency discriminator training
-> guided stochastic Heun sampling with autoregressive rollouts and ensemble
forecasts -> probabilistic and dynamical verification metrics.
"""

from dynaguide.field_core import (
    AreaWeights,
    Field,
    TrainingBatch,
    TrajectoryDataset,
    latitude_weights,
    load_dataset,
    log_transform,
    inverse_log_transform,
    make_rng,
    derive_rng,
    save_dataset,
    split_dataset,
    standardize,
    unit_weights,
    unstandardize,
)

__all__ = [
    "AreaWeights",
    "Field",
    "TrainingBatch",
    "TrajectoryDataset",
    "latitude_weights",
    "load_dataset",
    "log_transform",
    "inverse_log_transform",
    "make_rng",
    "derive_rng",
    "save_dataset",
    "split_dataset",
    "standardize",
    "unit_weights",
    "unstandardize",
]

__version__ = "0.1.0"
