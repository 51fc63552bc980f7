"""Unsupervised discovery of latent object properties from 2-D motion.

The package simulates three ball-interaction domains, generates filtered
datasets, trains a perception/prediction model end-to-end on rollout
error alone, and extracts human-interpretable properties (log spring
charge, log mass, restitution) from the learned vectors with PCA.
"""

from .physics import (Domain, Wall, WorldConfig, ObjectProperties, Trajectory,
                      spring_force, resolve_ball_collision,
                      resolve_wall_collision, simulate, simulate_batch,
                      system_energy)
from .dataset import (DomainSpec, NormStats, Dataset, domain_spec,
                      sample_properties, sample_positions,
                      mass_connectivity_filter, cor_inferability_filter,
                      reference_distance, generate_dataset, load_dataset)
from .model import (PerceptionConfig, PredictionConfig, LossConfig,
                    TrainConfig, LatentDynamicsModel,
                    ConditionedDynamicsModel, prepare_arrays,
                    ground_truth_latents, train_model, load_model)
from .errors import ConfigError, DataError, NumericError

__version__ = "0.1.0"
