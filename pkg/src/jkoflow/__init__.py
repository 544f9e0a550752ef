"""Learn-to-Evolve training of attention-based neural JKO operators on particle ensembles."""

from .energy import KL, External, Interaction, PorousInternal, evaluate_energy, kernel_value
from .geometry import (DisplacementField, NumericError, ParticleEnsemble, StructuralError,
                       apply_map, chamfer_distance, estimate_divergence, recenter)
from .loss import accumulated_loss, better_than_birth, jko_step_loss, trajectory_loss
from .operator import Conditioning, NeuralJKO, OperatorConfig
from .oracles import BarenblattSpec, barenblatt_density, gaussian_kl, ring_radius
from .training import (TrainConfig, generate_trajectory, learn_to_evolve, sample_initials,
                       train_baseline)

__version__ = "0.1.0"
