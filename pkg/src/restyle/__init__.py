"""Iterative residual inversion of a small frozen style-based generator."""

from .analysis import image_diff_maps, latent_change_table, quality_time_curves
from .bootstrap import alignment_probe, bootstrap_invert
from .config import ExperimentConfig, load_config
from .data import DatasetSpec, make_dataset
from .encoder import build_encoder, concat_input, encode
from .errors import ConfigurationError, ContractError, IngestionError, RestyleError, TrainingError
from .generator import build_generator, finetune_stylized, sample_latent, synthesize
from .losses import LossBundle, l2_loss, perceptual_loss, similarity, timed
from .pipeline import run_experiment
from .schemes import (
    InversionTrace, TrainConfig, hybrid_infer, naive_iterate, optimize_latent,
    restyle_infer, restyle_train, single_pass_infer,
)

__version__ = "0.1.0"
