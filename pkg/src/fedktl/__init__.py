"""Heterogeneous federated learning through a frozen generator's latent space.

Clients with different extractors share one fixed simplex ETF head and upload
class prototypes. The server maps them into the generator's latent domain and
returns image and latent pairs that every client learns to regress.
"""
from .etf import ArcFaceParams, SimplexETF, arcface_loss, synthesize_etf
from .experiment import (ABLATIONS, ConfigError, ExperimentConfig, NoiseConfig, run_experiment,
                         run_trial, single_client_config)

__version__ = "0.1.0"

__all__ = ["ABLATIONS", "ArcFaceParams", "ConfigError", "ExperimentConfig", "NoiseConfig",
           "SimplexETF", "arcface_loss", "run_experiment", "run_trial", "single_client_config",
           "synthesize_etf", "__version__"]
