"""Fourier amplitude mixing and gradient-agreement training for domain
generalization, with a synthetic multi-domain benchmark."""
from .core import Rng, sample_beta, sample_gaussian
from .data import GeneratorConfig, generate_dataset, load_dataset
from .digb import EnhancementState, OptimizerConfig, digb_step
from .estimator import DomainInvariantClassifier
from .harness import ExperimentConfig, run_ablation, run_experiment
from .network import Network, default_architecture
from .spectral import AmplitudeMixer, AugmentConfig, fft2, generate_contrastive, ifft2

__version__ = "0.1.0"

__all__ = [
    "AmplitudeMixer", "AugmentConfig", "DomainInvariantClassifier", "EnhancementState",
    "ExperimentConfig", "GeneratorConfig", "Network", "OptimizerConfig", "Rng",
    "default_architecture", "digb_step", "fft2", "generate_contrastive", "generate_dataset",
    "ifft2", "load_dataset", "run_ablation", "run_experiment", "sample_beta", "sample_gaussian",
]
