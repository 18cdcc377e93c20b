"""Reduced-exposure EDS phase mapping.

Synthetic phantoms and spectrum libraries, a two-tier spectrum classifier
(ill-spectrum detector followed by a 1D CNN), and SLADS dynamic sampling with
a K-nearest-neighbour label reconstruction.
"""
from .classifier import CNNClassifier, TwoTierClassifier, build_cnn
from .config import ExperimentConfig
from .detector import NNRDetector
from .experiment import RunReport, StageError, run_experiment
from .metrics import misclassification_rate, total_distortion
from .nn import ConfigurationError, Network, TrainingError
from .phantom import (
    PhaseLibrary,
    SimulatedObject,
    build_simulated_object,
    gen_ill_spectrum,
    synth_label_image,
    synth_phase_spectra,
)
from .reconstruction import LabelField, MeasurementSet, reconstruct
from .slads import SamplingConfig, run_random_sampling, run_slads
from .training import ERDRegressor, TrainingCorpus, fit_theta, generate_pairs

__version__ = "0.1.0"

__all__ = [
    "CNNClassifier",
    "ConfigurationError",
    "ERDRegressor",
    "ExperimentConfig",
    "LabelField",
    "MeasurementSet",
    "NNRDetector",
    "Network",
    "PhaseLibrary",
    "RunReport",
    "SamplingConfig",
    "SimulatedObject",
    "StageError",
    "TrainingCorpus",
    "TrainingError",
    "TwoTierClassifier",
    "build_cnn",
    "build_simulated_object",
    "fit_theta",
    "gen_ill_spectrum",
    "generate_pairs",
    "misclassification_rate",
    "reconstruct",
    "run_experiment",
    "run_random_sampling",
    "run_slads",
    "synth_label_image",
    "synth_phase_spectra",
    "total_distortion",
]
