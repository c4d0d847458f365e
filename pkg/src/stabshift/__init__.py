"""Stability-aware detection of context distribution shifts in simulated dynamical systems.

A learned encoder maps contexts to a latent that is uniform on baseline data and
informative about the simulated trajectory; shifts are then tested as two-sample
discrepancies between latent samples.
"""

from .errors import (
    ConfigError,
    ConstraintDriftError,
    DegenerateLabelsError,
    DivergenceError,
    InfeasibleRatioError,
    NumericalError,
    ParseError,
    StabShiftError,
    TrainingFailure,
)
from .experiment import ExperimentConfig, build_training_set, run_experiment, run_method
from .latent_tests import TestResult, mmd2_vstat, permutation_test
from .surrogate import SurrogateModel, TrainConfig, train

__version__ = "0.1.0"
