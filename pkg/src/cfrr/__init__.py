"""Counterfactual reciprocal recommendation: exposure-bias simulation, debiased
training objectives, ranking and fairness evaluation, and matching."""
from .core import DataError, ExposureLog, LoggedInteraction, PairSpace, SplitSpec, derive_rng, seeded_rng, split_log
from .evaluation import MetricsReport, evaluate_model
from .objectives import ObjectiveSpec, OutcomeModel, ScoringModel
from .propensity import PropensityConfig, PropensityModel, fit_propensity
from .synthgen import LatentWorld, SynthConfig, generate_world, simulate_log
from .trainer import TrainConfig, TrainLog, train

__version__ = "0.1.0"
