"""Simulation and verification toolkit for self-normalized processes in
online linear regression."""

from .gram import GramState, RescaleNeeded, gram_push, pinv, rescale_history, selfnorm_value, sm_inverse_update
from .predictors import Hedge, MetaPredictor, ProtocolError, VawPinv, VawReg, ZeroPredictor, make_predictor
from .environments import AdversaryD2, DyadicTree, SmoothEnvSpec, rejection_coupling, smooth_sample
from .analysis import RunTrace, bad_subseq_exact, bad_subseq_greedy, regret_from_trace
from .harness import ExperimentConfig, monte_carlo, optimize_tree, play_game, scaling_fit

__version__ = "0.1.0"
