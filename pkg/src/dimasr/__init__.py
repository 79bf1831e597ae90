"""Multilingual aspect-level valence-arousal regression.

Pipeline pieces: quadruplet corpus preprocessing (corpus), sentence-pair
encoding with a deterministic toy backend (encoding), a two-output regression
head with optional sigmoid-bounded transform (regressor), joint multilingual
training with early stopping (trainer), joint VA RMSE evaluation (metrics),
per-pair exhaustive ensemble subset search (ensemble), and a file-based batch
CLI (cli).
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    Instance,
    PairID,
    VAScore,
    parse_quadruplet_file,
    pool_pairs,
    preprocess,
    split_train_validation,
)
from .encoding import EncoderSpec, format_pair, toy_encode  # noqa: F401
from .ensemble import CandidatePool, EnsembleSelection, average_subset, search  # noqa: F401
from .metrics import EvalReport, Prediction, evaluate, rmse_va  # noqa: F401
from .regressor import HeadParams, bound, forward, mse_loss  # noqa: F401
from .trainer import Checkpoint, TrainConfig, default_grid, train, train_grid  # noqa: F401
