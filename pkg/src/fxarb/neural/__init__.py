from .autodiff import Tape, TapeError, Var
from .gnn import (
    FeatureScaler,
    GnnParams,
    GraphBatch,
    Slp,
    count_params,
    forward,
    gradients,
    init_gnn,
    width_for_budget,
)
from .optim import Adam

__all__ = [
    "Adam", "FeatureScaler", "GnnParams", "GraphBatch", "Slp", "Tape", "TapeError", "Var",
    "count_params", "forward", "gradients", "init_gnn", "width_for_budget",
]
