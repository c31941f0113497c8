"""Online multilinear dictionary learning for separable Tucker models."""

from .baselines import TModLearner, tmod_update
from .coding import SparseCore, code_omp, code_oracle_support
from .learner import LearnerConfig, OnlineMultilinearDL, StepReport
from .tensor import (contract_all_but_n, frobenius_inner, mode_n_product,
                     partial_reconstruct_excluding, refold, tucker_reconstruct, unfold)

__version__ = "0.1.0"

__all__ = [
    "LearnerConfig", "OnlineMultilinearDL", "StepReport", "SparseCore", "TModLearner",
    "code_omp", "code_oracle_support", "contract_all_but_n", "frobenius_inner",
    "mode_n_product", "partial_reconstruct_excluding", "refold", "tmod_update",
    "tucker_reconstruct", "unfold",
]
