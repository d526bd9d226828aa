"""Individual functional network decomposition of 4D fMRI.

Two back-ends estimate nonnegative network loadings ``V`` (``K x S``) for a
subject's scan ``X`` (``T x S``): a Hoyer-sparse semi-NMF solved per subject
(:mod:`fndecomp.factorization`) and a self-supervised convolutional
encoder-decoder trained on the factorization loss with the time courses
solved analytically (:mod:`fndecomp.model`, :mod:`fndecomp.trainer`).
"""

from .data import CohortSpec, Volume4D, generate_cohort, load_volume, save_volume
from .estimators import DeepFNDecomposer, RidgeRegression, SparseNMF
from .evaluation import match_fns, nested_cv_predict
from .factorization import nmf_decompose, substituted_loss
from .model import ModelConfig, predict_fns
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CohortSpec", "DeepFNDecomposer", "ModelConfig", "RidgeRegression", "SparseNMF", "TrainConfig",
    "Volume4D", "generate_cohort", "load_volume", "match_fns", "nested_cv_predict", "nmf_decompose",
    "predict_fns", "save_volume", "substituted_loss", "train",
]
