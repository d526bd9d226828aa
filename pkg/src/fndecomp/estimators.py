"""scikit-learn style wrappers around both decomposition back-ends.

Both estimators take volumes (see :func:`fndecomp.validation.check_volumes`)
and ``transform`` them into per-subject feature vectors (flattened network
loadings, channel-major), so they slot into a ``Pipeline`` ahead of any
regressor.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import flatten, volume_to_fns
from .evaluation import extract_features, match_fns, ridge_fit
from .factorization import nmf_decompose
from .model import ModelConfig, predict_fns
from .trainer import TRAIN_LAMBDA, TRAIN_RIDGE, TrainConfig, prepare_subjects, train
from .validation import check_data_matrix, check_same_geometry, check_volumes


class SparseNMF(TransformerMixin, BaseEstimator):
    """Per-subject Hoyer-regularized semi-NMF.

    ``fit`` runs one decomposition on the temporally concatenated subjects to
    get group networks (``components_``). ``transform`` decomposes every
    subject starting from the group networks and reorders its networks to
    match them, so features are comparable across subjects.
    """

    def __init__(self, n_networks=17, lam=1e-3, max_iter=1000, tol=1e-6, normalize="unit", random_state=0):
        self.n_networks = n_networks
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol
        self.normalize = normalize
        self.random_state = random_state

    def fit(self, X, y=None):
        vols = check_volumes(X)
        _, mask = check_same_geometry(vols)
        stacked = np.vstack([flatten(v, mask, self.normalize).X for v in vols])
        _, V, trace = nmf_decompose(stacked, self.n_networks, self.lam, self.max_iter, self.tol,
                                    seed=self.random_state)
        self.components_ = V
        self.mask_ = mask
        self.trace_ = trace
        return self

    def decompose(self, volume):
        """``(U, V, trace)`` for one subject, networks in group order."""
        check_is_fitted(self, "components_")
        X = flatten(check_volumes(volume)[0], self.mask_, self.normalize).X
        U, V, trace = nmf_decompose(X, self.n_networks, self.lam, self.max_iter, self.tol,
                                    seed=self.random_state, V_init=self.components_)
        order = np.argsort(match_fns(V, self.components_).permutation)
        return U[:, order], V[order], trace

    def transform(self, X):
        return np.stack([extract_features(self.decompose(v)[1]) for v in check_volumes(X)])


class DeepFNDecomposer(TransformerMixin, BaseEstimator):
    """Self-supervised convolutional decomposer trained on the substituted
    factorization loss."""

    def __init__(self, n_networks=17, channels=16, lam=TRAIN_LAMBDA, lr=1e-4, iterations=2000, ridge=TRAIN_RIDGE,
                 leaky_slope=0.2, skip_connections=True, stop_max_gradient=False,
                 normalize="unit", random_state=0):
        self.n_networks = n_networks
        self.channels = channels
        self.lam = lam
        self.lr = lr
        self.iterations = iterations
        self.ridge = ridge
        self.leaky_slope = leaky_slope
        self.skip_connections = skip_connections
        self.stop_max_gradient = stop_max_gradient
        self.normalize = normalize
        self.random_state = random_state

    def _configs(self):
        model = ModelConfig(channels=self.channels, n_networks=self.n_networks, leaky_slope=self.leaky_slope,
                            skip_connections=self.skip_connections, stop_max_gradient=self.stop_max_gradient,
                            normalize=self.normalize)
        return model, TrainConfig(lam=self.lam, lr=self.lr, iterations=self.iterations, ridge=self.ridge,
                                  seed=self.random_state)

    def fit(self, X, y=None):
        vols = check_volumes(X)
        _, mask = check_same_geometry(vols)
        model, tc = self._configs()
        params, state, trace = train(vols, model, tc, prepared=prepare_subjects(vols, model))
        self.params_ = params
        self.model_config_ = model
        self.mask_ = mask
        self.trace_ = trace
        return self

    def predict_fns(self, X):
        """One ``W x H x D x K`` FN volume per input subject."""
        check_is_fitted(self, "params_")
        return [predict_fns(v, self.params_, self.model_config_, self.mask_) for v in check_volumes(X)]

    def transform(self, X):
        return np.stack([extract_features(volume_to_fns(f, self.mask_)) for f in self.predict_fns(X)])


class RidgeRegression(RegressorMixin, BaseEstimator):
    """Ridge regression on fold-standardized features with an unpenalized
    intercept."""

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def fit(self, X, y):
        self.model_ = ridge_fit(check_data_matrix(X), np.asarray(y, dtype=np.float64), self.alpha)
        self.coef_ = self.model_.weights
        self.intercept_ = self.model_.intercept
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_data_matrix(X))
