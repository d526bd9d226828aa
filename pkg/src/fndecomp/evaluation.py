"""Scoring of recovered networks and the cross-validated prediction protocol."""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

LABEL_SENTINEL = -1
DEFAULT_ALPHAS = np.logspace(-3, 3, 13)


class DegenerateTargetsError(ValueError):
    """Targets have zero variance, so a correlation is undefined."""


def pearson(a, b):
    """Two-pass Pearson correlation; 0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    return float(np.dot(da, db) / denom) if denom > 0 else 0.0


def correlation_matrix(A, B):
    """Pearson correlation between every row of ``A`` and every row of ``B``;
    pairs involving a constant row get 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = B - B.mean(axis=1, keepdims=True)
    na = np.linalg.norm(Ac, axis=1)
    nb = np.linalg.norm(Bc, axis=1)
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = np.where(denom > 0, (Ac @ Bc.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(C, -1.0, 1.0)


@dataclass
class MatchResult:
    permutation: np.ndarray  # permutation[k] = truth index matched to predicted network k
    correlations: np.ndarray  # correlation of each predicted network with its match
    mean_correlation: float


def match_fns(pred, truth):
    """Assign predicted to true networks maximizing the total correlation
    (Hungarian algorithm)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"stacks differ in shape: {pred.shape} vs {truth.shape}")
    C = correlation_matrix(pred, truth)
    rows, cols = linear_sum_assignment(C, maximize=True)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    corr = C[np.arange(len(perm)), perm]
    return MatchResult(perm, corr, float(corr.mean()))


def fn_label_map(fns, mask=None):
    """Per-voxel index of the network with the largest loading.

    ``fns`` is ``W x H x D x K``. Ties go to the lowest index; voxels outside
    ``mask`` get :data:`LABEL_SENTINEL`.
    """
    fns = np.asarray(fns)
    labels = np.argmax(fns, axis=-1).astype(np.int32)
    if mask is not None:
        labels[~np.asarray(mask, dtype=bool)] = LABEL_SENTINEL
    return labels


def extract_features(V):
    """Flatten a ``K x S`` stack channel-major into one feature vector."""
    return np.asarray(V, dtype=np.float64).reshape(-1)


def features_to_stack(features, K):
    features = np.asarray(features)
    return features.reshape(K, -1)


# ridge regression

@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    mean: np.ndarray
    scale: np.ndarray
    alpha: float

    def predict(self, features):
        return _standardize(features, self.mean, self.scale) @ self.weights + self.intercept


def _fold_stats(F):
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    # constant features carry no information; centering maps them to zero
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _standardize(F, mean, scale):
    return (np.asarray(F, dtype=np.float64) - mean) / scale


def _svd_path(Z, yc, alphas):
    """Ridge weights for every alpha from one thin SVD of the design."""
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    tol = s.max(initial=0.0) * max(Z.shape) * np.finfo(np.float64).eps
    uty = U.T @ yc
    coefs = []
    for a in alphas:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(s > tol, s / (s * s + a), 0.0)
        coefs.append(Vt.T @ (d * uty))
    return np.array(coefs)


def ridge_fit(features, targets, alpha):
    """Closed-form ridge regression with an unpenalized intercept.

    Features are standardized with the training statistics, which the
    returned model reuses at prediction time.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if F.shape[0] < 2:
        raise ValueError("ridge_fit needs at least two samples")
    mean, scale = _fold_stats(F)
    Z = _standardize(F, mean, scale)
    w = _svd_path(Z, y - y.mean(), [alpha])[0]
    return RidgeModel(w, float(y.mean()), mean, scale, float(alpha))


def _ridge_predictions(F_tr, y_tr, F_te, alphas):
    mean, scale = _fold_stats(F_tr)
    Z = _standardize(F_tr, mean, scale)
    W = _svd_path(Z, y_tr - y_tr.mean(), alphas)
    return W @ _standardize(F_te, mean, scale).T + y_tr.mean()


def _splits(indices, n_folds, rng):
    perm = rng.permutation(indices)
    return np.array_split(perm, n_folds)


def outer_splits(n, n_folds, seed, repetition):
    """Outer test folds used by :func:`nested_cv_predict` for one repetition."""
    return _splits(np.arange(n), n_folds, np.random.default_rng([seed, repetition]))


@dataclass
class PredictionReport:
    correlations: np.ndarray
    maes: np.ndarray
    alphas: list = field(default_factory=list)  # per repetition, chosen alpha of each outer fold
    predictions: list = field(default_factory=list)

    @property
    def mean_r(self):
        return float(np.mean(self.correlations))

    @property
    def sd_r(self):
        return float(np.std(self.correlations))

    @property
    def mean_mae(self):
        return float(np.mean(self.maes))

    @property
    def sd_mae(self):
        return float(np.std(self.maes))


def nested_cv_predict(features, targets, outer_folds=2, inner_folds=2, repetitions=100,
                      alphas=None, seed=0):
    """Repeated K-fold ridge prediction with alpha chosen by an inner K-fold CV.

    In every repetition the samples are shuffled and split into
    ``outer_folds``; for each training part an inner CV selects the alpha
    with the lowest MAE, the model is refit with it and applied to the held
    out fold. Pearson r and MAE are computed over the concatenated held-out
    predictions.
    """
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n = F.shape[0]
    if n < 2 * outer_folds:
        raise ValueError(f"need at least {2 * outer_folds} samples, got {n}")
    if np.var(y) == 0:
        raise DegenerateTargetsError("targets have zero variance; correlation is undefined")
    alphas = DEFAULT_ALPHAS if alphas is None else np.asarray(alphas, dtype=np.float64)
    corrs, maes, chosen, preds = [], [], [], []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        folds = _splits(np.arange(n), outer_folds, rng)
        pred = np.empty(n)
        rep_alphas = []
        for k, test in enumerate(folds):
            train = np.concatenate([f for j, f in enumerate(folds) if j != k])
            inner = _splits(train, inner_folds, rng)
            errors = np.zeros(len(alphas))
            for j, val in enumerate(inner):
                fit_idx = np.concatenate([f for i, f in enumerate(inner) if i != j])
                p = _ridge_predictions(F[fit_idx], y[fit_idx], F[val], alphas)
                errors += np.abs(p - y[val]).sum(axis=1)
            best = float(alphas[int(np.argmin(errors))])
            rep_alphas.append(best)
            pred[test] = _ridge_predictions(F[train], y[train], F[test], [best])[0]
        corrs.append(pearson(pred, y))
        maes.append(float(np.mean(np.abs(pred - y))))
        chosen.append(rep_alphas)
        preds.append(pred)
    return PredictionReport(np.array(corrs), np.array(maes), chosen, preds)


def write_prediction_report(path, report):
    with open(path, "w") as fh:
        fh.write("repetition\tpearson_r\tmae\talphas\n")
        for i, (r, m, a) in enumerate(zip(report.correlations, report.maes, report.alphas)):
            fh.write(f"{i}\t{r!r}\t{m!r}\t{','.join(repr(x) for x in a)}\n")
        fh.write(f"# mean_r\t{report.mean_r!r}\n# sd_r\t{report.sd_r!r}\n")
        fh.write(f"# mean_mae\t{report.mean_mae!r}\n# sd_mae\t{report.sd_mae!r}\n")
