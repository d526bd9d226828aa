"""Input checks shared by the estimators and the command line."""

import numpy as np

from .data import Volume4D
from .tensor import NonFiniteError, check_finite


def check_volumes(X):
    """Coerce ``X`` to a list of :class:`Volume4D`.

    Accepts a single volume, a sequence of volumes or arrays, a 4-D array
    (one subject) or a 5-D array ``(n, W, H, D, T)``.
    """
    if isinstance(X, Volume4D):
        vols = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 4:
        vols = [Volume4D(X)]
    elif isinstance(X, np.ndarray) and X.ndim == 5:
        vols = [Volume4D(x) for x in X]
    else:
        vols = [v if isinstance(v, Volume4D) else Volume4D(np.asarray(v)) for v in X]
    if not vols:
        raise ValueError("no volumes given")
    for i, v in enumerate(vols):
        try:
            check_finite(v.values, f"volume {i}")
        except NonFiniteError as exc:
            raise ValueError(str(exc)) from None
    return vols


def check_same_geometry(volumes):
    spatial = volumes[0].spatial
    mask = volumes[0].full_mask()
    for i, v in enumerate(volumes[1:], 1):
        if v.spatial != spatial:
            raise ValueError(f"volume {i} has extents {v.spatial}, expected {spatial}")
        if not np.array_equal(v.full_mask(), mask):
            raise ValueError(f"volume {i} has a different mask")
    return spatial, mask


def check_data_matrix(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or 0 in X.shape:
        raise ValueError(f"{name} must be a nonempty 2-D array, got shape {X.shape}")
    try:
        return check_finite(X, name)
    except NonFiniteError as exc:
        raise ValueError(str(exc)) from None


def check_fn_stack(V, n_voxels=None):
    V = check_data_matrix(V, "V")
    if np.any(V < 0):
        raise ValueError("network loadings must be nonnegative")
    if n_voxels is not None and V.shape[1] != n_voxels:
        raise ValueError(f"V has {V.shape[1]} voxels, expected {n_voxels}")
    return V
