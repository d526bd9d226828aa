"""Hoyer-regularized semi-nonnegative matrix factorization.

The data matrix ``X`` is ``T x S`` (time points by voxels), the networks ``V``
are ``K x S`` and nonnegative, the time courses ``U`` are ``T x K`` and
unconstrained. The joint objective is

    ||X - U V||_F^2 + lam * sum_k ||V_k||_1 / ||V_k||_2

and for fixed ``V`` the optimal time courses are ``U = X V^T (V V^T)^-1``.
Substituting that solve gives a loss in ``V`` alone, which is what the deep
model is trained on (:func:`substituted_loss_graph`).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor import SingularMatrixError, frobenius_sq, inverse

HOYER_EPS = 1e-12
SCALE_EPS = 1e-8
RIDGE = 1e-8


class DegenerateNetworksError(ValueError):
    """``V V^T`` is singular even after ridging; ``rows`` names the culprits."""

    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"networks {self.rows} are degenerate (linearly dependent or empty)")


@dataclass(frozen=True)
class LossBreakdown:
    data_fit: float
    sparsity: float
    total: float
    lam: float


def hoyer_penalty(V, eps=HOYER_EPS):
    """Sum over rows of the L1/L2 ratio; each row contributes between 1 and
    sqrt(S)."""
    V = np.asarray(V, dtype=np.float64)
    l1 = np.abs(V).sum(axis=1)
    l2 = np.maximum(np.sqrt((V * V).sum(axis=1)), eps)
    return float(np.sum(l1 / l2))


def hoyer_gradient(V, eps=HOYER_EPS, nonnegative=False):
    """Gradient of :func:`hoyer_penalty`.

    With ``nonnegative=True`` the L1 term is differentiated as ``sum(V)``,
    which is exact on the feasible set ``V >= 0`` including its boundary.
    """
    V = np.asarray(V, dtype=np.float64)
    l1 = np.abs(V).sum(axis=1, keepdims=True)
    l2 = np.sqrt((V * V).sum(axis=1, keepdims=True))
    clamped = l2 < eps
    l2 = np.maximum(l2, eps)
    g = (np.ones_like(V) if nonnegative else np.sign(V)) / l2 - np.where(clamped, 0.0, l1 / l2**3) * V
    return g


def _degenerate_rows(V):
    V = np.asarray(V, dtype=np.float64)
    norms = np.sqrt((V * V).sum(axis=1))
    rows = [int(i) for i in np.flatnonzero(norms <= SCALE_EPS * max(norms.max(initial=0.0), 1.0))]
    if rows:
        return rows
    # pivot-free fallback: rows that add no rank beyond the earlier ones
    out = []
    for i in range(1, V.shape[0]):
        if np.linalg.matrix_rank(V[: i + 1]) <= np.linalg.matrix_rank(V[:i]):
            out.append(i)
    return out or list(range(V.shape[0]))


def solve_timecourses(X, V, ridge=RIDGE):
    """Least-squares time courses ``U = X V^T (V V^T + r I)^-1`` for fixed ``V``.

    Raises
    ------
    DegenerateNetworksError
        If ``V V^T`` stays singular after the relative ridge.
    """
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if X.shape[1] != V.shape[1]:
        raise ValueError(f"X has {X.shape[1]} voxels but V has {V.shape[1]}")
    try:
        G_inv = inverse(V @ V.T, ridge)
    except SingularMatrixError:
        raise DegenerateNetworksError(_degenerate_rows(V)) from None
    return (X @ V.T) @ G_inv


def joint_objective(X, U, V, lam):
    """The objective evaluated at an arbitrary pair ``(U, V)``."""
    X = np.asarray(X, dtype=np.float64)
    fit = frobenius_sq(X - U @ V)
    sparsity = hoyer_penalty(V)
    return LossBreakdown(fit, sparsity, fit + lam * sparsity, lam)


def substituted_loss(X, V, lam, ridge=RIDGE):
    """Objective with ``U`` replaced by its analytic solve."""
    U = solve_timecourses(X, V, ridge)
    return joint_objective(X, U, V, lam)


def substituted_loss_graph(X, V, lam, ridge=RIDGE, eps=HOYER_EPS):
    """Differentiable version of :func:`substituted_loss`.

    ``X`` is a constant ``T x S`` array (or node) and ``V`` a ``K x S`` node on
    the same tape. Returns ``(total, data_fit, sparsity)`` nodes.
    """
    tape = V.tape
    if not isinstance(X, ad.Node):
        X = tape.constant(np.asarray(X, dtype=V.dtype))
    Vt = ad.transpose(V)
    G_inv = ad.inverse(ad.matmul(V, Vt), ridge)
    U = ad.matmul(ad.matmul(X, Vt), G_inv)
    data_fit = ad.frobenius_sq(ad.sub(X, ad.matmul(U, V)))
    l1 = ad.sum(ad.abs(V), axis=1)
    l2 = ad.maximum(ad.sqrt(ad.sum(ad.square(V), axis=1)), eps)
    sparsity = ad.sum(ad.div(l1, l2))
    total = ad.add(data_fit, ad.scale(sparsity, lam))
    return total, data_fit, sparsity


def scale_rows_max1(V, eps=SCALE_EPS):
    """Divide each row by its maximum; rows with maximum <= ``eps`` are left
    as they are."""
    V = np.asarray(V, dtype=np.float64)
    m = V.max(axis=1, keepdims=True)
    return V / np.where(m > eps, m, 1.0)


def _spherical_kmeans(Xn, K, rng, n_init=10, max_iter=100):
    """Cluster the unit columns of ``Xn`` by cosine similarity."""
    S = Xn.shape[1]
    best, best_score = None, -np.inf
    for _ in range(n_init):
        centers = Xn[:, rng.choice(S, size=K, replace=False)].copy()
        labels = None
        for _ in range(max_iter):
            sim = centers.T @ Xn
            new = np.argmax(sim, axis=0)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for k in range(K):
                members = Xn[:, labels == k]
                c = members.sum(axis=1) if members.size else Xn[:, rng.integers(S)]
                nrm = np.linalg.norm(c)
                centers[:, k] = c / nrm if nrm > 0 else Xn[:, rng.integers(S)]
        score = float(np.sum(np.max(centers.T @ Xn, axis=0)))
        if score > best_score:
            best, best_score = (labels, centers), score
    return best


def init_networks(X, K, seed=0):
    """Initial ``V`` from spherical k-means on the voxel time series.

    Each voxel loads only on its cluster, with weight equal to the positive
    part of its projection on the cluster direction.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    norms = np.linalg.norm(X, axis=0)
    live = norms > SCALE_EPS * max(norms.max(initial=0.0), 1.0)
    if np.count_nonzero(live) < K:
        raise ValueError("fewer nonzero voxels than requested networks")
    Xn = X[:, live] / norms[live]
    labels, centers = _spherical_kmeans(Xn, K, rng)
    V = np.zeros((K, X.shape[1]))
    proj = np.maximum(centers.T @ X[:, live], 0.0)
    V[labels, np.flatnonzero(live)] = proj[labels, np.arange(labels.size)]
    empty = V.max(axis=1) <= 0
    V[empty] = 1.0 / X.shape[1]
    return scale_rows_max1(V)


def _floor_rows(V, eps=HOYER_EPS):
    dead = V.max(axis=1) <= 0
    if np.any(dead):
        V = V.copy()
        V[dead] = eps
    return V


def nmf_decompose(X, K, lam=1e-3, max_iters=1000, tol=1e-6, seed=0, V_init=None,
                  armijo=1e-4, max_backtracks=40):
    """Alternating minimization of the Hoyer-penalized semi-NMF objective.

    Each sweep solves ``U`` analytically and then takes one projected-gradient
    step on ``V`` (``V >= 0``) with backtracking; a step is accepted only if it
    lowers the objective. The run stops after ``max_iters`` sweeps, when the
    relative change of the objective falls below ``tol``, or when no step
    along the projected gradient lowers the objective.

    Returns
    -------
    U : ndarray (T, K)
    V : ndarray (K, S), rows scaled to maximum 1
    trace : list of float
        Objective after initialization and after every accepted sweep.
    """
    X = np.asarray(X, dtype=np.float64)
    T, S = X.shape
    if not 1 <= K <= min(T, S):
        raise ValueError(f"K={K} must lie in [1, min(T, S)={min(T, S)}]")
    V = init_networks(X, K, seed) if V_init is None else np.maximum(np.asarray(V_init, dtype=np.float64), 0)
    V = _floor_rows(V)
    U = solve_timecourses(X, V)
    f = joint_objective(X, U, V, lam).total
    trace = [f]
    step = None
    for _ in range(max_iters):
        UtU = U.T @ U
        grad = 2.0 * (UtU @ V - U.T @ X)
        if lam:
            grad += lam * hoyer_gradient(V, nonnegative=True)
        if step is None:
            step = 0.5 / max(np.linalg.eigvalsh(UtU).max(), 1e-12)
        else:
            step *= 2.0
        accepted = False
        for _ in range(max_backtracks):
            V_new = _floor_rows(np.maximum(V - step * grad, 0.0))
            f_new = joint_objective(X, U, V_new, lam).total
            if f_new <= f + armijo * np.sum(grad * (V_new - V)) and f_new < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        V = V_new
        U_new = solve_timecourses(X, V)
        f_new = joint_objective(X, U_new, V, lam).total
        # the analytic solve cannot raise the objective; guard against roundoff
        if f_new <= joint_objective(X, U, V, lam).total:
            U = U_new
        else:
            f_new = joint_objective(X, U, V, lam).total
        rel = (f - f_new) / max(abs(f), 1e-300)
        f = f_new
        trace.append(f)
        if rel < tol:
            break
    scale = V.max(axis=1)
    scale = np.where(scale > SCALE_EPS, scale, 1.0)
    return U * scale, V / scale[:, None], trace
