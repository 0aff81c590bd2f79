"""PCA reconstruction objective, its gradients, and stationary-point utilities.

Subspace estimates ``W`` and gradient matrices are plain ``(D, d)`` arrays.
The orthonormality constraint is never enforced; descent runs on the
unconstrained objective whose minimizers span the principal subspace.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import DataMatrix, DeviceShard


class ConvergenceError(RuntimeError):
    def __init__(self, message, best_estimate):
        super().__init__(message)
        self.best_estimate = best_estimate


class AmbiguousStationaryPoint(ValueError):
    pass


def initial_subspace(D: int, d: int) -> np.ndarray:
    """W_0 = [I_d, 0]^T."""
    return np.eye(D, d)


def _check_shape(w, D):
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != D:
        raise ValueError(f"W has shape {w.shape}, data dimension is {D}")
    return w


def objective(w, data: DataMatrix) -> float:
    """Mean squared reconstruction error (1/L) sum_i ||x_i - W W^T x_i||^2."""
    w = _check_shape(w, data.D)
    x = data.samples
    if data.L == 0:
        raise ValueError("empty dataset")
    resid = x - w @ (w.T @ x)
    return float(np.sum(resid * resid) / data.L)


def gradient_from_covariance(w, cov, n_samples):
    """(2/n) [-2R + R W W^T + W W^T R] W, evaluated without forming D x D products.

    ``cov`` may be a stack ``(K, D, D)`` with ``n_samples`` broadcastable to K,
    in which case a ``(K, D, d)`` stack of gradients is returned.
    """
    rw = cov @ w
    wtw = w.T @ w
    wtrw = w.T @ rw
    g = -2.0 * rw + rw @ wtw + w @ wtrw
    scale = 2.0 / np.asarray(n_samples, dtype=float)
    if g.ndim == 3:
        scale = np.broadcast_to(scale, (g.shape[0],))[:, None, None]
    return scale * g


def full_gradient(w, data: DataMatrix) -> np.ndarray:
    """Gradient of ``objective`` computed directly on the whole dataset."""
    w = _check_shape(w, data.D)
    return gradient_from_covariance(w, data.covariance(), data.L)


def local_gradient(w, shard: DeviceShard, batch_size=None, rng=None) -> np.ndarray:
    """Device gradient on the full shard or on a uniformly drawn mini-batch."""
    w = _check_shape(w, shard.local_data.shape[0])
    if batch_size is None or batch_size == shard.size:
        return gradient_from_covariance(w, shard.covariance, shard.size)
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if batch_size > shard.size:
        raise ValueError(f"batch_size {batch_size} exceeds shard size {shard.size}")
    rng = np.random.default_rng(rng)
    cols = rng.choice(shard.size, size=batch_size, replace=False)
    xb = shard.local_data[:, cols]
    return gradient_from_covariance(w, xb @ xb.T, batch_size)


def local_gradients(w, covs: np.ndarray, sizes) -> np.ndarray:
    """Vectorized full-batch gradients for a stack of device covariances."""
    return gradient_from_covariance(w, covs, sizes)


def minibatch_average(w, shard: DeviceShard, batch_size: int) -> np.ndarray:
    """Exact expectation of the mini-batch gradient, by enumerating all batches.

    Only meant for tiny shards; used to check unbiasedness.
    """
    acc = np.zeros_like(np.asarray(w, dtype=float))
    count = 0
    for cols in combinations(range(shard.size), batch_size):
        xb = shard.local_data[:, list(cols)]
        acc += gradient_from_covariance(w, xb @ xb.T, batch_size)
        count += 1
    return acc / count


def global_gradient(gradients: Sequence[np.ndarray]) -> np.ndarray:
    if len(gradients) == 0:
        raise ValueError("need at least one local gradient")
    stack = np.asarray(gradients, dtype=float)
    return stack.mean(axis=0)


def sgd_step(w, noisy_gradient, mu: float) -> np.ndarray:
    if mu <= 0:
        raise ValueError(f"step size must be positive, got {mu}")
    noisy_gradient = np.asarray(noisy_gradient, dtype=float)
    if not np.all(np.isfinite(noisy_gradient)):
        raise FloatingPointError("non-finite entries in the aggregated gradient")
    return np.asarray(w, dtype=float) - mu * noisy_gradient


class CentralizedResult(NamedTuple):
    w: np.ndarray
    objective: float
    rank_deficient: bool


def centralized_pca(data: DataMatrix, d: int) -> CentralizedResult:
    """Top-d left singular vectors of X and the objective they attain.

    When d exceeds rank(X) the trailing columns are arbitrary orthonormal
    null-space directions and ``rank_deficient`` is set.
    """
    if d > data.D:
        raise ValueError(f"d={d} exceeds data dimension D={data.D}")
    u, s, _ = np.linalg.svd(data.samples, full_matrices=True)
    w = u[:, :d].copy()
    tol = max(data.D, data.L) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    return CentralizedResult(w, objective(w, data), d > rank)


@dataclass(frozen=True)
class StationaryPointSpec:
    eigen_indices: tuple
    rotation: np.ndarray | None = None

    def __post_init__(self):
        idx = tuple(int(i) for i in self.eigen_indices)
        if len(set(idx)) != len(idx):
            raise ValueError("eigen_indices must be distinct")
        object.__setattr__(self, "eigen_indices", idx)
        if self.rotation is not None:
            q = np.asarray(self.rotation, dtype=float)
            if q.shape != (len(idx), len(idx)):
                raise ValueError("rotation must be d x d")
            if not np.allclose(q.T @ q, np.eye(len(idx)), atol=1e-10):
                raise ValueError("rotation is not orthogonal")
            object.__setattr__(self, "rotation", q)


def sorted_eigh(cov):
    """Eigenpairs of a symmetric matrix in descending eigenvalue order."""
    vals, vecs = np.linalg.eigh(cov)
    return vals[::-1], vecs[:, ::-1]


def make_stationary_point(data: DataMatrix, spec: StationaryPointSpec, rel_tol=1e-9):
    """W = U_S Q for the eigenvectors of X X^T indexed by ``spec``.

    Raises AmbiguousStationaryPoint if a selected eigenvalue coincides with an
    unselected one, since the eigenvector choice would then be arbitrary.
    """
    idx = list(spec.eigen_indices)
    if max(idx) >= data.D or min(idx) < 0:
        raise ValueError(f"eigen index out of range for D={data.D}")
    vals, vecs = sorted_eigh(data.covariance())
    scale = max(abs(vals[0]), np.finfo(float).tiny)
    outside = np.setdiff1d(np.arange(data.D), idx)
    if outside.size:
        gaps = np.abs(vals[idx][:, None] - vals[outside][None, :])
        if gaps.min() <= rel_tol * scale:
            raise AmbiguousStationaryPoint(
                "selected eigenvalue is repeated outside the index set; eigenvectors are not unique"
            )
    w = vecs[:, idx]
    if spec.rotation is not None:
        w = w @ spec.rotation
    return w


def hessian_vector_product(w, v, data: DataMatrix, h=None):
    """Central finite difference of the gradient along direction v."""
    if h is None:
        h = 1e-5 * max(1.0, np.linalg.norm(w))
    return (full_gradient(w + h * v, data) - full_gradient(w - h * v, data)) / (2 * h)


def rotation_tangent_basis(w):
    """Orthonormal basis (columns, flattened) of {W A : A skew-symmetric}.

    These are the flat directions produced by the invariance F(WQ) = F(W).
    """
    D, d = w.shape
    dirs = []
    for i in range(d):
        for j in range(i + 1, d):
            a = np.zeros((d, d))
            a[i, j], a[j, i] = 1.0, -1.0
            dirs.append((w @ a).ravel())
    if not dirs:
        return np.zeros((D * d, 0))
    q, r = np.linalg.qr(np.array(dirs).T)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    return q[:, keep]


def min_hessian_eigenvalue(
    w,
    data: DataMatrix,
    tol: float = 1e-6,
    max_iter: int = 20000,
    seed=0,
    quotient_rotations: bool = False,
):
    """Smallest Hessian eigenvalue of the objective at W via shifted power iteration.

    Hessian-vector products come from finite differences of the analytic
    gradient. With ``quotient_rotations`` the rotation-invariance directions
    are projected out, so the estimate is the smallest curvature transverse
    to the orbit {W Q}.
    """
    w = _check_shape(w, data.D)
    if w.size > 500:
        raise ValueError("min_hessian_eigenvalue is limited to D*d <= 500")
    shape = w.shape
    proj = rotation_tangent_basis(w) if quotient_rotations else None

    def project(x):
        if proj is None or proj.shape[1] == 0:
            return x
        return x - proj @ (proj.T @ x)

    def hv(x):
        x = project(x)
        return project(hessian_vector_product(w, x.reshape(shape), data).ravel())

    rng = np.random.default_rng(seed)

    def power(op, shift):
        v = project(rng.standard_normal(w.size))
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
        lam = None
        for _ in range(max_iter):
            u = op(v)
            new = float(v @ u)
            nu = np.linalg.norm(u)
            if nu == 0:
                return new
            v = u / nu
            if lam is not None and abs(new - lam) < 0.01 * tol:
                return new
            lam = new
        raise ConvergenceError("power iteration did not converge", lam)

    # dominant magnitude first, then iterate on (s I - H) to reach the bottom
    top = abs(power(hv, 0.0))
    if top == 0.0:
        return 0.0
    shift = 1.05 * top
    try:
        mu = power(lambda x: shift * project(x) - hv(x), shift)
    except ConvergenceError as err:
        raise ConvergenceError(str(err), shift - err.best_estimate) from None
    return shift - mu


def dense_hessian(w, data: DataMatrix, h: float = 1e-4) -> np.ndarray:
    """Dense Hessian from second differences of the objective itself.

    Independent of the analytic gradient; for small test problems only.
    """
    w = np.asarray(w, dtype=float)
    n = w.size
    base = w.ravel()
    f = lambda x: objective(x.reshape(w.shape), data)
    H = np.empty((n, n))
    e = np.eye(n) * h
    f0 = f(base)
    for i in range(n):
        H[i, i] = (f(base + e[i]) - 2 * f0 + f(base - e[i])) / h**2
        for j in range(i + 1, n):
            val = (
                f(base + e[i] + e[j]) - f(base + e[i] - e[j]) - f(base - e[i] + e[j]) + f(base - e[i] - e[j])
            ) / (4 * h**2)
            H[i, j] = H[j, i] = val
    return H
