"""One-class SVM with RBF kernel, trained by an SMO-style pair solver.

The dual problem: minimize 0.5 * a' Q a subject to 0 <= a_i <= 1/(nu*n) and
sum(a) = 1, where Q_ij = exp(-gamma * ||x_i - x_j||^2). The solver repeatedly
picks the maximal KKT-violating pair (the coordinate most able to decrease the
objective against the coordinate most able to increase its mass) and moves mass
between them, keeping the equality constraint exact. The decision function is
f(x) = sum_i a_i K(s_i, x) - rho, zero on margin support vectors; nu bounds
the fraction of training points scored negative.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matrixio
from .errors import DimensionMismatch, FormatError, InvalidHyperparameter, NonFiniteInput

logger = logging.getLogger(__name__)

DEFAULT_MAX_UPDATES = 10_000_000
DEFAULT_CACHE_BYTES = 1 << 30


@dataclass(frozen=True)
class OcsvmModel:
    """Support vectors with their dual weights and the decision offset."""

    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    n_train: int
    converged: bool = True
    n_iter: int = 0

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma * squared distance) between rows of A and rows of B."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    sq = (A * A).sum(axis=1)[:, None] + (B * B).sum(axis=1)[None, :] - 2.0 * (A @ B.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


class _KernelRowCache:
    """LRU cache of kernel rows; full matrices are never materialized."""

    def __init__(self, X: np.ndarray, gamma: float, cache_bytes: int):
        self._X = X
        self._gamma = gamma
        self._sq = (X * X).sum(axis=1)
        self._capacity = max(2, cache_bytes // (8 * X.shape[0]))
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        cached = self._rows.get(i)
        if cached is not None:
            self._rows.move_to_end(i)
            return cached
        d = self._sq + self._sq[i] - 2.0 * (self._X @ self._X[i])
        row = np.exp(-self._gamma * np.maximum(d, 0.0))
        self._rows[i] = row
        if len(self._rows) > self._capacity:
            self._rows.popitem(last=False)
        return row


def fit_ocsvm(
    X,
    gamma: float,
    nu: float,
    tol: float = 1e-3,
    seed: int = 0,
    max_updates: int = DEFAULT_MAX_UPDATES,
    cache_bytes: int = DEFAULT_CACHE_BYTES,
) -> OcsvmModel:
    """Solve the one-class dual to KKT gap <= tol.

    The seed only shuffles which coordinates carry the initial mass; the dual
    is strictly convex for distinct points, so the solution is independent of
    it. If the update cap is hit the best iterate is returned with
    converged=False.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimensionMismatch(f"expected a 2-D matrix with rows, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteInput("training matrix contains NaN or infinite values")
    if not 0.0 < nu <= 1.0:
        raise InvalidHyperparameter(f"nu must be in (0, 1], got {nu}")
    if gamma <= 0.0:
        raise InvalidHyperparameter(f"gamma must be positive, got {gamma}")
    if tol <= 0.0:
        raise InvalidHyperparameter(f"tol must be positive, got {tol}")

    n = X.shape[0]
    box = 1.0 / (nu * n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)

    alpha = np.zeros(n)
    full = int(np.floor(nu * n))
    alpha[order[:full]] = box
    remainder = 1.0 - full * box
    if remainder > 0.0 and full < n:
        alpha[order[full]] = remainder

    cache = _KernelRowCache(X, gamma, cache_bytes)
    grad = np.zeros(n)
    for i in np.flatnonzero(alpha > 0.0):
        grad += alpha[i] * cache.row(i)

    converged = False
    updates = 0
    while updates < max_updates:
        up = alpha < box
        low = alpha > 0.0
        g_up = np.where(up, grad, np.inf)
        g_low = np.where(low, grad, -np.inf)
        i = int(np.argmin(g_up))
        j = int(np.argmax(g_low))
        if g_low[j] - g_up[i] <= tol:
            converged = True
            break

        row_i = cache.row(i)
        row_j = cache.row(j)
        eta = max(2.0 - 2.0 * row_i[j], 1e-12)
        grow = box - alpha[i]
        shrink = alpha[j]
        delta = min((grad[j] - grad[i]) / eta, grow, shrink)

        alpha[i] = box if delta >= grow else alpha[i] + delta
        alpha[j] = 0.0 if delta >= shrink else alpha[j] - delta
        grad += delta * (row_i - row_j)
        updates += 1

    if not converged:
        logger.warning("SMO hit the %d update cap before reaching tol=%g", max_updates, tol)

    rho = _offset(alpha, grad, box)

    keep = alpha > box * 1e-12
    return OcsvmModel(
        support_vectors=X[keep].copy(),
        alphas=alpha[keep].copy(),
        rho=float(rho),
        gamma=float(gamma),
        nu=float(nu),
        n_train=n,
        converged=converged,
        n_iter=updates,
    )


def _offset(alpha: np.ndarray, grad: np.ndarray, box: float) -> float:
    """rho makes f zero on margin SVs; fall back to the violating-pair midpoint."""
    free = (alpha > box * 1e-8) & (alpha < box * (1.0 - 1e-8))
    if free.any():
        return float(grad[free].mean())
    up = alpha < box
    low = alpha > 0.0
    if up.any() and low.any():
        return float((grad[up].min() + grad[low].max()) / 2.0)
    if low.any():
        return float(grad[low].max())
    return float(grad[up].min())


def decision_function(model: OcsvmModel, x):
    """f(x) = sum_i alpha_i * K(s_i, x) - rho; scalar for a single row."""
    single = np.asarray(x).ndim == 1
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise DimensionMismatch(f"query width {X.shape[1]} does not match model width {model.n_features}")
    values = model.alphas @ rbf_kernel(model.support_vectors, X, model.gamma) - model.rho
    return float(values[0]) if single else values


def predict(model: OcsvmModel, x):
    """+1 where f >= 0 (the boundary counts as valid), else -1."""
    f = decision_function(model, x)
    if np.isscalar(f):
        return 1 if f >= 0.0 else -1
    return np.where(f >= 0.0, 1, -1)


def model_to_bytes(model: OcsvmModel) -> bytes:
    sections = {
        "meta": matrixio.meta_to_bytes(
            {
                "kind": "ocsvm",
                "gamma": model.gamma,
                "nu": model.nu,
                "rho": model.rho,
                "n_train": model.n_train,
                "converged": model.converged,
                "n_iter": model.n_iter,
            }
        ),
        "support_vectors": matrixio.matrix_to_bytes(model.support_vectors),
        "alphas": matrixio.matrix_to_bytes(model.alphas),
    }
    return matrixio.container_to_bytes(sections)


def save_model(model: OcsvmModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(blob: bytes) -> OcsvmModel:
    sections = matrixio.container_from_bytes(blob)
    meta = matrixio.meta_from_bytes(sections["meta"])
    if meta.get("kind") != "ocsvm":
        raise FormatError(f"not a one-class SVM container: kind={meta.get('kind')!r}")
    return OcsvmModel(
        support_vectors=matrixio.matrix_from_bytes(sections["support_vectors"]),
        alphas=matrixio.matrix_from_bytes(sections["alphas"])[0],
        rho=float(meta["rho"]),
        gamma=float(meta["gamma"]),
        nu=float(meta["nu"]),
        n_train=int(meta["n_train"]),
        converged=bool(meta["converged"]),
        n_iter=int(meta["n_iter"]),
    )


def load_model(path) -> OcsvmModel:
    return model_from_bytes(Path(path).read_bytes())
