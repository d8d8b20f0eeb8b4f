"""Column scaling and PCA for very wide feature matrices (p >> n).

A feature matrix holds one row per image. At full frame resolution the row
width dwarfs the row count, so PCA goes through the n x n Gram matrix instead
of the p x p covariance; both routes are exposed and must agree, which the
test suite checks against an independent eigendecomposition.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import matrixio
from .errors import DimensionMismatch, NonFiniteInput

DEGENERATE_STD = 1e-12


class RankDeficientWarning(UserWarning):
    """Requested more components than the data's numerical rank supports."""


@dataclass(frozen=True)
class Scaler:
    """Per-column z-score parameters: means and positive scales."""

    means: np.ndarray
    scales: np.ndarray


@dataclass(frozen=True)
class PcaTransform:
    """Centering vector plus an orthonormal component basis.

    components has shape (p, k); explained_variance is non-increasing, in
    variance units of the input columns. rank_deficient marks a fit that could
    not deliver the requested component count.
    """

    center: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def input_width(self) -> int:
        return self.components.shape[0]


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {X.shape}")
    return X


def fit_scaler(X) -> Scaler:
    """Column means and sample standard deviations.

    Columns with std below 1e-12 (constant backgrounds are common in rendered
    frames) get scale 1 so they pass through centered instead of exploding.
    A single-row matrix scales by 1 everywhere.
    """
    X = _as_matrix(X)
    if not np.isfinite(X).all():
        raise NonFiniteInput("feature matrix contains NaN or infinite values")
    means = X.mean(axis=0)
    if X.shape[0] < 2:
        scales = np.ones_like(means)
    else:
        std = X.std(axis=0, ddof=1)
        scales = np.where(std < DEGENERATE_STD, 1.0, std)
    return Scaler(means=means, scales=scales)


def apply_scaler(scaler: Scaler, X) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != scaler.means.shape[0]:
        raise DimensionMismatch(f"matrix has {X.shape[1]} columns, scaler expects {scaler.means.shape[0]}")
    return (X - scaler.means) / scaler.scales


def fit_pca(X, k: int, method: str = "auto") -> PcaTransform:
    """Top-k principal directions of the centered matrix.

    method selects the eigendecomposition route: "cov" works on the p x p
    covariance, "gram" on the n x n inner-product matrix (the only feasible
    route when p >> n), "auto" picks gram when p > n. Components are
    sign-canonicalized (largest-magnitude entry nonnegative) so results are
    deterministic. If k exceeds the numerical rank, the achievable components
    are returned with rank_deficient set and a RankDeficientWarning.
    """
    X = _as_matrix(X)
    n, p = X.shape
    if not (1 <= k <= min(n - 1, p) if n > 1 else False):
        raise DimensionMismatch(f"k={k} out of range for {n}x{p} matrix (need 1 <= k <= min(n-1, p))")
    if not np.isfinite(X).all():
        raise NonFiniteInput("feature matrix contains NaN or infinite values")
    if method not in ("auto", "gram", "cov"):
        raise ValueError(f"unknown method {method!r}")
    use_gram = method == "gram" or (method == "auto" and p > n)

    center = X.mean(axis=0)
    Xc = X - center

    if use_gram:
        gram = Xc @ Xc.T
        evals, evecs = np.linalg.eigh(gram)
        evals = np.maximum(evals[::-1], 0.0)
        evecs = evecs[:, ::-1]
        rank = _numerical_rank(evals, n, p)
        k_eff = min(k, rank)
        sv = np.sqrt(evals[:k_eff])
        components = Xc.T @ (evecs[:, :k_eff] / sv)
        # Renormalize: u / s propagation leaves tiny norm drift at small s.
        components /= np.linalg.norm(components, axis=0)
        explained = evals[:k_eff] / (n - 1)
    else:
        cov = (Xc.T @ Xc) / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.maximum(evals[::-1], 0.0)
        evecs = evecs[:, ::-1]
        rank = _numerical_rank(evals, n, p)
        k_eff = min(k, rank)
        components = evecs[:, :k_eff].copy()
        explained = evals[:k_eff]

    rank_deficient = k_eff < k
    if rank_deficient:
        warnings.warn(
            f"requested k={k} components but numerical rank is {rank}; returning {k_eff}",
            RankDeficientWarning,
        )
    return PcaTransform(
        center=center,
        components=_canonical_signs(components),
        explained_variance=explained,
        rank_deficient=rank_deficient,
    )


def _numerical_rank(evals: np.ndarray, n: int, p: int) -> int:
    if evals.size == 0 or evals[0] <= 0.0:
        return 0
    tol = evals[0] * max(n, p) * np.finfo(np.float64).eps
    return int(np.count_nonzero(evals > tol))


def _canonical_signs(components: np.ndarray) -> np.ndarray:
    if components.shape[1] == 0:
        return components
    anchor = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[anchor, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def project(transform: PcaTransform, X) -> np.ndarray:
    """Center with the fitted means and rotate onto the component basis."""
    X = _as_matrix(X)
    if X.shape[1] != transform.input_width:
        raise DimensionMismatch(
            f"matrix has {X.shape[1]} columns, transform expects {transform.input_width}"
        )
    return (X - transform.center) @ transform.components


def project_row(transform: PcaTransform, row: np.ndarray) -> np.ndarray:
    return project(transform, row.reshape(1, -1))[0]


def load_external_features(path) -> np.ndarray:
    """Read a feature matrix computed by outside tooling (FMX1 format).

    Rows must align one-to-one with the lines of the dataset manifest they
    accompany.
    """
    return matrixio.read_matrix(path)


def save_features(path, X) -> None:
    matrixio.write_matrix(path, _as_matrix(X))
