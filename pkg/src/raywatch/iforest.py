"""Isolation forest: ensemble training, path-length scoring, threshold labeling.

Trees are stored as flat node arrays so scoring can walk all queries through a
tree level-by-level with vectorized gathers instead of per-point recursion.
Each tree draws its randomness from a stream spawned off (seed, tree index),
so the ensemble is reproducible no matter how tree construction is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matrixio
from .errors import DimensionMismatch, FormatError, InvalidHyperparameter, NonFiniteInput

EULER_GAMMA = 0.5772156649015329

_FEATURE_TRIES = 8  # rejection draws before falling back to a full constant scan


def average_path_length(n) -> float | np.ndarray:
    """Expected unsuccessful-search depth c(n) in a binary search tree.

    c(0) = c(1) = 0; for n >= 2, c(n) = 2*H(n-1) - 2*(n-1)/n with the harmonic
    number approximated as H(i) = ln(i) + Euler-Mascheroni. This is the
    normalizer for anomaly scores and the per-leaf path adjustment.
    """
    arr = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(arr)
    big = arr > 1
    nb = arr[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    if np.isscalar(n) or np.asarray(n).ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class IsolationTree:
    """One random binary tree over a subsample, as flat node arrays.

    feature is -1 at leaves; left/right are child node ids (-1 at leaves);
    leaf_size is 0 at internal nodes. sample_indices are the training rows the
    tree was grown on.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_size: np.ndarray
    depth: np.ndarray
    sample_indices: np.ndarray
    height_limit: int
    n_features: int

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


@dataclass(frozen=True)
class IForestModel:
    trees: tuple[IsolationTree, ...]
    psi: int
    n_train: int
    contamination: float
    score_threshold: float
    seed: int

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features


class _DrawBuffer:
    """Block-buffered RNG draws; scalar Generator calls dominate build time."""

    def __init__(self, rng: np.random.Generator, n_features: int, block: int = 2048):
        self._rng = rng
        self._d = n_features
        self._block = block
        self._feat = rng.integers(0, n_features, size=block)
        self._fi = 0
        self._uni = rng.random(size=block)
        self._ui = 0

    def feature(self) -> int:
        if self._fi == self._block:
            self._feat = self._rng.integers(0, self._d, size=self._block)
            self._fi = 0
        value = self._feat[self._fi]
        self._fi += 1
        return int(value)

    def unit(self) -> float:
        if self._ui == self._block:
            self._uni = self._rng.random(size=self._block)
            self._ui = 0
        value = self._uni[self._ui]
        self._ui += 1
        return float(value)


def _build_tree(Xf: np.ndarray, cols: list[np.ndarray], sample: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    psi, d = sample.shape[0], len(cols)
    draws = _DrawBuffer(rng, d)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    leaf_size: list[int] = []
    depth_of: list[int] = []

    # Partitioned in place; holds global row ids so columns of the training
    # matrix can be gathered directly, with no per-tree submatrix copy.
    order = np.array(sample, dtype=np.intp)
    # Stack entries: (lo, hi, depth, parent id, is_left_child).
    stack = [(0, psi, 0, -1, False)]
    while stack:
        lo, hi, depth, parent, is_left = stack.pop()
        node_id = len(feature)
        if parent >= 0:
            if is_left:
                left[parent] = node_id
            else:
                right[parent] = node_id

        m = hi - lo
        rows = order[lo:hi]
        split = None
        if m > 1 and depth < height_limit:
            split = _choose_split(Xf, cols, rows, draws, rng)

        if split is None:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_size.append(m)
            depth_of.append(depth)
            continue

        f, value, mask = split
        n_left = int(np.count_nonzero(mask))
        left_rows = rows[mask]
        right_rows = rows[~mask]
        order[lo : lo + n_left] = left_rows
        order[lo + n_left : hi] = right_rows

        feature.append(f)
        threshold.append(value)
        left.append(-1)
        right.append(-1)
        leaf_size.append(0)
        depth_of.append(depth)
        stack.append((lo + n_left, hi, depth + 1, node_id, False))
        stack.append((lo, lo + n_left, depth + 1, node_id, True))

    return IsolationTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        leaf_size=np.asarray(leaf_size, dtype=np.int32),
        depth=np.asarray(depth_of, dtype=np.int32),
        sample_indices=np.asarray(sample, dtype=np.int64),
        height_limit=height_limit,
        n_features=d,
    )


def _choose_split(Xf, cols, rows, draws: _DrawBuffer, rng: np.random.Generator):
    """Pick (feature, value, left mask) or None if the rows are all duplicates.

    Features are drawn uniformly with rejection of constant ones, which is a
    uniform choice among the non-constant features; after repeated rejections
    a full scan settles whether any split is possible at all.
    """
    f = -1
    for _ in range(_FEATURE_TRIES):
        cand = draws.feature()
        v = cols[cand][rows]
        vmin = v.min()
        vmax = v.max()
        if vmax > vmin:
            f = cand
            break
    else:
        sub = Xf[rows]
        mins = sub.min(axis=0)
        maxs = sub.max(axis=0)
        usable = np.flatnonzero(maxs > mins)
        if usable.size == 0:
            return None
        f = int(usable[rng.integers(usable.size)])
        v = cols[f][rows]
        vmin = v.min()
        vmax = v.max()

    value = vmin + draws.unit() * (vmax - vmin)
    for _ in range(4):
        if vmin < value < vmax:
            break
        value = vmin + draws.unit() * (vmax - vmin)
    else:
        return None  # interval too narrow to split strictly inside
    return f, float(value), v < value


def fit_iforest(X, n_trees: int = 125, max_samples: float | int = 1.0, contamination: float = 0.0, seed: int = 0) -> IForestModel:
    """Grow the ensemble and fix the score threshold.

    Each tree trains on psi rows sampled without replacement (psi from
    max_samples: a fraction of n, or an explicit count). With contamination 0
    the threshold is the conventional 0.5; otherwise it is the
    (1 - contamination) quantile of the training scores. The result is fully
    determined by (X, parameters, seed).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise InvalidHyperparameter(f"need at least 2 training rows, got {n}")
    if not np.isfinite(X).all():
        raise NonFiniteInput("training matrix contains NaN or infinite values")
    if n_trees < 1:
        raise InvalidHyperparameter(f"n_trees must be >= 1, got {n_trees}")
    if not 0.0 <= contamination <= 0.5:
        raise InvalidHyperparameter(f"contamination must be in [0, 0.5], got {contamination}")

    if isinstance(max_samples, float):
        if not 0.0 < max_samples <= 1.0:
            raise InvalidHyperparameter(f"fractional max_samples must be in (0, 1], got {max_samples}")
        psi = max(1, int(round(max_samples * n)))
    else:
        psi = int(max_samples)
        if not 1 <= psi <= n:
            raise InvalidHyperparameter(f"max_samples count must be in [1, {n}], got {psi}")

    height_limit = int(math.ceil(math.log2(psi))) if psi > 1 else 0

    # One column-contiguous copy shared by every tree.
    Xf = np.asfortranarray(X)
    cols = [Xf[:, j] for j in range(d)]

    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        sample = rng.choice(n, size=psi, replace=False)
        trees.append(_build_tree(Xf, cols, sample, height_limit, rng))

    model = IForestModel(
        trees=tuple(trees),
        psi=psi,
        n_train=n,
        contamination=float(contamination),
        score_threshold=0.5,
        seed=int(seed),
    )
    if contamination > 0.0:
        train_scores = anomaly_score(model, X)
        threshold = float(np.quantile(train_scores, 1.0 - contamination))
        model = IForestModel(
            trees=model.trees,
            psi=psi,
            n_train=n,
            contamination=float(contamination),
            score_threshold=threshold,
            seed=int(seed),
        )
    return model


def _tree_path_lengths(tree: IsolationTree, X: np.ndarray, query_ids: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int32)
    for _ in range(tree.height_limit):
        f = tree.feature[node]
        internal = f >= 0
        if not internal.any():
            break
        values = X[query_ids, np.where(internal, f, 0)]
        go_left = values < tree.threshold[node]
        child = np.where(go_left, tree.left[node], tree.right[node])
        node = np.where(internal, child, node).astype(np.int32)
    return tree.depth[node] + average_path_length(tree.leaf_size[node])


def path_length(tree: IsolationTree, x) -> float:
    """Depth at which x lands in the tree, plus the leaf-size adjustment."""
    x = _check_query(x, tree.n_features)
    return float(_tree_path_lengths(tree, x, np.arange(1))[0])


def score_from_mean_path(mean_path, psi: int):
    """s = 2^(-mean_path / c(psi)). Exactly 0.5 at mean_path = c(psi).

    A subsample of one point has c(psi) = 0 and carries no depth information,
    so every score degrades to the uninformative 0.5.
    """
    c_psi = average_path_length(psi)
    if c_psi <= 0.0:
        return np.full_like(np.asarray(mean_path, dtype=np.float64), 0.5)
    return np.exp2(-np.asarray(mean_path, dtype=np.float64) / c_psi)


def anomaly_score(model: IForestModel, x):
    """s(x) = 2^(-mean path / c(psi)); in (0, 1), higher is more anomalous."""
    single = np.asarray(x).ndim == 1
    X = _check_query(x, model.n_features)
    query_ids = np.arange(X.shape[0])
    total = np.zeros(X.shape[0], dtype=np.float64)
    for tree in model.trees:
        total += _tree_path_lengths(tree, X, query_ids)
    scores = score_from_mean_path(total / model.n_estimators, model.psi)
    return float(scores[0]) if single else scores


def predict(model: IForestModel, x):
    """-1 where the score exceeds the threshold, +1 otherwise (ties valid)."""
    scores = anomaly_score(model, x)
    if np.isscalar(scores):
        return -1 if scores > model.score_threshold else 1
    return np.where(scores > model.score_threshold, -1, 1)


def _check_query(x, n_features: int) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.ndim != 2 or X.shape[1] != n_features:
        raise DimensionMismatch(f"query width {X.shape[-1]} does not match training width {n_features}")
    return X


def model_to_bytes(model: IForestModel) -> bytes:
    sections: dict[str, bytes] = {
        "meta": matrixio.meta_to_bytes(
            {
                "kind": "iforest",
                "psi": model.psi,
                "n_train": model.n_train,
                "contamination": model.contamination,
                "score_threshold": model.score_threshold,
                "seed": model.seed,
                "n_trees": model.n_estimators,
                "n_features": model.n_features,
            }
        )
    }
    for i, tree in enumerate(model.trees):
        nodes = np.column_stack(
            [tree.feature, tree.threshold, tree.left, tree.right, tree.leaf_size, tree.depth]
        ).astype(np.float64)
        sections[f"tree/{i}"] = matrixio.matrix_to_bytes(nodes)
        sections[f"tree/{i}/sample"] = matrixio.matrix_to_bytes(tree.sample_indices.astype(np.float64))
    return matrixio.container_to_bytes(sections)


def save_model(model: IForestModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(blob: bytes) -> IForestModel:
    sections = matrixio.container_from_bytes(blob)
    meta = matrixio.meta_from_bytes(sections["meta"])
    if meta.get("kind") != "iforest":
        raise FormatError(f"not an isolation forest container: kind={meta.get('kind')!r}")
    psi = int(meta["psi"])
    height_limit = int(math.ceil(math.log2(psi))) if psi > 1 else 0
    trees = []
    for i in range(int(meta["n_trees"])):
        nodes = matrixio.matrix_from_bytes(sections[f"tree/{i}"])
        sample = matrixio.matrix_from_bytes(sections[f"tree/{i}/sample"])[0]
        trees.append(
            IsolationTree(
                feature=nodes[:, 0].astype(np.int32),
                threshold=nodes[:, 1].copy(),
                left=nodes[:, 2].astype(np.int32),
                right=nodes[:, 3].astype(np.int32),
                leaf_size=nodes[:, 4].astype(np.int32),
                depth=nodes[:, 5].astype(np.int32),
                sample_indices=sample.astype(np.int64),
                height_limit=height_limit,
                n_features=int(meta["n_features"]),
            )
        )
    return IForestModel(
        trees=tuple(trees),
        psi=psi,
        n_train=int(meta["n_train"]),
        contamination=float(meta["contamination"]),
        score_threshold=float(meta["score_threshold"]),
        seed=int(meta["seed"]),
    )


def load_model(path) -> IForestModel:
    return model_from_bytes(Path(path).read_bytes())
