"""End-to-end pipelines: offline training and evaluation, flip-transfer
experiments, and the online retrain-per-frame harness.

Offline: scale -> (optional) PCA -> one-class model, trained only on frames
labeled valid, persisted as a bundle with full provenance. Online: at each
step t a fresh model is trained on frames 1..t (all taken on faith as valid),
queried on the last seen frame plus the next unseen frames, then discarded;
what survives is the record of predictions, not the model.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features, iforest, imagery, matrixio, ocsvm, tuner
from .errors import DimensionMismatch, FormatError, InsufficientData
from .imagery import CropRegion
from .seeding import derive_seed

logger = logging.getLogger(__name__)

MODEL_KINDS = ("iforest", "ocsvm")


@dataclass(frozen=True)
class PipelineConfig:
    """Offline training configuration (model choice plus preprocessing)."""

    model: str = "iforest"
    pca: bool = True
    components: int = 512
    n_trees: int = 125
    max_samples: float = 1.0
    contamination: float = 0.0
    gamma: float = 0.001
    nu: float = 0.01
    tol: float = 1e-3
    seed: int = 0
    crop: CropRegion | None = None
    resize_to: tuple[int, int] | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")


@dataclass
class OfflineBundle:
    """A trained pipeline: preprocessing, projection, model, provenance."""

    scaler: features.Scaler
    pca: features.PcaTransform | None
    model: iforest.IForestModel | ocsvm.OcsvmModel
    feature_source: str
    crop: CropRegion | None
    resize_to: tuple[int, int] | None
    provenance: dict
    model_id: str = ""

    @property
    def model_kind(self) -> str:
        return "iforest" if isinstance(self.model, iforest.IForestModel) else "ocsvm"

    def image_features(self, img: np.ndarray) -> np.ndarray:
        if self.crop is not None:
            img = imagery.crop(img, self.crop)
        if self.resize_to is not None:
            img = imagery.resize(img, *self.resize_to)
        return imagery.flatten(img)

    def transform(self, X: np.ndarray) -> np.ndarray:
        Z = features.apply_scaler(self.scaler, X)
        return features.project(self.pca, Z) if self.pca is not None else Z

    def classify_rows(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row (label, score): iforest scores are in (0, 1) with higher
        more anomalous; ocsvm scores are decision values with negative
        anomalous."""
        P = self.transform(np.atleast_2d(X))
        if self.model_kind == "iforest":
            scores = iforest.anomaly_score(self.model, P)
            labels = np.where(scores > self.model.score_threshold, -1, 1)
        else:
            scores = ocsvm.decision_function(self.model, P)
            labels = np.where(scores >= 0.0, 1, -1)
        return labels, scores

    def classify_image(self, img: np.ndarray) -> tuple[int, float]:
        labels, scores = self.classify_rows(self.image_features(img).reshape(1, -1))
        return int(labels[0]), float(scores[0])


def _manifest_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_rows(entries: Sequence[tuple[Path, int]], crop, resize_to) -> np.ndarray:
    rows = []
    for path, _ in entries:
        img = imagery.load_image(path)
        if crop is not None:
            img = imagery.crop(img, crop)
        if resize_to is not None:
            img = imagery.resize(img, *resize_to)
        rows.append(imagery.flatten(img))
    return np.vstack(rows)


def train_offline(manifest_path, config: PipelineConfig, external_features_path=None) -> OfflineBundle:
    """Fit scaler -> (optional PCA) -> model on the manifest's valid frames.

    Only rows labeled +1 are trained on. With an external feature file, rows
    of that matrix stand in for the images (aligned line-for-line with the
    manifest) and crop/resize are ignored.
    """
    manifest_path = Path(manifest_path)
    entries = imagery.read_manifest(manifest_path)
    valid_entries = [(p, lab) for p, lab in entries if lab == imagery.VALID]
    if len(valid_entries) < 2:
        raise InsufficientData(f"need at least 2 valid frames to train, found {len(valid_entries)}")

    if external_features_path is not None:
        all_rows = features.load_external_features(external_features_path)
        if all_rows.shape[0] != len(entries):
            raise DimensionMismatch(
                f"external matrix has {all_rows.shape[0]} rows for {len(entries)} manifest lines"
            )
        mask = np.array([lab == imagery.VALID for _, lab in entries])
        X = all_rows[mask]
        source = "external"
    else:
        X = _load_rows(valid_entries, config.crop, config.resize_to)
        source = "raw-pixel"

    scaler = features.fit_scaler(X)
    Z = features.apply_scaler(scaler, X)

    pca = None
    k = 0
    if config.pca:
        k = min(config.components, Z.shape[0] - 1, Z.shape[1])
        if k < config.components:
            logger.info("clamping PCA components from %d to %d for %dx%d data", config.components, k, *Z.shape)
        pca = features.fit_pca(Z, k)
        Z = features.project(pca, Z)

    if config.model == "iforest":
        model = iforest.fit_iforest(
            Z,
            n_trees=config.n_trees,
            max_samples=config.max_samples,
            contamination=config.contamination,
            seed=config.seed,
        )
        params = {
            "n_trees": int(config.n_trees),
            "max_samples": float(config.max_samples),
            "contamination": float(config.contamination),
        }
    else:
        model = ocsvm.fit_ocsvm(Z, gamma=config.gamma, nu=config.nu, tol=config.tol, seed=config.seed)
        params = {"gamma": float(config.gamma), "nu": float(config.nu), "tol": float(config.tol)}

    provenance = {
        "model": config.model,
        "params": params,
        "seed": int(config.seed),
        "manifest_digest": _manifest_digest(manifest_path),
        "feature_source": source,
        "n_train": int(X.shape[0]),
        "pca_components": int(k),
    }
    bundle = OfflineBundle(
        scaler=scaler,
        pca=pca,
        model=model,
        feature_source=source,
        crop=config.crop,
        resize_to=config.resize_to,
        provenance=provenance,
        model_id=hashlib.sha256(matrixio.meta_to_bytes(provenance)).hexdigest()[:16],
    )
    return bundle


@dataclass(frozen=True)
class ImageVerdict:
    path: str
    truth: int
    label: int
    score: float

    @property
    def correct(self) -> bool:
        return self.truth == self.label


@dataclass
class EvalReport:
    """Confusion counts plus per-image verdicts.

    Per-image decode or dimension errors are recorded in `failures` and
    excluded from the counts, never silently skipped.
    """

    verdicts: list[ImageVerdict] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_valid_correct(self) -> int:
        return sum(1 for v in self.verdicts if v.truth == imagery.VALID and v.correct)

    @property
    def n_valid_wrong(self) -> int:
        return sum(1 for v in self.verdicts if v.truth == imagery.VALID and not v.correct)

    @property
    def n_anomalous_correct(self) -> int:
        return sum(1 for v in self.verdicts if v.truth == imagery.ANOMALOUS and v.correct)

    @property
    def n_anomalous_wrong(self) -> int:
        return sum(1 for v in self.verdicts if v.truth == imagery.ANOMALOUS and not v.correct)

    @property
    def empty(self) -> bool:
        return not self.verdicts

    @property
    def valid_accuracy(self) -> float | None:
        total = self.n_valid_correct + self.n_valid_wrong
        return self.n_valid_correct / total if total else None

    @property
    def anomalous_accuracy(self) -> float | None:
        total = self.n_anomalous_correct + self.n_anomalous_wrong
        return self.n_anomalous_correct / total if total else None

    @property
    def weighted_accuracy(self) -> float | None:
        total = len(self.verdicts)
        if not total:
            return None
        return (self.n_valid_correct + self.n_anomalous_correct) / total

    def confusion(self) -> list[list[int]]:
        """Predicted (rows: anomalous yes/no) x actual (cols: anomalous yes/no)."""
        return [
            [self.n_anomalous_correct, self.n_valid_wrong],
            [self.n_anomalous_wrong, self.n_valid_correct],
        ]

    def table(self) -> str:
        acc = "undefined" if self.weighted_accuracy is None else f"{100.0 * self.weighted_accuracy:.1f}%"
        lines = [
            "correct_valid  correct_anomalous  overall",
            f"{self.n_valid_correct:13d}  {self.n_anomalous_correct:17d}  {acc}",
        ]
        if self.failures:
            lines.append(f"failures: {len(self.failures)}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        lines = []
        for v in self.verdicts:
            lines.append(
                json.dumps(
                    {"path": v.path, "truth": v.truth, "label": v.label, "score": v.score},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
        for path, error in self.failures:
            lines.append(json.dumps({"path": path, "error": error}, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"


def evaluate(bundle: OfflineBundle, manifest, flip_axis: str | None = None) -> EvalReport:
    """Classify every manifest frame; flip_axis mirrors frames first."""
    entries = imagery.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    report = EvalReport()
    for path, truth in entries:
        try:
            img = imagery.load_image(path)
            if flip_axis is not None and flip_axis != "none":
                img = imagery.flip(img, flip_axis)
            label, score = bundle.classify_image(img)
        except Exception as exc:
            report.failures.append((str(path), f"{type(exc).__name__}: {exc}"))
            continue
        report.verdicts.append(ImageVerdict(path=str(path), truth=truth, label=label, score=score))
    return report


def flip_experiment(bundle: OfflineBundle, manifest, axes: Sequence[str]) -> dict[str, EvalReport]:
    """One evaluation per axis; "none" evaluates the frames unflipped."""
    allowed = set(imagery.FLIP_AXES) | {"none"}
    bad = [a for a in axes if a not in allowed]
    if bad:
        raise ValueError(f"unknown flip axes {bad}; allowed {sorted(allowed)}")
    entries = imagery.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    return {axis: evaluate(bundle, entries, flip_axis=axis) for axis in axes}


def sample_eval_pool(manifest, n_valid: int, n_anomalous: int, seed: int) -> list[tuple[Path, int]]:
    """Fixed-seed draw of a test pool: n_valid valid + n_anomalous anomalous."""
    entries = imagery.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    valid = [e for e in entries if e[1] == imagery.VALID]
    anomalous = [e for e in entries if e[1] == imagery.ANOMALOUS]
    if len(valid) < n_valid or len(anomalous) < n_anomalous:
        raise InsufficientData(
            f"pool needs {n_valid} valid + {n_anomalous} anomalous, manifest has "
            f"{len(valid)} + {len(anomalous)}"
        )
    rng = np.random.default_rng(seed)
    picked_valid = [valid[i] for i in rng.choice(len(valid), size=n_valid, replace=False)]
    picked_anom = [anomalous[i] for i in rng.choice(len(anomalous), size=n_anomalous, replace=False)]
    return picked_valid + picked_anom


# ---------------------------------------------------------------------------
# Online harness


@dataclass(frozen=True)
class OnlineConfig:
    start: int = 10
    n_trees: int = 125
    max_samples: float = 1.0
    warmup: int = 300
    lookahead: int = 9
    pca: bool = False
    components: int = 512
    seed: int = 0
    crop: CropRegion | None = None
    resize_to: tuple[int, int] | None = None


@dataclass(frozen=True)
class OnlineStepRecord:
    step: int
    train_size: int
    last_seen_pred: int
    last_seen_correct: bool
    unseen_preds: tuple[int, ...]
    unseen_correct: tuple[bool, ...]
    first_unseen_correct: bool | None
    warm_up: bool


@dataclass(frozen=True)
class OnlineSummary:
    steps: int
    warmup_threshold: int
    warmup_steps: int
    first_unseen_accuracy: float | None
    warmup_first_unseen_accuracy: float | None
    steady_first_unseen_accuracy: float | None


def run_online(manifest, config: OnlineConfig = OnlineConfig()) -> tuple[list[OnlineStepRecord], OnlineSummary]:
    """Retrain-per-frame sweep over a time-ordered manifest.

    At step t the model trains on frames 1..t, all presumed valid (their
    manifest labels are never read for training), predicts frame t and up to
    `lookahead` unseen frames, and is discarded. Ground-truth labels are used
    only to score the recorded predictions. Steps below the warm-up threshold
    are flagged, not suppressed; distrust is the caller's policy.
    """
    entries = imagery.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    n = len(entries)
    if config.start < 2 or config.start > n:
        raise ValueError(f"start step must be in [2, {n}], got {config.start}")

    truth = np.array([lab for _, lab in entries])

    # Frames are read only as they come into scope: at step t nothing past
    # frame t + lookahead has been touched, matching a live stream.
    X: np.ndarray | None = None
    loaded = 0

    def ensure_loaded(upto: int):
        nonlocal X, loaded
        for i in range(loaded, upto):
            row = _load_rows(entries[i : i + 1], config.crop, config.resize_to)[0]
            if X is None:
                X = np.empty((n, row.shape[0]))
            X[i] = row
        loaded = max(loaded, upto)

    records: list[OnlineStepRecord] = []
    for t in range(config.start, n + 1):
        ensure_loaded(min(t + config.lookahead, n))
        train = X[:t]
        scaler = features.fit_scaler(train)
        Z = features.apply_scaler(scaler, train)
        pca = None
        if config.pca:
            k = min(config.components, t - 1, Z.shape[1])
            pca = features.fit_pca(Z, k)
            Z = features.project(pca, Z)

        model = iforest.fit_iforest(
            Z,
            n_trees=config.n_trees,
            max_samples=config.max_samples,
            contamination=0.0,
            seed=derive_seed(config.seed, t),
        )

        query_rows = X[t - 1 : min(t + config.lookahead, n)]
        Q = features.apply_scaler(scaler, query_rows)
        if pca is not None:
            Q = features.project(pca, Q)
        preds = iforest.predict(model, Q)

        last_pred = int(preds[0])
        unseen_preds = tuple(int(p) for p in preds[1:])
        unseen_truth = truth[t : min(t + config.lookahead, n)]
        unseen_correct = tuple(bool(p == tr) for p, tr in zip(unseen_preds, unseen_truth))
        records.append(
            OnlineStepRecord(
                step=t,
                train_size=t,
                last_seen_pred=last_pred,
                last_seen_correct=bool(last_pred == truth[t - 1]),
                unseen_preds=unseen_preds,
                unseen_correct=unseen_correct,
                first_unseen_correct=unseen_correct[0] if unseen_correct else None,
                warm_up=t < config.warmup,
            )
        )
        # The model goes out of scope here: records carry predictions only.

    return records, summarize_online(records, config.warmup)


def summarize_online(records: Sequence[OnlineStepRecord], warmup_threshold: int) -> OnlineSummary:
    def accuracy(rs):
        scored = [r.first_unseen_correct for r in rs if r.first_unseen_correct is not None]
        return (sum(scored) / len(scored)) if scored else None

    warm = [r for r in records if r.warm_up]
    steady = [r for r in records if not r.warm_up]
    return OnlineSummary(
        steps=len(records),
        warmup_threshold=warmup_threshold,
        warmup_steps=len(warm),
        first_unseen_accuracy=accuracy(records),
        warmup_first_unseen_accuracy=accuracy(warm),
        steady_first_unseen_accuracy=accuracy(steady),
    )


def online_records_jsonl(records: Sequence[OnlineStepRecord]) -> str:
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "step": r.step,
                    "train_size": r.train_size,
                    "last_seen_pred": r.last_seen_pred,
                    "last_seen_correct": r.last_seen_correct,
                    "unseen_preds": list(r.unseen_preds),
                    "unseen_correct": list(r.unseen_correct),
                    "first_unseen_correct": r.first_unseen_correct,
                    "warm_up": r.warm_up,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"


def emit_prediction_plot_data(records: Sequence[OnlineStepRecord]) -> str:
    """Columnar series for the per-step prediction plot.

    percent_correct covers the last-seen prediction plus however many unseen
    predictions the step had; first_unseen_correct is the orange/blue flag
    (empty at the stream tail where no unseen frame remained).
    """
    if not records:
        raise ValueError("no records to plot")
    lines = ["step,percent_correct,first_unseen_correct"]
    for r in records:
        outcomes = [r.last_seen_correct, *r.unseen_correct]
        pct = 100.0 * sum(outcomes) / len(outcomes)
        flag = "" if r.first_unseen_correct is None else str(r.first_unseen_correct).lower()
        lines.append(f"{r.step},{pct:.1f},{flag}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Bundle persistence


def save_bundle(bundle: OfflineBundle, path) -> str:
    """Write the bundle container; returns the content digest (the model id)."""
    meta = {
        "kind": "bundle",
        "feature_source": bundle.feature_source,
        "model_kind": bundle.model_kind,
        "pca": bundle.pca is not None,
        "pca_rank_deficient": bool(bundle.pca.rank_deficient) if bundle.pca else False,
        "crop": [bundle.crop.x_lo, bundle.crop.x_hi, bundle.crop.y_lo, bundle.crop.y_hi]
        if bundle.crop
        else None,
        "resize_to": list(bundle.resize_to) if bundle.resize_to else None,
        "provenance": bundle.provenance,
    }
    sections = {
        "meta": matrixio.meta_to_bytes(meta),
        "scaler/means": matrixio.matrix_to_bytes(bundle.scaler.means),
        "scaler/scales": matrixio.matrix_to_bytes(bundle.scaler.scales),
    }
    if bundle.pca is not None:
        sections["pca/center"] = matrixio.matrix_to_bytes(bundle.pca.center)
        sections["pca/components"] = matrixio.matrix_to_bytes(bundle.pca.components)
        sections["pca/explained"] = matrixio.matrix_to_bytes(bundle.pca.explained_variance)
    if bundle.model_kind == "iforest":
        sections["model"] = iforest.model_to_bytes(bundle.model)
    else:
        sections["model"] = ocsvm.model_to_bytes(bundle.model)

    blob = matrixio.container_to_bytes(sections)
    Path(path).write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()[:16]
    bundle.model_id = digest
    return digest


def load_bundle(path) -> OfflineBundle:
    blob = Path(path).read_bytes()
    sections = matrixio.container_from_bytes(blob)
    meta = matrixio.meta_from_bytes(sections["meta"])
    if meta.get("kind") != "bundle":
        raise FormatError(f"not a bundle container: kind={meta.get('kind')!r}")

    scaler = features.Scaler(
        means=matrixio.matrix_from_bytes(sections["scaler/means"])[0],
        scales=matrixio.matrix_from_bytes(sections["scaler/scales"])[0],
    )
    pca = None
    if meta["pca"]:
        pca = features.PcaTransform(
            center=matrixio.matrix_from_bytes(sections["pca/center"])[0],
            components=matrixio.matrix_from_bytes(sections["pca/components"]),
            explained_variance=matrixio.matrix_from_bytes(sections["pca/explained"])[0],
            rank_deficient=bool(meta.get("pca_rank_deficient", False)),
        )
    if meta["model_kind"] == "iforest":
        model = iforest.model_from_bytes(sections["model"])
    else:
        model = ocsvm.model_from_bytes(sections["model"])

    crop = CropRegion(*meta["crop"]) if meta.get("crop") else None
    resize_to = tuple(meta["resize_to"]) if meta.get("resize_to") else None
    return OfflineBundle(
        scaler=scaler,
        pca=pca,
        model=model,
        feature_source=meta["feature_source"],
        crop=crop,
        resize_to=resize_to,
        provenance=meta["provenance"],
        model_id=hashlib.sha256(blob).hexdigest()[:16],
    )


# ---------------------------------------------------------------------------
# Hyperparameter tuning against a pool


def tune_model(
    manifest,
    model: str = "iforest",
    budget: int = 20,
    seed: int = 0,
    pca: bool = True,
    components: int = 512,
    pool_valid: int = 40,
    pool_anomalous: int = 20,
    space: dict | None = None,
) -> tuple[tuner.TrialRecord, list[tuner.TrialRecord]]:
    """Random-search the model's hyperparameters for minimum misclassification.

    The preprocessing (scaler and PCA) does not depend on the searched
    parameters, so it is fitted once; each trial refits only the model and is
    scored on a fixed-seed pool of valid and anomalous frames.
    """
    entries = imagery.read_manifest(manifest) if not isinstance(manifest, list) else manifest
    pool = sample_eval_pool(entries, pool_valid, pool_anomalous, seed=derive_seed(seed, 404))

    valid_entries = [e for e in entries if e[1] == imagery.VALID]
    if len(valid_entries) < 2:
        raise InsufficientData("need at least 2 valid frames to tune")
    X = _load_rows(valid_entries, None, None)
    scaler = features.fit_scaler(X)
    Z = features.apply_scaler(scaler, X)
    transform = None
    if pca:
        k = min(components, Z.shape[0] - 1, Z.shape[1])
        transform = features.fit_pca(Z, k)
        Z = features.project(transform, Z)

    pool_X = _load_rows(pool, None, None)
    pool_Z = features.apply_scaler(scaler, pool_X)
    if transform is not None:
        pool_Z = features.project(transform, pool_Z)
    pool_truth = np.array([lab for _, lab in pool])

    def objective(params: dict) -> float:
        if model == "iforest":
            fitted = iforest.fit_iforest(Z, n_trees=int(params["n_trees"]), seed=seed)
            preds = iforest.predict(fitted, pool_Z)
        else:
            fitted = ocsvm.fit_ocsvm(Z, gamma=params["gamma"], nu=params["nu"], seed=seed)
            preds = ocsvm.predict(fitted, pool_Z)
        return float(np.mean(preds != pool_truth))

    return tuner.search(space or tuner.default_space(model), objective, budget=budget, seed=seed)
