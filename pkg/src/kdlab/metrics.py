"""Evaluation metrics: top-1 accuracy, per-class AP / mAP, and
representation-similarity comparison between two models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import ConfigError, ContractError, ShapeError, UndefinedMetricError
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

PROJECTION_SEED = 7  # fixed seed for the feature-dimension reconciliation map


@dataclass(frozen=True)
class ScoredPredictions:
    """Per-class confidence scores (any real values) with true labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if scores.ndim != 2 or labels.ndim != 1 or scores.shape[0] != labels.shape[0]:
            raise ShapeError(f"scores {scores.shape} do not match labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= scores.shape[1]):
            raise ContractError("labels must lie in [0, num_classes)")


@dataclass(frozen=True)
class SimilarityReport:
    """Per-sample cosine/euclidean feature agreement and their means."""

    cosine_mean: float
    euclidean_mean: float
    per_pair: list = field(default_factory=list)


def top1_accuracy(pred: ScoredPredictions) -> float:
    """Fraction of rows whose argmax matches the label; ties pick the
    lowest class index."""
    if pred.labels.size == 0:
        raise ContractError("top1_accuracy of an empty prediction set")
    winners = np.argmax(pred.scores, axis=1)
    return float(np.mean(winners == pred.labels))


def average_precision(scores, positives) -> float:
    """All-points AP of one ranking: mean of precision@k over positive ranks.

    Sorting is by descending score, stable, so ties keep original order.
    Raises :class:`UndefinedMetricError` when there is no positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.ndim != 1 or s.shape != pos.shape:
        raise ShapeError(f"average_precision: shapes {s.shape} vs {pos.shape}")
    p = int(pos.sum())
    if p == 0:
        raise UndefinedMetricError("average_precision with zero positives")
    order = np.argsort(-s, kind="stable")
    hits = pos[order]
    ranks = np.arange(1, s.size + 1)
    return float((np.cumsum(hits)[hits] / ranks[hits]).sum() / p)


def ap_by_class(pred: ScoredPredictions) -> list[float | None]:
    """Per-class AP; classes with no positives map to None."""
    out: list[float | None] = []
    for c in range(pred.scores.shape[1]):
        positives = pred.labels == c
        if not positives.any():
            out.append(None)
        else:
            out.append(average_precision(pred.scores[:, c], positives))
    return out


def mean_ap(pred: ScoredPredictions) -> float:
    """Unweighted mean of per-class AP; absent classes are skipped."""
    aps = ap_by_class(pred)
    defined = [a for a in aps if a is not None]
    skipped = len(aps) - len(defined)
    if not defined:
        raise ContractError("mean_ap: every class is absent from the labels")
    if skipped:
        log.warning("mean_ap: skipped %d class(es) with no positives", skipped)
    return float(np.mean(defined))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: lengths {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("cosine similarity of a zero-norm vector")
    return float(a @ b / (na * nb))


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"euclidean_distance: lengths {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


def _orthonormal_columns(dim: int, k: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([PROJECTION_SEED, dim, k]))
    q, _ = np.linalg.qr(rng.normal(size=(dim, k)))
    return q


def _batched_features(model, images: np.ndarray, layer_selector,
                      batch_size: int) -> np.ndarray:
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            xb = Tensor(images[start:start + batch_size])
            feat = layer_selector(model, xb) if layer_selector else model.features(xb)
            rows.append(feat.data)
    return np.vstack(rows)


def compare_representations(teacher, student, dataset, layer_selector=None,
                            augment_cfg=None, batch_size: int = 256) -> SimilarityReport:
    """Per-sample feature similarity between two models on one dataset.

    When feature widths differ, both sides are mapped to the smaller width
    by fixed, seeded random orthonormal projections before comparison.
    """
    if len(dataset.labels) == 0:
        raise ContractError("compare_representations on an empty dataset")
    if teacher.spec.in_channels != student.spec.in_channels or \
            teacher.spec.image_size != student.spec.image_size:
        raise ConfigError("models disagree on input geometry")
    if augment_cfg is None:
        augment_cfg = data_mod.AugmentConfig(
            enabled=False,
            target_size=(teacher.spec.image_size, teacher.spec.image_size))
    images = data_mod.preprocess(dataset.images.data, augment_cfg)
    fa = _batched_features(teacher, images, layer_selector, batch_size)
    fb = _batched_features(student, images, layer_selector, batch_size)
    if fa.shape[1] != fb.shape[1]:
        k = min(fa.shape[1], fb.shape[1])
        if fa.shape[1] != k:
            fa = fa @ _orthonormal_columns(fa.shape[1], k)
        if fb.shape[1] != k:
            fb = fb @ _orthonormal_columns(fb.shape[1], k)
    per_pair = [(cosine_similarity(fa[i], fb[i]), euclidean_distance(fa[i], fb[i]))
                for i in range(fa.shape[0])]
    cos = float(np.mean([c for c, _ in per_pair]))
    euc = float(np.mean([e for _, e in per_pair]))
    return SimilarityReport(cosine_mean=cos, euclidean_mean=euc, per_pair=per_pair)
