"""Confusion matrices, IoU/mIoU and accuracy, plus the JSON metrics report."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, DataError


@dataclass
class ConfusionMatrix:
    """Square count matrix, rows = truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError(f"confusion counts must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise DataError("confusion counts must be nonnegative")

    @classmethod
    def zeros(cls, n_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError(f"cannot merge {self.n_classes}- and {other.n_classes}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def lift(self, class_ids: Sequence[int], n_total: int) -> "ConfusionMatrix":
        """Re-index into a larger label space: local class ``i`` becomes ``class_ids[i]``."""
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.shape[0] != self.n_classes:
            raise DataError(f"{ids.shape[0]} class ids for a {self.n_classes}-class matrix")
        if np.unique(ids).size != ids.size or ids.min() < 0 or ids.max() >= n_total:
            raise DataError(f"class ids must be distinct and in [0, {n_total})")
        out = np.zeros((n_total, n_total), dtype=np.int64)
        out[np.ix_(ids, ids)] = self.counts
        return ConfusionMatrix(out)


def confusion(pred, truth, n_classes: int) -> ConfusionMatrix:
    """Count (truth, prediction) pairs; points whose truth is -1 are skipped."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise DataError(f"{pred.size} predictions for {truth.size} labels")
    keep = truth != -1
    pred, truth = pred[keep], truth[keep]
    for name, a in (("truth", truth), ("prediction", pred)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise DataError(f"{name} id out of range [0, {n_classes})")
    flat = np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(flat.reshape(n_classes, n_classes))


def iou(conf: ConfusionMatrix) -> np.ndarray:
    """Per-class TP / (TP + FP + FN); NaN where the union is empty."""
    c = conf.counts
    tp = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def miou(conf: ConfusionMatrix, scored_classes: Optional[Sequence[int]] = None, include_background: bool = False):
    """Mean IoU over ``scored_classes`` (default: every class except 0 unless requested).

    Classes with an empty union are left out. Returns ``None`` when no class is
    scorable, which the report writes as ``null``.
    """
    values = iou(conf)
    if scored_classes is None:
        scored_classes = range(0 if include_background else 1, conf.n_classes)
    scored = [v for c, v in ((int(c), values[int(c)]) for c in scored_classes) if not np.isnan(v)]
    return float(np.mean(scored)) if scored else None


def accuracy(conf: ConfusionMatrix):
    return float(np.trace(conf.counts) / conf.total) if conf.total else None


def aggregate_over_episodes(
    confs: Iterable[ConfusionMatrix],
    mode: str = "global",
    scored_classes: Optional[Sequence[int]] = None,
    include_background: bool = False,
):
    """mIoU over an episode stream.

    ``global`` sums the counts first; ``episode`` averages the per-episode
    mIoUs, skipping episodes where it is undefined.
    """
    confs = list(confs)
    if not confs:
        return None
    if mode == "global":
        total = confs[0]
        for c in confs[1:]:
            total = total + c
        return miou(total, scored_classes, include_background)
    if mode == "episode":
        vals = [miou(c, scored_classes, include_background) for c in confs]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    raise ConfigError(f"unknown aggregation mode {mode!r}")


def config_digest(config: Dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _rounded(x, digits=12):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else round(float(x), digits)


def metrics_report(
    conf: ConfusionMatrix,
    episodes: int,
    config: Dict,
    class_names: Optional[Dict[int, str]] = None,
    scored_classes: Optional[Sequence[int]] = None,
    include_background: bool = False,
    miou_value=None,
    extra: Optional[Dict] = None,
) -> Dict:
    """The metrics JSON object: per-class IoU, mIoU, accuracy, episode count, config digest.

    ``miou_value`` overrides the global mIoU (e.g. per-episode aggregation).
    """
    values = iou(conf)
    if scored_classes is None:
        scored_classes = [c for c in range(conf.n_classes) if include_background or c > 0]
    names = class_names or {}
    per_class = {
        names.get(int(c), str(int(c))): _rounded(values[int(c)]) for c in scored_classes
    }
    m = miou(conf, scored_classes, include_background) if miou_value is None else miou_value
    out = {
        "per_class_iou": per_class,
        "miou": _rounded(m),
        "accuracy": _rounded(accuracy(conf)),
        "episodes": int(episodes),
        "config_digest": config_digest(config),
    }
    if extra:
        out.update(extra)
    return out


def dumps_report(report: Dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(path, report: Dict) -> None:
    Path(path).write_text(dumps_report(report))
