"""Episodes, prototypes and the similarity-matching segmentation head."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .encoder import Encoder, EncoderConfig
from .exceptions import ConfigError, DataError
from .pointcloud import LabeledCloud, normalize_cloud, resample_to

DEFAULT_GAMMA = 1000.0
DEFAULT_POINTS = 2048


@dataclass
class Episode:
    """An N-way K-shot task.

    ``support[n][k]`` is the k-th shot of way ``n``; its labels are ``n + 1``
    for the way's class and 0 for background. Query labels (optional) use
    ``0..N``.
    """

    n_ways: int
    k_shots: int
    support: List[List[LabeledCloud]]
    queries: List[LabeledCloud]
    class_names: Optional[List[str]] = None
    target_classes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.n_ways < 1 or self.k_shots < 1:
            raise ConfigError("n_ways and k_shots must be >= 1")
        if len(self.support) != self.n_ways or any(len(s) != self.k_shots for s in self.support):
            raise DataError(f"support must be {self.n_ways} ways x {self.k_shots} shots")
        for n, shots in enumerate(self.support):
            for cloud in shots:
                if cloud.labels is None:
                    raise DataError(f"support cloud {cloud.id!r} is unlabeled")
                if not np.any(cloud.labels == n + 1):
                    raise DataError(f"support cloud {cloud.id!r} has no point of way {n + 1}")
                if cloud.labels.max() > self.n_ways:
                    raise DataError(f"support cloud {cloud.id!r} has label > {self.n_ways}")
        for q in self.queries:
            if q.labels is not None and q.labels.max() > self.n_ways:
                raise DataError(f"query cloud {q.id!r} has label > {self.n_ways}")

    @property
    def n_classes(self) -> int:
        return self.n_ways + 1


@dataclass
class Prototypes:
    """``P x D`` prototype vectors and their ``P x (N+1)`` one-hot labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[0] != self.labels.shape[0]:
            raise DataError("one label row per prototype is required")
        if not np.all(self.labels.sum(axis=1) == 1):
            raise DataError("prototype label rows must be one-hot")

    @property
    def class_ids(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def masked_average_prototypes(feats, labels, n_classes: int):
    """Per-class mean of feature rows.

    Returns ``(means, present)``; rows of ``means`` for classes without any
    point are NaN and flagged False in ``present``.
    """
    feats = np.asarray(feats)
    labels = np.asarray(labels)
    if labels.shape[0] != feats.shape[0]:
        raise DataError(f"{labels.shape[0]} labels for {feats.shape[0]} feature rows")
    valid = (labels >= 0) & (labels < n_classes)
    if not np.any(valid):
        raise DataError("no labeled points to pool")
    counts = np.bincount(labels[valid], minlength=n_classes)
    sums = np.zeros((n_classes, feats.shape[1]))
    np.add.at(sums, labels[valid], feats[valid])
    present = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts[:, None]
    means[~present] = np.nan
    return means, present


def build_prototypes(support_feats, support_labels, n_ways: int) -> Prototypes:
    """K prototypes per class, one per shot index.

    The foreground prototype of way ``n``, shot ``k`` pools that shot's way
    points. The background prototype of shot ``k`` pools the background
    points of the k-th shot of every way.
    """
    k_shots = len(support_feats[0])
    vecs: List[List[np.ndarray]] = [[] for _ in range(n_ways + 1)]
    for k in range(k_shots):
        bg_f, bg_l = [], []
        for n in range(n_ways):
            f, lab = support_feats[n][k], support_labels[n][k]
            means, present = masked_average_prototypes(f, np.where(lab == n + 1, 1, np.where(lab == 0, 0, -1)), 2)
            if not present.any():
                raise DataError(f"support shot {k} of way {n + 1} has neither way nor background points")
            if present[1]:
                vecs[n + 1].append(means[1])
            bg_f.append(f[lab == 0])
        bg = np.concatenate(bg_f)
        if bg.shape[0]:
            vecs[0].append(bg.mean(axis=0))
    rows, labels = [], []
    for c, vs in enumerate(vecs):
        if c > 0 and not vs:
            raise DataError(f"no prototype for way {c}")
        rows.extend(vs)
        labels.extend([c] * len(vs))
    onehot = np.zeros((len(labels), n_ways + 1))
    onehot[np.arange(len(labels)), labels] = 1.0
    return Prototypes(np.vstack(rows), onehot)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    # at least single precision: squared feature magnitudes overflow float16
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def cosine_similarity(query_feats, protos) -> np.ndarray:
    """``M x P`` cosine similarities; zero vectors give zero similarity."""
    p = protos.vectors if isinstance(protos, Prototypes) else np.asarray(protos)
    q = np.asarray(query_feats)
    if q.shape[-1] != p.shape[-1]:
        raise DataError(f"feature dims differ: {q.shape[-1]} vs {p.shape[-1]}")
    return np.clip(l2_normalize(q) @ l2_normalize(p).T, -1.0, 1.0)


def phi(x, gamma: float):
    """``exp(-gamma (1 - x))``; overflows to inf for aggregated similarities well above 1."""
    with np.errstate(over="ignore"):
        return np.exp(-gamma * (1.0 - np.asarray(x, dtype=np.float64)))


def similarity_logits(s_cos, protos: Prototypes, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if gamma <= 0:
        raise ConfigError(f"gamma must be > 0, got {gamma}")
    return phi(s_cos @ protos.labels, gamma)


def predict_from_similarity(s_cos, protos: Prototypes) -> np.ndarray:
    # argmax on the aggregated similarity: phi is strictly increasing, and
    # taking argmax after exp would suffer underflow ties for large gamma.
    return np.argmax(s_cos @ protos.labels, axis=1)


class CloudFeaturizer:
    """Normalizes, resamples to a fixed size and encodes clouds, with a per-id cache.

    The resampling seed depends only on ``seed`` and the cloud id, so cached
    features are valid for every episode that reuses a cloud.
    """

    def __init__(self, encoder: Encoder, n_points: int = DEFAULT_POINTS, seed: int = 0, cache_dtype=None):
        if n_points < 1:
            raise ConfigError("n_points must be >= 1")
        self.encoder = encoder
        self.n_points = n_points
        self.seed = seed
        self.cache_dtype = cache_dtype
        self._cache = {}

    def _prep_seed(self, cloud: LabeledCloud) -> int:
        return (zlib.crc32(cloud.id.encode()) ^ (self.seed * 2654435761)) & 0xFFFFFFFF

    def prepare(self, cloud: LabeledCloud):
        prepared, idx = resample_to(normalize_cloud(cloud), self.n_points, self._prep_seed(cloud))
        return prepared, idx

    def __call__(self, cloud: LabeledCloud):
        """``(features, source_index)`` for the prepared version of ``cloud``."""
        key = cloud.id
        if key and key in self._cache:
            return self._cache[key]
        prepared, idx = self.prepare(cloud)
        feats = self.encoder.encode(prepared).data
        if self.cache_dtype is not None:
            feats = feats.astype(self.cache_dtype)
        if key:
            self._cache[key] = (feats, idx)
        return feats, idx

    def clear(self):
        self._cache.clear()


@dataclass
class QueryResult:
    """Predictions for the scored points of one query cloud.

    ``point_index`` lists the source rows that were scored (all of them when
    the cloud was padded, the subsample otherwise).
    """

    cloud_id: str
    point_index: np.ndarray
    pred: np.ndarray
    logits: np.ndarray
    truth: Optional[np.ndarray] = None


def _scored(cloud: LabeledCloud, idx: np.ndarray, n_points: int):
    """Rows of the prepared cloud to score and their source indices."""
    if cloud.n_points <= n_points:
        # padding appends duplicates after arange(n): the first n rows are the originals
        return np.arange(cloud.n_points), idx[: cloud.n_points]
    return np.arange(n_points), idx


def support_features(episode: Episode, featurize):
    feats, labels = [], []
    for shots in episode.support:
        fs, ls = [], []
        for cloud in shots:
            f, idx = featurize(cloud)
            fs.append(f)
            ls.append(cloud.labels[idx])
        feats.append(fs)
        labels.append(ls)
    return feats, labels


def segnn_predict(episode: Episode, featurizer: CloudFeaturizer, gamma: float = DEFAULT_GAMMA) -> List[QueryResult]:
    """Training-free segmentation of every query cloud of ``episode``."""
    feats, labels = support_features(episode, featurizer)
    protos = build_prototypes(feats, labels, episode.n_ways)
    out = []
    for q in episode.queries:
        f, idx = featurizer(q)
        rows, src = _scored(q, idx, featurizer.n_points)
        s = cosine_similarity(f[rows], protos)
        out.append(
            QueryResult(
                q.id,
                src,
                predict_from_similarity(s, protos),
                similarity_logits(s, protos, gamma),
                None if q.labels is None else q.labels[src],
            )
        )
    return out


def write_predictions(path, result: QueryResult) -> None:
    """One line per scored point: ``index predicted_label max_logit``."""
    top = result.logits.max(axis=1)
    lines = [f"{int(i)} {int(p)} {v:.9g}" for i, p, v in zip(result.point_index, result.pred, top)]
    Path(path).write_text("\n".join(lines) + "\n")


def classify_nn(global_feat, bank_feats, bank_labels, gamma: float = DEFAULT_GAMMA):
    """Nearest-prototype classification of one global feature.

    Scores are ``phi`` of the cosine similarity to every bank entry summed
    per class. Returns ``(class_id, classes, log_scores)``; the log form
    avoids underflow for large ``gamma``.
    """
    bank_feats = np.asarray(bank_feats)
    bank_labels = np.asarray(bank_labels)
    if bank_feats.ndim != 2 or bank_feats.shape[0] == 0:
        raise DataError("classification bank is empty")
    if bank_labels.shape[0] != bank_feats.shape[0]:
        raise DataError("one label per bank entry is required")
    s = cosine_similarity(np.asarray(global_feat)[None, :], bank_feats)[0]
    z = -gamma * (1.0 - s)
    classes = np.unique(bank_labels)
    log_scores = np.array([logsumexp(z[bank_labels == c]) for c in classes])
    return int(classes[np.argmax(log_scores)]), classes, log_scores


def make_featurizer(cfg: EncoderConfig, n_points: int = DEFAULT_POINTS, seed: int = 0, cache_dtype=None):
    return CloudFeaturizer(Encoder(cfg), n_points, seed, cache_dtype)
