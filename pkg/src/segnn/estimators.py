"""scikit-learn style wrappers.

``SegNNEncoder`` is a stateless transformer from clouds to per-point
features. ``SegNN`` is "fitted" on a support set (no learning, just
prototypes) and predicts labels for query clouds. ``SegPN`` is fitted on a
stream of training episodes and predicts whole episodes, because its head
adapts the prototypes to each episode's queries.
"""
from __future__ import annotations

from typing import Iterable, List, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .encoder import Encoder, EncoderConfig
from .exceptions import ConfigError, DataError
from .fewshot import (
    DEFAULT_GAMMA,
    CloudFeaturizer,
    Episode,
    QueryResult,
    _scored,
    build_prototypes,
    cosine_similarity,
    predict_from_similarity,
    similarity_logits,
    support_features,
)
from .pointcloud import LabeledCloud, k_nearest_neighbors, normalize_cloud
from .quest import AdamW, QuestConfig, init_params, segpn_predict, train


def _as_clouds(X) -> List[LabeledCloud]:
    if isinstance(X, LabeledCloud):
        return [X]
    X = list(X)
    if not all(isinstance(c, LabeledCloud) for c in X):
        raise DataError("expected LabeledCloud inputs")
    return X


def _full_labels(cloud: LabeledCloud, result: QueryResult) -> np.ndarray:
    """Spread scored-point predictions to every point of ``cloud`` (nearest scored point)."""
    out = np.full(cloud.n_points, -1, dtype=np.int64)
    out[result.point_index] = result.pred
    missing = np.flatnonzero(out < 0)
    if missing.size:
        nn = k_nearest_neighbors(cloud.coords[missing], cloud.coords[result.point_index], 1)[:, 0]
        out[missing] = result.pred[nn]
    return out


class _EncoderParams:
    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d=self.d, theta=self.theta, layers=self.layers, k_neigh=self.k_neigh, k_up=self.k_up,
            variance=self.variance, seed=self.seed, freq_mode=self.freq_mode,
        )


class SegNNEncoder(_EncoderParams, TransformerMixin, BaseEstimator):
    """Clouds -> list of ``M x D`` per-point feature matrices (normalized, not resampled)."""

    def __init__(self, d=20, theta=30.0, layers=3, k_neigh=16, k_up=3, variance=1.0, freq_mode="abs", seed=0):
        self.d = d
        self.theta = theta
        self.layers = layers
        self.k_neigh = k_neigh
        self.k_up = k_up
        self.variance = variance
        self.freq_mode = freq_mode
        self.seed = seed

    def fit(self, X=None, y=None):
        self.encoder_ = Encoder(self._encoder_config())
        self.n_features_out_ = self.encoder_.cfg.output_dim
        return self

    def transform(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "encoder_")
        return [self.encoder_.encode(normalize_cloud(c)).data for c in _as_clouds(X)]


class SegNN(_EncoderParams, BaseEstimator):
    """Training-free few-shot segmenter.

    ``fit(support)`` takes ``support[n][k]`` clouds labeled ``n + 1`` on the
    way's points and 0 on background (or an :class:`Episode`);
    ``predict(X)`` returns one label array per query cloud covering every
    original point.
    """

    def __init__(self, d=20, theta=30.0, layers=3, k_neigh=16, k_up=3, variance=1.0, freq_mode="abs", gamma=DEFAULT_GAMMA,
                 n_points=2048, seed=0):
        self.d = d
        self.theta = theta
        self.layers = layers
        self.k_neigh = k_neigh
        self.k_up = k_up
        self.variance = variance
        self.freq_mode = freq_mode
        self.gamma = gamma
        self.n_points = n_points
        self.seed = seed

    def fit(self, support, y=None):
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if isinstance(support, Episode):
            episode = support
        else:
            support = [list(shots) for shots in support]
            episode = Episode(len(support), len(support[0]), support, [])
        self.featurizer_ = CloudFeaturizer(Encoder(self._encoder_config()), self.n_points, self.seed)
        feats, labels = support_features(episode, self.featurizer_)
        self.prototypes_ = build_prototypes(feats, labels, episode.n_ways)
        self.n_ways_ = episode.n_ways
        self.classes_ = np.arange(episode.n_ways + 1)
        return self

    def _results(self, X) -> List[QueryResult]:
        check_is_fitted(self, "prototypes_")
        out = []
        for q in _as_clouds(X):
            f, idx = self.featurizer_(q)
            rows, src = _scored(q, idx, self.n_points)
            s = cosine_similarity(f[rows], self.prototypes_)
            out.append(QueryResult(q.id, src, predict_from_similarity(s, self.prototypes_),
                                   similarity_logits(s, self.prototypes_, self.gamma)))
        return out

    def predict(self, X) -> List[np.ndarray]:
        if isinstance(X, Episode):
            X = X.queries
        clouds = _as_clouds(X)
        return [_full_labels(c, r) for c, r in zip(clouds, self._results(clouds))]

    def decision_function(self, X) -> List[np.ndarray]:
        """Per scored point ``phi`` logits, one ``P x (N+1)`` array per cloud."""
        return [r.logits for r in self._results(X)]


class SegPN(_EncoderParams, BaseEstimator):
    """Frozen encoder plus the trainable prototype-rectification head.

    ``fit(episodes)`` runs one optimizer step per labeled training episode;
    ``predict(episode)`` returns full-cloud label arrays for the episode's queries.
    """

    def __init__(self, d=10, theta=30.0, layers=3, k_neigh=16, k_up=3, variance=1.0, freq_mode="abs", hidden=192, kernel=32,
                 lr=1e-3, weight_decay=1e-4, halve_every=7000, temperature=10.0, n_points=2048, seed=0):
        self.d = d
        self.theta = theta
        self.layers = layers
        self.k_neigh = k_neigh
        self.k_up = k_up
        self.variance = variance
        self.freq_mode = freq_mode
        self.hidden = hidden
        self.kernel = kernel
        self.lr = lr
        self.weight_decay = weight_decay
        self.halve_every = halve_every
        self.temperature = temperature
        self.n_points = n_points
        self.seed = seed

    def _quest_config(self) -> QuestConfig:
        return QuestConfig(hidden=self.hidden, kernel=self.kernel, lr=self.lr, weight_decay=self.weight_decay,
                           halve_every=self.halve_every, temperature=self.temperature)

    def fit(self, episodes: Iterable[Episode], y=None):
        cfg = self._quest_config()
        enc = self._encoder_config()
        self.featurizer_ = CloudFeaturizer(Encoder(enc), self.n_points, self.seed, np.float32)
        self.params_ = init_params(enc.output_dim, cfg.hidden, self.seed)
        self.optimizer_ = AdamW(self.params_, cfg)
        _, self.loss_trace_ = train(episodes, self.params_, self.optimizer_, cfg, self.featurizer_)
        return self

    def predict(self, episode: Union[Episode, Sequence[Episode]]):
        check_is_fitted(self, "params_")
        if not isinstance(episode, Episode):
            return [self.predict(e) for e in episode]
        results = segpn_predict(episode, self.params_, self._quest_config(), self.featurizer_)
        return [_full_labels(q, r) for q, r in zip(episode.queries, results)]
