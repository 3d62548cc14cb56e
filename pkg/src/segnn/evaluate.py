"""Episodic evaluation and training loops over a corpus.

Scores live in the corpus label space: each episode's ``(N+1)``-class
confusion matrix is lifted to the original class ids (background stays 0),
so per-class IoU accumulates across every episode that features a class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .fewshot import Episode, QueryResult
from .exceptions import DataError
from .metrics import ConfusionMatrix, accuracy, aggregate_over_episodes, confusion
from .synth import Corpus, enumerate_test_episodes, sample_episode


@dataclass
class EvalResult:
    """Accumulated scores of an episode stream."""

    n_labels: int
    total: ConfusionMatrix = None
    episode_confs: List[ConfusionMatrix] = field(default_factory=list)
    majority_hits: int = 0
    scored_points: int = 0

    def __post_init__(self):
        if self.total is None:
            self.total = ConfusionMatrix.zeros(self.n_labels)

    @property
    def episodes(self) -> int:
        return len(self.episode_confs)

    def add(self, episode: Episode, results: List[QueryResult]) -> ConfusionMatrix:
        n = episode.n_ways + 1
        local = ConfusionMatrix.zeros(n)
        for r in results:
            local = local + confusion(r.pred, r.truth, n)
        ids = [0] + list(episode.target_classes or range(1, n))
        lifted = local.lift(ids, self.n_labels)
        self.total = self.total + lifted
        self.episode_confs.append(lifted)
        # majority-class baseline: predict the most frequent query label of the episode
        rows = local.counts.sum(axis=1)
        self.majority_hits += int(rows.max()) if rows.size else 0
        self.scored_points += int(rows.sum())
        return lifted

    @property
    def accuracy(self):
        return accuracy(self.total)

    @property
    def majority_accuracy(self):
        return self.majority_hits / self.scored_points if self.scored_points else None

    def miou(self, classes=None, mode: str = "global"):
        return aggregate_over_episodes(self.episode_confs if mode == "episode" else [self.total], mode, classes)


def evaluate_stream(
    episodes: Iterable[Episode], predict: Callable[[Episode], List[QueryResult]], n_labels: int, callback=None
) -> EvalResult:
    """Run ``predict`` on every episode and accumulate confusion counts."""
    result = EvalResult(n_labels)
    for i, ep in enumerate(episodes):
        result.add(ep, predict(ep))
        if callback is not None:
            callback(i, result)
    return result


def eval_stream(corpus: Corpus, ways: int, shots: int, n_query: int, per_combo: int, seed: int):
    """Every test-class combination, ``per_combo`` episodes each; empty streams are an error."""
    if ways > len(corpus.test_classes):
        raise DataError(f"{ways}-way episodes need {ways} test classes, corpus has {len(corpus.test_classes)}")
    return enumerate_test_episodes(corpus, ways, shots, n_query, per_combo, seed)


def train_stream(corpus: Corpus, ways: int, shots: int, n_query: int, n_episodes: int, seed: int):
    """``n_episodes`` random training-split episodes, independently seeded."""
    for i in range(n_episodes):
        ep_seed = int(np.random.SeedSequence([seed, 7919, i]).generate_state(1)[0])
        yield sample_episode(corpus, ways, shots, n_query, ep_seed, "train")


def label_space(corpus: Corpus) -> int:
    ids = [0, *corpus.train_classes, *corpus.test_classes, *corpus.class_names]
    return max(ids) + 1


# -- few-shot classification ---------------------------------------------------------


@dataclass
class ClassificationEpisode:
    support: List[List[int]]
    queries: List[int]
    query_classes: List[int]
    classes: List[int]


def classification_episodes(labels: Sequence[int], ways: int, shots: int, n_query: int, n_episodes: int, seed: int):
    """Episodes over cloud indices: ``shots`` support and ``n_query`` query clouds per sampled class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if ways > classes.size:
        raise DataError(f"{ways}-way episodes need {ways} classes, corpus has {classes.size}")
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}
    for c, idx in by_class.items():
        if idx.size < shots + n_query:
            raise DataError(f"class {c} is starved: {idx.size} clouds < {shots + n_query}")
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729, i]))
        chosen = sorted(int(c) for c in rng.choice(classes, ways, replace=False))
        support, queries, qcls = [], [], []
        for c in chosen:
            pick = rng.choice(by_class[c], shots + n_query, replace=False)
            support.append([int(j) for j in pick[:shots]])
            queries.extend(int(j) for j in pick[shots:])
            qcls.extend([c] * n_query)
        yield ClassificationEpisode(support, queries, qcls, chosen)


def evaluate_classification(global_feats, labels, ways, shots, n_query, n_episodes, seed, gamma):
    """Mean query accuracy of nearest-prototype classification over sampled episodes."""
    from .fewshot import classify_nn

    global_feats = np.asarray(global_feats)
    hits = total = 0
    per_episode = []
    for ep in classification_episodes(labels, ways, shots, n_query, n_episodes, seed):
        bank = [j for shots_ in ep.support for j in shots_]
        bank_labels = np.repeat(ep.classes, shots)
        ok = sum(
            classify_nn(global_feats[q], global_feats[bank], bank_labels, gamma)[0] == c
            for q, c in zip(ep.queries, ep.query_classes)
        )
        hits += ok
        total += len(ep.queries)
        per_episode.append(ok / len(ep.queries))
    return hits / total if total else None, per_episode
