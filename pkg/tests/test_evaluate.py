"""Episode streams, confusion lifting into the corpus label space, and few-shot classification."""
import numpy as np
import pytest

from segnn.evaluate import (
    EvalResult,
    classification_episodes,
    eval_stream,
    evaluate_classification,
    evaluate_stream,
    label_space,
    train_stream,
)
from segnn.exceptions import DataError
from segnn.fewshot import QueryResult


def result(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    return QueryResult("q", np.arange(pred.size), pred, np.zeros((pred.size, 3)), truth)


class FakeEpisode:
    def __init__(self, classes):
        self.n_ways = len(classes)
        self.target_classes = tuple(classes)


class TestEvalResult:
    def test_lifting(self):
        res = EvalResult(9)
        res.add(FakeEpisode([6, 8]), [result([0, 1, 2, 2], [0, 1, 1, 2])])
        c = res.total.counts
        assert c[0, 0] == 1 and c[6, 6] == 1 and c[6, 8] == 1 and c[8, 8] == 1
        assert res.total.total == 4 and res.episodes == 1

    def test_class_accumulates_across_episodes(self):
        res = EvalResult(9)
        res.add(FakeEpisode([5, 6]), [result([1, 1], [1, 0])])  # class 5: 1 hit of 2
        res.add(FakeEpisode([5, 7]), [result([1, 0], [1, 1])])  # class 5: 1 hit of 2
        assert res.miou([5]) == pytest.approx(2 / 4)
        assert res.miou([5], mode="episode") == pytest.approx(0.5)

    def test_majority_baseline(self):
        res = EvalResult(4)
        res.add(FakeEpisode([1]), [result([0, 0, 0, 0], [0, 0, 0, 1])])
        assert res.majority_accuracy == 0.75 and res.accuracy == 0.75

    def test_ignored_points(self):
        res = EvalResult(4)
        res.add(FakeEpisode([2]), [result([1, 0], [-1, 0])])
        assert res.total.total == 1 and res.majority_accuracy == 1.0

    def test_empty(self):
        res = EvalResult(3)
        assert res.accuracy is None and res.majority_accuracy is None and res.miou() is None

    def test_stream_callback(self):
        seen = []
        res = evaluate_stream([FakeEpisode([1])] * 3, lambda ep: [result([1], [1])], 2,
                              callback=lambda i, r: seen.append(r.episodes))
        assert seen == [1, 2, 3] and res.miou() == 1.0


class TestStreams:
    def test_eval_stream_count(self, small_corpus):
        assert len(list(eval_stream(small_corpus, 2, 1, 1, 3, 0))) == 6 * 3

    def test_eval_stream_rejects_too_many_ways(self, small_corpus):
        with pytest.raises(DataError):
            eval_stream(small_corpus, 5, 1, 1, 1, 0)

    def test_train_stream(self, small_corpus):
        eps = list(train_stream(small_corpus, 2, 1, 1, 5, 0))
        assert len(eps) == 5
        assert all(set(e.target_classes) <= set(small_corpus.train_classes) for e in eps)
        again = [e.queries[0].id for e in train_stream(small_corpus, 2, 1, 1, 5, 0)]
        assert again == [e.queries[0].id for e in eps]

    def test_label_space(self, small_corpus):
        assert label_space(small_corpus) == 9


class TestClassification:
    def test_episode_shape(self):
        labels = np.repeat([1, 2, 3], 5)
        for ep in classification_episodes(labels, 2, 2, 3, 4, seed=0):
            assert len(ep.classes) == 2 and all(len(s) == 2 for s in ep.support)
            assert len(ep.queries) == 6
            used = [j for s in ep.support for j in s] + ep.queries
            assert len(set(used)) == len(used)
            for c, shots in zip(ep.classes, ep.support):
                assert all(labels[j] == c for j in shots)
            assert all(labels[q] == c for q, c in zip(ep.queries, ep.query_classes))

    def test_starved(self):
        with pytest.raises(DataError):
            list(classification_episodes([1, 1, 2, 2], 2, 1, 2, 1, 0))

    def test_too_many_ways(self):
        with pytest.raises(DataError):
            list(classification_episodes([1, 2], 3, 1, 1, 1, 0))

    def test_separable_features_are_perfect(self):
        labels = np.repeat([1, 2, 3], 6)
        feats = np.eye(3)[labels - 1] + 0.01 * np.random.default_rng(0).normal(size=(18, 3))
        acc, per = evaluate_classification(feats, labels, 3, 1, 2, 10, 0, gamma=1000.0)
        assert acc == 1.0 and per == [1.0] * 10
