"""Confusion counting, IoU/mIoU, accuracy, episode aggregation and the JSON report."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segnn.exceptions import ConfigError, DataError
from segnn.metrics import (
    ConfusionMatrix,
    accuracy,
    aggregate_over_episodes,
    config_digest,
    confusion,
    dumps_report,
    iou,
    metrics_report,
    miou,
    write_report,
)


def counting_iou(pred, truth, c):
    """IoU of class ``c`` by direct set counting."""
    p, t = pred == c, truth == c
    union = np.sum(p | t)
    return np.sum(p & t) / union if union else np.nan


class TestConfusion:
    def test_counts_pairs(self):
        conf = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
        expected = np.array([[1, 0, 0], [0, 1, 0], [0, 1, 1]])
        np.testing.assert_array_equal(conf.counts, expected)

    def test_ignore_label_skipped(self):
        conf = confusion([0, 1, 1], [0, -1, 1], 2)
        assert conf.total == 2

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            confusion([0, 1], [0], 2)

    def test_out_of_range_prediction(self):
        with pytest.raises(DataError, match="prediction"):
            confusion([0, 3], [0, 1], 2)

    def test_negative_counts_rejected(self):
        with pytest.raises(DataError):
            ConfusionMatrix(np.array([[1, -1], [0, 0]]))

    def test_non_square_rejected(self):
        with pytest.raises(DataError):
            ConfusionMatrix(np.zeros((2, 3)))

    def test_merge_adds(self):
        a = confusion([0, 1], [0, 1], 2)
        b = confusion([1, 1], [0, 1], 2)
        np.testing.assert_array_equal((a + b).counts, [[1, 1], [0, 2]])

    def test_merge_size_mismatch(self):
        with pytest.raises(DataError):
            ConfusionMatrix.zeros(2).merge(ConfusionMatrix.zeros(3))

    def test_lift_places_counts(self):
        local = ConfusionMatrix(np.array([[3, 1], [2, 4]]))
        lifted = local.lift([0, 5], 7)
        assert lifted.n_classes == 7
        assert lifted.counts[5, 5] == 4 and lifted.counts[0, 5] == 1 and lifted.counts[5, 0] == 2
        assert lifted.total == local.total

    def test_lift_rejects_duplicates(self):
        with pytest.raises(DataError):
            ConfusionMatrix.zeros(2).lift([1, 1], 3)


class TestIoU:
    def test_worked_example(self):
        # class 1: 6 of 10 union points hit; class 2: 5 of 10 -> mean 0.55
        conf = ConfusionMatrix(np.array([[0, 2, 2], [0, 6, 2], [1, 0, 5]]))
        values = iou(conf)
        np.testing.assert_allclose(values[1:], [0.6, 0.5])
        assert miou(conf) == pytest.approx(0.55, abs=1e-12)

    def test_empty_union_is_nan_and_skipped(self):
        conf = confusion([0, 1], [0, 1], 3)
        assert np.isnan(iou(conf)[2])
        assert miou(conf) == 1.0

    def test_no_scorable_class(self):
        assert miou(confusion([0, 0], [0, 0], 2)) is None

    def test_include_background(self):
        conf = confusion([0, 1, 1], [0, 0, 1], 2)
        assert miou(conf, include_background=True) == pytest.approx((0.5 + 0.5) / 2)

    def test_accuracy(self):
        assert accuracy(confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)) == 0.75
        assert accuracy(ConfusionMatrix.zeros(2)) is None

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 10_000), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_matches_counting_oracle(self, m, n_classes, seed):
        rng = np.random.default_rng(seed)
        truth = rng.integers(0, n_classes, m)
        pred = rng.integers(0, n_classes, m)
        conf = confusion(pred, truth, n_classes)
        for c in range(n_classes):
            np.testing.assert_allclose(iou(conf)[c], counting_iou(pred, truth, c), equal_nan=True)
        oracle = [counting_iou(pred, truth, c) for c in range(1, n_classes)]
        oracle = [v for v in oracle if not np.isnan(v)]
        expected = np.mean(oracle) if oracle else None
        assert miou(conf) == (pytest.approx(expected, abs=1e-12) if oracle else None)
        assert accuracy(conf) == pytest.approx(np.mean(pred == truth))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 500), st.integers(0, 2**31 - 1))
    def test_bounds(self, m, seed):
        rng = np.random.default_rng(seed)
        conf = confusion(rng.integers(0, 4, m), rng.integers(0, 4, m), 4)
        finite = iou(conf)[~np.isnan(iou(conf))]
        assert np.all((finite >= 0) & (finite <= 1))

    def test_perfect_prediction(self):
        truth = np.array([0, 1, 2, 2, 1])
        assert miou(confusion(truth, truth, 3)) == 1.0


class TestAggregation:
    def setup_method(self):
        self.a = confusion([1, 1, 0, 0], [1, 0, 0, 0], 2)  # IoU 0.5
        self.b = confusion([1, 1, 1, 0], [1, 1, 1, 1], 2)  # IoU 0.75

    def test_global_sums_first(self):
        # 4 hits of a 6-point union
        assert aggregate_over_episodes([self.a, self.b]) == pytest.approx(4 / 6)

    def test_episode_averages(self):
        assert aggregate_over_episodes([self.a, self.b], mode="episode") == pytest.approx(0.625)

    def test_episode_skips_undefined(self):
        empty = confusion([0], [0], 2)
        assert aggregate_over_episodes([self.a, empty], mode="episode") == pytest.approx(0.5)

    def test_empty_stream(self):
        assert aggregate_over_episodes([]) is None

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            aggregate_over_episodes([self.a], mode="median")


class TestReport:
    def test_fields(self):
        conf = ConfusionMatrix(np.array([[0, 2, 2], [0, 6, 2], [1, 0, 5]]))
        rep = metrics_report(conf, 3, {"d": 20}, class_names={1: "chair", 2: "table"})
        assert rep["per_class_iou"] == {"chair": 0.6, "table": 0.5}
        assert rep["miou"] == 0.55
        assert rep["episodes"] == 3
        assert rep["accuracy"] == pytest.approx(11 / 18)

    def test_undefined_class_is_null(self):
        rep = metrics_report(confusion([0, 1], [0, 1], 3), 1, {})
        assert rep["per_class_iou"]["2"] is None
        assert "null" in dumps_report(rep)

    def test_miou_override_and_extra(self):
        rep = metrics_report(ConfusionMatrix.zeros(2), 0, {}, miou_value=0.25, extra={"mode": "x"})
        assert rep["miou"] == 0.25 and rep["mode"] == "x"

    def test_digest_is_order_free(self):
        assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})
        assert config_digest({"a": 1}) != config_digest({"a": 2})
        assert len(config_digest({})) == 64

    def test_write_is_stable(self, tmp_path):
        rep = metrics_report(confusion([0, 1, 1], [0, 1, 0], 2), 1, {"seed": 0})
        write_report(tmp_path / "a.json", rep)
        write_report(tmp_path / "b.json", rep)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert json.loads((tmp_path / "a.json").read_text()) == rep
