import numpy as np
import pytest

from forgenet import autodiff as ad
from forgenet.autodiff import Tensor
from forgenet.formats import read_pgm
from forgenet.metrics import (
    MetricsReport,
    accuracy,
    emit_report,
    grad_cam,
    read_metrics,
    roc_auc,
    roc_points,
    trapezoid_area,
    video_auc,
)
from forgenet.optim import ParamStore


def auc_pair_counting(scores, labels):
    """All-pairs oracle: correct pairs count 1, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_hand_counted_example(self):
        # pairs: (.35>.1), (.35<.4), (.8>.1), (.8>.4) -> 3 of 4
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_all_ties_give_half(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="each class"):
            roc_auc([0.1, 0.2], [1, 1])

    def test_matches_pair_counting_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            # quantized scores produce plenty of ties
            scores = np.round(rng.random(n), 1)
            got = roc_auc(scores, labels)
            want = auc_pair_counting(scores, labels)
            assert abs(got - want) < 1e-12

    def test_negation_complement(self):
        rng = np.random.default_rng(1)
        scores = np.round(rng.random(40), 1)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        assert roc_auc(scores, labels) + roc_auc(-scores, labels) == 1.0

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        scores = rng.random(30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        a = roc_auc(scores, labels)
        b = roc_auc(np.exp(3 * scores) + 7, labels)
        assert a == b


class TestAccuracy:
    def test_perfect(self):
        assert accuracy([0.9, 0.1], [1, 0]) == 1.0

    def test_inverted(self):
        assert accuracy([0.1, 0.9], [1, 0]) == 0.0

    def test_half(self):
        assert accuracy([0.9, 0.9], [1, 0]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            accuracy([], [])


class TestVideoAuc:
    def test_constant_frames_reduce_to_frame_auc(self):
        scores = [0.2, 0.2, 0.7, 0.7]
        labels = [0, 0, 1, 1]
        videos = [0, 0, 1, 1]
        assert video_auc(scores, labels, videos) == roc_auc([0.2, 0.7], [0, 1])

    def test_mean_aggregation_hand_case(self):
        scores = [0.2, 0.4, 0.6, 0.8]
        labels = [0, 0, 1, 1]
        videos = [0, 0, 1, 1]
        assert video_auc(scores, labels, videos) == 1.0

    def test_frame_order_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.random(12)
        labels = np.repeat([0, 1, 0, 1], 3)
        videos = np.repeat([0, 1, 2, 3], 3)
        base = video_auc(scores, labels, videos)
        perm = rng.permutation(12)
        assert video_auc(scores[perm], labels[perm], videos[perm]) == base

    def test_duplicating_frames_changes_nothing(self):
        scores = [0.2, 0.4, 0.9, 0.5]
        labels = [0, 0, 1, 1]
        videos = [0, 0, 1, 1]
        base = video_auc(scores, labels, videos)
        assert video_auc(scores * 2, labels * 2, videos * 2) == base

    def test_conflicting_labels_rejected(self):
        with pytest.raises(ValueError, match="conflicting"):
            video_auc([0.1, 0.9], [0, 1], [7, 7])


class TestRocPoints:
    def test_row_count_is_distinct_thresholds_plus_start(self):
        rng = np.random.default_rng(4)
        scores = np.round(rng.random(25), 1)
        labels = rng.integers(0, 2, size=25)
        labels[:2] = [0, 1]
        points = roc_points(scores, labels)
        assert len(points) == len(set(scores.tolist())) + 1
        assert points[0] == (0.0, 0.0, None)
        assert points[-1][:2] == (1.0, 1.0)

    def test_monotone_in_both_coordinates(self):
        rng = np.random.default_rng(5)
        scores = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        points = roc_points(scores, labels)
        fpr = [p[0] for p in points]
        tpr = [p[1] for p in points]
        assert all(a <= b for a, b in zip(fpr, fpr[1:]))
        assert all(a <= b for a, b in zip(tpr, tpr[1:]))

    def test_trapezoid_equals_rank_auc(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(5, 50))
            scores = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            area = trapezoid_area(roc_points(scores, labels))
            assert abs(area - roc_auc(scores, labels)) < 1e-9


class _TapStub:
    """Forward produces one tap; the logit is the mean of its channel 0."""

    def __init__(self, feature):
        self.feature = np.asarray(feature, dtype=np.float64)
        self.store = ParamStore()
        self._w = self.store.create("w", np.ones_like(self.feature))

    def forward(self, image):
        from forgenet.model import ForwardResult

        feat = ad.mul(Tensor(self.feature), self._w)
        c, h, w = feat.shape
        chan0 = ad.reshape(feat, (c, h * w))
        row = ad.matmul(Tensor(np.eye(1, c)), chan0)  # channel 0 only
        logit = ad.scale(ad.sum_all(row), 1.0 / (h * w))
        return ForwardResult(logit, feat, {"feat": feat})


class TestGradCam:
    def test_logit_mean_of_channel0_highlights_channel0(self):
        rng = np.random.default_rng(7)
        feature = rng.normal(size=(3, 4, 4))
        stub = _TapStub(feature)
        cam = grad_cam(stub, np.zeros((3, 4, 4)), "feat")
        expected = np.maximum(feature[0] / 16.0, 0.0)
        expected = (expected - expected.min()) / (expected.max() - expected.min())
        np.testing.assert_allclose(cam, expected, atol=1e-12)

    def test_constant_feature_yields_zeros(self):
        stub = _TapStub(np.full((2, 3, 3), 0.4))
        cam = grad_cam(stub, np.zeros(1), "feat")
        np.testing.assert_array_equal(cam, np.zeros((3, 3)))

    def test_values_in_unit_interval_and_tap_shape(self):
        rng = np.random.default_rng(8)
        stub = _TapStub(rng.normal(size=(5, 6, 7)))
        cam = grad_cam(stub, np.zeros(1), "feat")
        assert cam.shape == (6, 7)
        assert cam.min() >= 0.0 and cam.max() <= 1.0

    def test_unknown_tap_lists_valid_names(self):
        stub = _TapStub(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError, match="valid taps: feat"):
            grad_cam(stub, np.zeros(1), "nonexistent")


class TestEmitReport:
    def make_report(self):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        points = roc_points(scores, labels)
        return MetricsReport(
            frame_auc=roc_auc(scores, labels),
            frame_acc=accuracy(scores, labels),
            video_auc=None,
            patch_acc=0.9,
            roc=points,
            loss_history=[1.0, 0.5],
            config={"note": "test"},
            seed=3,
        )

    def test_metrics_json_round_trip(self, tmp_path):
        report = self.make_report()
        emit_report(report, tmp_path)
        back = read_metrics(tmp_path)
        assert back["frame_auc"] == report.frame_auc
        assert back["config"] == {"note": "test"}
        assert back["loss_history"] == [1.0, 0.5]

    def test_csv_rows_match_threshold_count(self, tmp_path):
        report = self.make_report()
        emit_report(report, tmp_path)
        rows = (tmp_path / "roc.csv").read_text().strip().splitlines()
        assert rows[0] == "fpr,tpr,threshold"
        assert len(rows) - 1 == len(report.roc)

    def test_emitted_auc_matches_emitted_roc_integral(self, tmp_path):
        report = self.make_report()
        emit_report(report, tmp_path)
        back = read_metrics(tmp_path)
        pts = [(p[0], p[1]) for p in back["roc"]]
        area = np.trapezoid([p[1] for p in pts], [p[0] for p in pts])
        assert abs(back["frame_auc"] - area) < 1e-9

    def test_maps_and_svg_written(self, tmp_path):
        report = self.make_report()
        emit_report(
            report,
            tmp_path,
            maps={"s0": np.array([[0.0, 1.0]])},
            cams={"s0": np.array([[0.5, 0.25]])},
            write_svg=True,
        )
        assert read_pgm(tmp_path / "maps" / "s0.pgm").tolist() == [[0, 255]]
        assert read_pgm(tmp_path / "cams" / "s0.pgm").tolist() == [[128, 64]]
        svg = (tmp_path / "roc.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg
