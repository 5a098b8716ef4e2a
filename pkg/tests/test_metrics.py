import numpy as np
import pytest

from balseg import metrics
from balseg.errors import ConfigError, ShapeError


def _oracle_f1(pred, truth, num_classes):
    """Brute-force per-pixel F1 oracle, no confusion matrix involved."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    per_class = []
    tps = fps = fns = 0
    for c in range(1, num_classes + 1):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        per_class.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
        tps, fps, fns = tps + tp, fps + fp, fns + fn
    micro = 2 * tps / (2 * tps + fps + fns) if (2 * tps + fps + fns) else 0.0
    return per_class, micro, float(np.mean(per_class))


class TestMergeSoftmax:
    def test_one_hot_background(self):
        probs = np.zeros((1, 1, 5))
        probs[..., 0] = 1.0
        assert metrics.merge_softmax(probs)[0, 0] == 0

    def test_tie_toward_lowest_index(self):
        probs = np.array([[[0.1, 0.4, 0.4, 0.05, 0.05]]])
        assert metrics.merge_softmax(probs)[0, 0] == 1

    def test_unnormalized_rejected(self):
        with pytest.raises(ShapeError, match="sum to 1"):
            metrics.merge_softmax(np.full((2, 2, 3), 0.5))

    def test_matches_per_pixel_argmax(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(4), size=(6, 7))
        merged = metrics.merge_softmax(probs)
        for i in range(6):
            for j in range(7):
                assert merged[i, j] == int(np.argmax(probs[i, j]))


class TestMergeSigmoid:
    def test_all_below_threshold_is_background(self):
        scores = np.array([[[0.1, 0.15, 0.05, 0.19]]])
        assert metrics.merge_sigmoid(scores)[0, 0] == 0

    def test_clear_argmax(self):
        scores = np.array([[[0.3, 0.5, 0.1, 0.2]]])
        assert metrics.merge_sigmoid(scores)[0, 0] == 2

    def test_exact_threshold_is_background(self):
        scores = np.array([[[0.2, 0.1]]])
        assert metrics.merge_sigmoid(scores)[0, 0] == 0
        just_above = np.array([[[0.2 + 1e-9, 0.1]]])
        assert metrics.merge_sigmoid(just_above)[0, 0] == 1

    def test_out_of_range_rejected(self):
        with pytest.raises(ShapeError, match=r"\[0, 1\]"):
            metrics.merge_sigmoid(np.array([[[1.2, 0.0]]]))

    def test_threshold_config_validated(self):
        with pytest.raises(ConfigError):
            metrics.MergeConfig(fg_threshold=0.0)

    def test_tiny_threshold_equals_pure_argmax(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(0.01, 1.0, size=(5, 5, 3))
        merged = metrics.merge_sigmoid(scores, metrics.MergeConfig(fg_threshold=1e-9))
        assert np.array_equal(merged, scores.argmax(axis=-1) + 1)


class TestConfusionMatrix:
    def test_perfect_predictor_diagonal(self):
        rng = np.random.default_rng(2)
        truth = rng.integers(0, 4, size=(8, 8))
        conf = metrics.confusion_matrix(truth, truth, 3)
        assert conf.sum() == 64
        assert np.all(conf == np.diag(np.diag(conf)))
        norm, _ = metrics.normalize_rows(conf)
        for i in range(4):
            if conf[i, i]:
                assert norm[i, i] == pytest.approx(100.0)

    def test_hand_counted_example(self):
        truth = np.array([0, 1, 1, 2])
        pred = np.array([0, 1, 2, 2])
        conf = metrics.confusion_matrix(pred, truth, 2)
        assert list(conf[1]) == [0, 1, 1]
        norm, _ = metrics.normalize_rows(conf)
        assert list(norm[1]) == [0.0, 50.0, 50.0]

    def test_swap_transposes(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 3, size=100)
        b = rng.integers(0, 3, size=100)
        assert np.array_equal(metrics.confusion_matrix(a, b, 2),
                              metrics.confusion_matrix(b, a, 2).T)

    def test_additive_over_shards(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 4, size=200)
        truth = rng.integers(0, 4, size=200)
        whole = metrics.confusion_matrix(pred, truth, 3)
        parts = (metrics.confusion_matrix(pred[:77], truth[:77], 3)
                 + metrics.confusion_matrix(pred[77:], truth[77:], 3))
        assert np.array_equal(whole, parts)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="shape"):
            metrics.confusion_matrix(np.zeros(3, int), np.zeros(4, int), 1)


class TestF1Scores:
    def test_perfect_scores(self):
        conf = np.diag([10, 5, 3, 2])
        per_class, micro, macro, micro_bg, zero = metrics.f1_scores(conf, 3)
        assert per_class == [1.0, 1.0, 1.0]
        assert micro == macro == micro_bg == 1.0
        assert zero == []

    def test_minority_collapse_drags_macro(self):
        # predicts only background and class 1
        conf = np.array([
            [90, 5, 0],
            [2, 8, 0],
            [4, 1, 0],
        ])
        per_class, micro, macro, _, zero = metrics.f1_scores(conf, 2)
        assert per_class[1] == 0.0
        assert macro == pytest.approx(per_class[0] / 2)
        assert zero == []  # class 2 has truth support, so it is not flagged

    def test_two_class_toy_counts(self):
        # TP1=3 FP1=1 FN1=1; TP2=1 FP2=3 FN2=3
        conf = np.zeros((3, 3), dtype=int)
        conf[1, 1] = 3
        conf[1, 2] = 1   # part of FN1, also FP2
        conf[2, 2] = 1
        conf[2, 1] = 1   # part of FN2, also FP1
        conf[2, 0] = 2   # remaining FN2
        conf[0, 2] = 2   # remaining FP2
        per_class, micro, macro, _, _ = metrics.f1_scores(conf, 2)
        assert per_class[0] == pytest.approx(0.75)
        assert per_class[1] == pytest.approx(0.25)
        assert macro == pytest.approx(0.50)
        assert micro == pytest.approx(2 * 4 / (2 * 4 + 4 + 4))

    def test_macro_invariant_under_relabeling(self):
        rng = np.random.default_rng(5)
        pred = rng.integers(0, 4, size=500)
        truth = rng.integers(0, 4, size=500)
        report = metrics.evaluate_labels(pred, truth, 3)
        perm = np.array([0, 3, 1, 2])  # permutes foreground classes only
        report_p = metrics.evaluate_labels(perm[pred], perm[truth], 3)
        assert report_p.macro_f1 == pytest.approx(report.macro_f1)
        assert report_p.micro_f1 == pytest.approx(report.micro_f1)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            num_classes = int(rng.integers(1, 5))
            size = int(rng.integers(4, 40))
            pred = rng.integers(0, num_classes + 1, size=size)
            truth = rng.integers(0, num_classes + 1, size=size)
            conf = metrics.confusion_matrix(pred, truth, num_classes)
            per_class, micro, macro, _, _ = metrics.f1_scores(conf, num_classes)
            o_per, o_micro, o_macro = _oracle_f1(pred, truth, num_classes)
            assert per_class == pytest.approx(o_per, abs=1e-12)
            assert micro == pytest.approx(o_micro, abs=1e-12)
            assert macro == pytest.approx(o_macro, abs=1e-9)
            assert macro == pytest.approx(np.mean(per_class), abs=1e-9)


class TestFormatting:
    def test_confusion_table_rows_are_percentages(self):
        conf = np.array([[2, 2], [0, 0]])
        text = metrics.format_confusion_table(conf)
        assert "50.0" in text
        assert "(no pixels)" in text

    def test_report_csv(self):
        report = metrics.evaluate_labels(np.array([0, 1, 2]), np.array([0, 1, 2]), 2)
        csv = metrics.report_to_csv(report)
        assert csv.startswith("metric,class,value")
        assert "macro_f1,,1.000000" in csv
