import numpy as np
import pytest

from noisedistill.metrics import EvalReport, decode_tokens, evaluate, frame_accuracy, token_error_rate, werr
from noisedistill.net import Layer, NetParams

from oracles import exhaustive_edit_distance


class TestDecodeTokens:
    def test_collapse_rule(self):
        logits = np.zeros((6, 8))
        for t, cls in enumerate([2, 2, 2, 5, 5, 2]):
            logits[t, cls] = 1.0
        np.testing.assert_array_equal(decode_tokens(logits), [2, 5, 2])

    def test_empty(self):
        assert decode_tokens(np.zeros((0, 4))).shape == (0,)

    def test_tie_prefers_lower_index(self):
        logits = np.ones((3, 4))
        np.testing.assert_array_equal(decode_tokens(logits), [0])

    def test_matches_two_pass_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            logits = rng.standard_normal((int(rng.integers(1, 40)), 6))
            # Reference: explicit argmax list, then run-length collapse.
            arg = [int(np.argmax(row)) for row in logits]
            collapsed = [arg[0]]
            for a in arg[1:]:
                if a != collapsed[-1]:
                    collapsed.append(a)
            np.testing.assert_array_equal(decode_tokens(logits), collapsed)


class TestTokenErrorRate:
    def test_identical_sequences(self):
        ter, s, d, i = token_error_rate([1, 2, 3], [1, 2, 3])
        assert (ter, s, d, i) == (0.0, 0, 0, 0)

    def test_single_insertion(self):
        ter, s, d, i = token_error_rate([7, 8, 7], [7, 7])
        assert ter == pytest.approx(0.5)
        assert (s, d, i) == (0, 0, 1)

    def test_counts_sum_to_distance(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            ref = list(rng.integers(0, 3, rng.integers(1, 9)))
            hyp = list(rng.integers(0, 3, rng.integers(0, 9)))
            ter, s, d, i = token_error_rate(hyp, ref)
            dist = exhaustive_edit_distance(hyp, ref)
            assert s + d + i == dist
            assert ter == pytest.approx(dist / len(ref))

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            token_error_rate([1], [])

    def test_deletion_only(self):
        ter, s, d, i = token_error_rate([], [4, 4, 4])
        assert (s, d, i) == (0, 3, 0)
        assert ter == pytest.approx(1.0)


class TestFrameAccuracy:
    def test_with_delay(self):
        logits = np.zeros((5, 3))
        logits[[1, 2, 3, 4], [0, 1, 2, 0]] = 5.0
        labels = np.array([0, 1, 2, 0, 1])
        assert frame_accuracy(logits, labels, label_delay=1) == 1.0

    def test_no_scorable_frames(self):
        with pytest.raises(ValueError):
            frame_accuracy(np.zeros((2, 3)), np.zeros(2, dtype=int), label_delay=2)


class TestEvaluate:
    def test_perfect_identity_model(self):
        # Identity net: logits equal features, so argmax(features) drives it.
        net = NetParams([Layer(np.eye(3), np.zeros(3), "identity")])
        dataset = []
        rng = np.random.default_rng(2)
        for _ in range(4):
            labels = rng.integers(0, 3, 10)
            feats = np.full((10, 3), -1.0)
            feats[np.arange(10), labels] = 1.0
            tokens = [labels[0]]
            for l in labels[1:]:
                if l != tokens[-1]:
                    tokens.append(l)
            dataset.append((feats, labels, np.asarray(tokens)))
        report = evaluate(net, dataset)
        assert report.frame_accuracy == 1.0
        assert report.token_error_rate == 0.0
        assert all(c == (0, 0, 0) for c in report.per_utterance)

    def test_report_validation(self):
        with pytest.raises(ValueError):
            EvalReport(1.5, 0.0, ())
        with pytest.raises(ValueError):
            EvalReport(0.5, -0.1, ())


class TestWerr:
    def test_ten_percent_improvement(self):
        assert werr(0.10, 0.09) == pytest.approx(-10.0)

    def test_same_system_is_zero(self):
        assert werr(0.37, 0.37) == 0.0

    def test_monotone_in_system_rate(self):
        values = [werr(0.2, x) for x in (0.1, 0.15, 0.2, 0.3)]
        assert values == sorted(values)

    def test_zero_baseline_rejected(self):
        with pytest.raises(ValueError):
            werr(0.0, 0.1)
