import numpy as np
import pytest
from sklearn.base import clone

from noisedistill.codec import SparseTargets, sparse_from_logits
from noisedistill.estimator import FrameClassifier
from noisedistill.net import flatten_params


def separable_dataset(rng, n_utts=6, n_frames=20, dim=8, n_classes=4):
    X, y = [], []
    for _ in range(n_utts):
        labels = rng.integers(0, n_classes, n_frames)
        feats = rng.standard_normal((n_frames, dim)) * 0.2
        feats[np.arange(n_frames), labels] += 3.0
        X.append(feats)
        y.append(labels)
    return X, y


class TestSklearnProtocol:
    def test_get_set_params_and_clone(self):
        clf = FrameClassifier(hidden_dims=(16,), epochs=2, temperature=3.0)
        params = clf.get_params()
        assert params["temperature"] == 3.0
        other = clone(clf)
        assert other.get_params() == params
        other.set_params(epochs=5)
        assert other.epochs == 5 and clf.epochs == 2

    def test_unfitted_predict_rejected(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            FrameClassifier().predict([np.zeros((4, 8))])


class TestFitHard:
    def test_learns_separable_frames(self):
        rng = np.random.default_rng(0)
        X, y = separable_dataset(rng)
        clf = FrameClassifier(hidden_dims=(16,), context=0, label_delay=0,
                              learning_rate=0.3, epochs=10, seed=1)
        clf.fit(X, y)
        assert clf.n_classes_ == 4
        assert clf.score(X, y) > 0.9
        preds = clf.predict(X)
        assert preds[0].shape == (20,)

    def test_label_delay_shortens_predictions(self):
        rng = np.random.default_rng(1)
        X, y = separable_dataset(rng)
        clf = FrameClassifier(hidden_dims=(8,), label_delay=3, epochs=1, seed=2)
        clf.fit(X, y)
        assert clf.predict(X)[0].shape == (17,)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(2)
        X, y = separable_dataset(rng)
        a = FrameClassifier(hidden_dims=(8,), epochs=2, seed=3).fit(X, y)
        b = FrameClassifier(hidden_dims=(8,), epochs=2, seed=3).fit(X, y)
        assert np.array_equal(flatten_params(a.net_), flatten_params(b.net_))

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError):
            FrameClassifier().fit([np.zeros((4, 8))], [])

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            FrameClassifier().fit([], [])


class TestFitSoft:
    def _soft_setup(self, rng):
        X, y = separable_dataset(rng)
        teacher = FrameClassifier(hidden_dims=(16,), context=0, label_delay=0,
                                  learning_rate=0.3, epochs=10, seed=4)
        teacher.fit(X, y)
        targets = [
            SparseTargets.from_frames([sparse_from_logits(row, 2) for row in logits])
            for logits in teacher.predict_logits(X)
        ]
        return X, y, teacher, targets

    def test_student_learns_from_sparse_targets(self):
        rng = np.random.default_rng(3)
        X, y, teacher, targets = self._soft_setup(rng)
        student = FrameClassifier(hidden_dims=(16,), context=0, label_delay=0,
                                  n_classes=4, learning_rate=0.3, epochs=8,
                                  loss="soft", temperature=1.0, seed=5)
        student.fit(X, targets)
        assert student.score(X, y) > 0.85

    def test_init_warm_start(self):
        rng = np.random.default_rng(4)
        X, y, teacher, targets = self._soft_setup(rng)
        student = FrameClassifier(hidden_dims=(16,), context=0, label_delay=0,
                                  n_classes=4, learning_rate=0.0, epochs=1,
                                  loss="soft", temperature=2.0, seed=6)
        student.fit(X, targets, init=teacher.net_)
        # Zero learning rate: the student must still be exactly the teacher.
        assert np.array_equal(flatten_params(student.net_), flatten_params(teacher.net_))

    def test_soft_requires_sparse_targets(self):
        rng = np.random.default_rng(5)
        X, y = separable_dataset(rng)
        clf = FrameClassifier(loss="soft", n_classes=4)
        with pytest.raises(ValueError, match="SparseTargets"):
            clf.fit(X, y)

    def test_init_class_count_checked(self):
        rng = np.random.default_rng(6)
        X, y, teacher, targets = self._soft_setup(rng)
        student = FrameClassifier(n_classes=9, loss="soft")
        with pytest.raises(ValueError, match="outputs"):
            student.fit(X, targets, init=teacher.net_)
