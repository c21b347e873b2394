"""sklearn-style estimator facade over the frame classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .codec import SparseTargets
from .features import FeatureMatrix
from .net import NetParams, TrainConfig, forward, init_params, train

__all__ = ["FrameClassifier"]


class FrameClassifier(BaseEstimator):
    """Frame-level classifier with hard-label or sparse soft-target training.

    X is a list of utterances (:class:`FeatureMatrix` or (n_frames, n_dims)
    arrays). y is a list of per-frame label arrays when ``loss='hard'`` or a
    list of :class:`SparseTargets` when ``loss='soft'``. Follows the sklearn
    parameter protocol, so ``get_params`` / ``set_params`` / ``clone`` work.
    """

    def __init__(self, hidden_dims=(48,), context=2, recurrent=False, label_delay=3,
                 n_classes=None, learning_rate=0.2, momentum=0.9, epochs=4,
                 batch_size=8, loss="hard", temperature=1.0, seed=0):
        self.hidden_dims = hidden_dims
        self.context = context
        self.recurrent = recurrent
        self.label_delay = label_delay
        self.n_classes = n_classes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.temperature = temperature
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            momentum=self.momentum,
            batch_size=self.batch_size,
            seed=self.seed,
            loss=self.loss,
            temperature=self.temperature,
        )

    def _infer_classes(self, y) -> int:
        if self.n_classes is not None:
            return self.n_classes
        if self.loss == "hard":
            return int(max(int(np.max(labels)) for labels in y if len(labels))) + 1
        return int(max(int(t.indices.max()) for t in y if len(t))) + 1

    def fit(self, X, y, init: NetParams | None = None):
        """Train from scratch or, given ``init``, from an existing network."""
        if len(X) != len(y):
            raise ValueError("X and y must pair one target sequence per utterance")
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        feats = [x.frames if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64) for x in X]
        feat_dim = feats[0].shape[1]
        if self.loss == "soft" and not all(isinstance(t, SparseTargets) for t in y):
            raise ValueError("soft loss requires SparseTargets targets")
        n_classes = self._infer_classes(y)
        if init is not None:
            if init.output_dim != n_classes:
                raise ValueError(
                    f"init network has {init.output_dim} outputs, need {n_classes}"
                )
            net = init.copy()
        else:
            stacked = np.vstack([f for f in feats if f.shape[0]])
            net = init_params(
                feat_dim,
                list(self.hidden_dims),
                n_classes,
                context=self.context,
                recurrent=self.recurrent,
                label_delay=self.label_delay,
                seed=self.seed,
                input_shift=stacked.mean(axis=0),
                input_scale=np.maximum(stacked.std(axis=0), 1e-3),
            )
        net, trace = train(net, list(zip(feats, y)), self._train_config())
        self.net_ = net
        self.loss_trace_ = trace
        self.n_classes_ = n_classes
        self.feat_dim_ = feat_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("this FrameClassifier instance is not fitted yet")

    def predict_logits(self, X) -> list[np.ndarray]:
        self._check_fitted()
        return [forward(self.net_, x) for x in X]

    def predict(self, X) -> list[np.ndarray]:
        """Per-frame class predictions aligned to the (delayed) labels.

        Each returned array has n_frames - label_delay entries; entry i is
        the prediction for frame label i.
        """
        self._check_fitted()
        delay = self.net_.label_delay
        return [np.argmax(forward(self.net_, x)[delay:], axis=1) for x in X]

    def score(self, X, y) -> float:
        """Mean frame accuracy over all scorable frames."""
        self._check_fitted()
        correct = 0
        total = 0
        for pred, labels in zip(self.predict(X), y):
            labels = np.asarray(labels)[: pred.shape[0]]
            correct += int(np.sum(pred == labels))
            total += pred.shape[0]
        if total == 0:
            raise ValueError("no scorable frames")
        return correct / total
