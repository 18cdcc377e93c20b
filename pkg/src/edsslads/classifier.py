"""Phase classification of spectra with a small 1D CNN, and the two-tier
detector + classifier system that maps a spectrum to a label in ``0..L``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .detector import _train_loop, fit_input_scale, normalize_counts
from .phantom import DEFAULT_NOISE_SCALE


def build_cnn(p, n_classes, kernel_size=10, stride=2, conv_features=(8, 16),
              dense_widths=(100, 32, 8), seed=0):
    """conv -> pool -> conv -> pool -> flatten -> dense stack -> softmax."""
    u1, u2 = conv_features
    if u2 % u1:
        raise nn.ConfigurationError(f"second conv width {u2} must be a multiple of {u1}")
    specs = []
    for u in conv_features:
        specs += [nn.conv1d(u, kernel_size, stride), nn.relu(), nn.maxpool1d(kernel_size, stride)]
    specs.append(nn.flatten())
    for w in dense_widths:
        specs += [nn.dense(w), nn.relu()]
    specs += [nn.dense(n_classes), nn.softmax_layer()]
    return nn.Network(specs, (p,), seed=seed)


def flat_width(net):
    return next(s.out_features for s in net.specs if s.kind == "flatten")


@dataclass(frozen=True)
class ClassScores:
    probs: np.ndarray
    label: int


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """1D CNN spectrum classifier; labels are the phase numbers ``1..L``."""

    def __init__(self, kernel_size=10, stride=2, conv_features=(8, 16),
                 dense_widths=(100, 32, 8), learning_rate=0.003, momentum=0.9,
                 n_iter=300, batch_size=32, noise_scale=DEFAULT_NOISE_SCALE,
                 noise_augment=True, tol=None, seed=0):
        self.kernel_size = kernel_size
        self.stride = stride
        self.conv_features = conv_features
        self.dense_widths = dense_widths
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.noise_scale = noise_scale
        self.noise_augment = noise_augment
        self.tol = tol
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        if self.classes_[0] < 1 or not np.array_equal(self.classes_, np.arange(1, len(self.classes_) + 1)):
            raise nn.ConfigurationError("labels must be 1..L with every phase present")
        if np.bincount(y)[1:].min() < 2:
            raise nn.ConfigurationError("need at least 2 spectra per phase")
        rng = np.random.default_rng([self.seed, 2])
        self.n_features_in_ = X.shape[1]
        self.input_scale_ = fit_input_scale(X)
        self.net_ = build_cnn(X.shape[1], len(self.classes_), self.kernel_size, self.stride,
                              tuple(self.conv_features), tuple(self.dense_widths), self.seed)
        self.loss_curve_ = _train_loop(
            self.net_, X, y - 1, "cross_entropy", rng, n_iter=self.n_iter,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, noise_scale=self.noise_scale,
            noise_augment=self.noise_augment, input_scale=self.input_scale_, log_every=20,
        )
        if X_val is not None and self.tol is not None:
            err = 1 - self.score(X_val, y_val)
            if err > self.tol:
                raise nn.TrainingError(f"held-out error {err:.4g} above tol {self.tol}",
                                       self.loss_curve_)
        return self

    def _check_input(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise nn.ConfigurationError(
                f"spectrum length {X.shape[-1]} != model length {self.n_features_in_}"
            )
        return X

    def predict_proba(self, X, batch=512):
        X = self._check_input(X)
        if X.ndim == 1:
            return self.net_.forward(normalize_counts(X, self.input_scale_))
        out = [self.net_.forward(normalize_counts(X[i : i + batch], self.input_scale_))
               for i in range(0, len(X), batch)]
        return np.concatenate(out) if out else np.zeros((0, len(self.classes_)))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=-1)]

    def save(self, path):
        check_is_fitted(self, "net_")
        params = self.get_params()
        params["conv_features"] = list(params["conv_features"])
        params["dense_widths"] = list(params["dense_widths"])
        meta = {
            "model": "cnn-classifier",
            "params": params,
            "classes": self.classes_.tolist(),
            "input_scale": self.input_scale_,
            "n_features_in": self.n_features_in_,
        }
        nn.save_checkpoint(path, self.net_, meta)

    @classmethod
    def load(cls, path):
        net, meta, _ = nn.load_checkpoint(path)
        if meta.get("model") != "cnn-classifier":
            raise nn.ConfigurationError(f"{path} is not a classifier checkpoint")
        params = dict(meta["params"])
        params["conv_features"] = tuple(params["conv_features"])
        params["dense_widths"] = tuple(params["dense_widths"])
        clf = cls(**params)
        clf.net_ = net
        clf.classes_ = np.asarray(meta["classes"], dtype=np.int64)
        clf.input_scale_ = meta["input_scale"]
        clf.n_features_in_ = meta["n_features_in"]
        return clf


def classify(model, z):
    probs = model.predict_proba(np.asarray(z, dtype=np.float64))
    return ClassScores(probs, int(model.classes_[np.argmax(probs)]))


class TwoTierClassifier(ClassifierMixin, BaseEstimator):
    """Detector first, then CNN: label 0 for ill spectra, else the phase."""

    def __init__(self, detector=None, classifier=None):
        self.detector = detector
        self.classifier = classifier

    def fit(self, X, y, X_val=None, y_val=None, ill_val=None):
        """Fit both tiers; ``X_val``/``ill_val`` calibrate the detector threshold."""
        from sklearn.base import clone

        self.detector_ = clone(self.detector).fit(X, X_val=X_val)
        if X_val is not None and ill_val is not None:
            self.detector_.calibrate(X_val, ill_val)
        self.classifier_ = clone(self.classifier).fit(X, y)
        self.classes_ = np.concatenate([[0], self.classifier_.classes_])
        return self

    @classmethod
    def from_fitted(cls, detector, classifier):
        if detector.n_features_in_ != classifier.n_features_in_:
            raise nn.ConfigurationError("detector and classifier spectrum lengths differ")
        obj = cls(detector, classifier)
        obj.detector_, obj.classifier_ = detector, classifier
        obj.classes_ = np.concatenate([[0], classifier.classes_])
        return obj

    def predict_details(self, X):
        """Labels, residual variances and max class probabilities (NaN when ill)."""
        check_is_fitted(self, "detector_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        s2 = self.detector_.decision_function(X)
        ill = s2 > self.detector_.threshold_
        labels = np.zeros(len(X), dtype=np.int64)
        maxprob = np.full(len(X), np.nan)
        ok = ~ill
        if ok.any():
            probs = self.classifier_.predict_proba(X[ok])
            labels[ok] = self.classifier_.classes_[np.argmax(probs, axis=1)]
            maxprob[ok] = probs.max(axis=1)
        return labels, s2, maxprob

    def predict(self, X):
        return self.predict_details(X)[0]


def classify_spectrum_full(detector, classifier, z):
    """Two-step label for one spectrum: 0 if the detector fires, else the CNN phase."""
    from .detector import detect

    if detect(detector, z).is_ill:
        return 0
    return classify(classifier, z).label
