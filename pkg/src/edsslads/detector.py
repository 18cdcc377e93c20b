"""Ill-spectrum detection by neural-network regression onto a fixed line.

A dense network is trained to map every valid spectrum onto the same target
ramp. Spectra unlike the training phases land off the ramp with an uneven
residual, which the variance of the absolute residual picks up.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .phantom import DEFAULT_NOISE_SCALE

log = logging.getLogger(__name__)


def normalize_counts(X, scale):
    """Scale each spectrum to unit total count, times ``scale``."""
    X = np.asarray(X, dtype=np.float64)
    total = X.sum(axis=-1, keepdims=True)
    return X * (scale / np.maximum(total, 1e-12))


def fit_input_scale(X):
    """Gain applied after unit-total scaling so the mean L2 norm is sqrt(p)."""
    unit = normalize_counts(X, 1.0)
    return float(np.sqrt(X.shape[1]) / np.mean(np.linalg.norm(unit, axis=1)))


def ramp_target(Q):
    return np.arange(Q) / (Q - 1)


def residual_variance(target, output):
    """Population variance of ``|target - output|`` along the last axis."""
    g = np.abs(np.asarray(target) - np.asarray(output))
    mu = g.mean(axis=-1, keepdims=True)
    return np.mean((g - mu) ** 2, axis=-1)


@dataclass(frozen=True)
class DetectionResult:
    variance: float
    is_ill: bool


def _train_loop(net, X, y, loss, rng, *, n_iter, batch_size, learning_rate, momentum,
                noise_scale, noise_augment, input_scale, log_every=50):
    """Shared minibatch loop; returns the per-chunk mean training loss."""
    opt = nn.SGD(learning_rate, momentum)
    trace, chunk = [], []
    for it in range(n_iter):
        idx = rng.integers(0, len(X), size=min(batch_size, len(X)) if batch_size else len(X))
        xb = X[idx]
        if noise_augment:
            xb = rng.poisson(xb * noise_scale) / noise_scale
        try:
            chunk.append(opt.step(net, normalize_counts(xb, input_scale), y[idx], loss))
        except nn.TrainingError as exc:
            raise nn.TrainingError(str(exc), trace + chunk) from None
        if len(chunk) == log_every or it == n_iter - 1:
            trace.append(float(np.mean(chunk)))
            chunk = []
    return trace


class NNRDetector(BaseEstimator):
    """Flags ill spectra by the residual variance of a ramp regressor.

    Parameters
    ----------
    hidden_layers, hidden_width : int
        Depth and width of the dense ReLU stack.
    output_width : int
        Length ``Q`` of the target ramp.
    noise_augment : bool
        Treat training spectra as clean and redraw Poisson noise for every batch.
    tol : float or None
        Maximum acceptable held-out regression loss; exceeding it raises
        :class:`~edsslads.nn.TrainingError`.
    """

    def __init__(self, hidden_layers=5, hidden_width=100, output_width=100,
                 learning_rate=3e-4, momentum=0.9, n_iter=2000, batch_size=32,
                 noise_scale=DEFAULT_NOISE_SCALE, noise_augment=True, tol=None, seed=0):
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.output_width = output_width
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.noise_scale = noise_scale
        self.noise_augment = noise_augment
        self.tol = tol
        self.seed = seed

    def _build(self, p):
        specs = []
        for _ in range(self.hidden_layers):
            specs += [nn.dense(self.hidden_width), nn.relu()]
        specs.append(nn.dense(self.output_width))
        return nn.Network(specs, (p,), seed=self.seed)

    def fit(self, X, y=None, X_val=None):
        X = check_array(X, dtype=np.float64)
        if self.output_width < 2:
            raise nn.ConfigurationError("output_width must be >= 2")
        rng = np.random.default_rng([self.seed, 1])
        self.n_features_in_ = X.shape[1]
        self.input_scale_ = fit_input_scale(X)
        self.target_ = ramp_target(self.output_width)
        self.net_ = self._build(X.shape[1])
        Y = np.broadcast_to(self.target_, (len(X), self.output_width))
        self.loss_curve_ = _train_loop(
            self.net_, X, Y, "mse", rng, n_iter=self.n_iter, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum,
            noise_scale=self.noise_scale, noise_augment=self.noise_augment,
            input_scale=self.input_scale_,
        )
        self.threshold_ = np.inf
        if X_val is not None:
            self.validation_loss_ = self.regression_loss(X_val)
            if self.tol is not None and self.validation_loss_ > self.tol:
                raise nn.TrainingError(
                    f"held-out loss {self.validation_loss_:.4g} above tol {self.tol}",
                    self.loss_curve_,
                )
        return self

    def _outputs(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features_in_:
            raise nn.ConfigurationError(
                f"spectrum length {X.shape[-1]} != model length {self.n_features_in_}"
            )
        return self.net_.forward(normalize_counts(X, self.input_scale_))

    def regression_loss(self, X):
        """Mean of ``0.5 * ||f - f_hat(z)||^2`` over ``X``."""
        out = self._outputs(np.atleast_2d(X))
        return float(np.mean(0.5 * np.sum((out - self.target_) ** 2, axis=1)))

    def decision_function(self, X):
        """Residual variance for each spectrum (a scalar for a single one)."""
        X = np.asarray(X, dtype=np.float64)
        return residual_variance(self.target_, self._outputs(X))

    def calibrate(self, valid, ill, valid_quantile=0.99, ill_quantile=0.01):
        """Place the threshold midway (log scale) between the valid-spectrum
        upper quantile and the ill-spectrum lower quantile."""
        sv = self.decision_function(np.atleast_2d(valid))
        si = self.decision_function(np.atleast_2d(ill))
        hi_valid = np.quantile(sv, valid_quantile)
        lo_ill = np.quantile(si, ill_quantile)
        if hi_valid >= lo_ill:
            log.warning("valid and ill variance quantiles overlap (%.3g >= %.3g)", hi_valid, lo_ill)
        floor = np.finfo(float).tiny
        self.threshold_ = float(np.exp(0.5 * (np.log(max(hi_valid, floor)) + np.log(max(lo_ill, floor)))))
        return self

    def predict(self, X):
        """True where the spectrum is ill (variance strictly above threshold)."""
        return self.decision_function(X) > self.threshold_

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {
            "model": "nnr-detector",
            "params": self.get_params(),
            "threshold": self.threshold_,
            "input_scale": self.input_scale_,
            "n_features_in": self.n_features_in_,
        }
        nn.save_checkpoint(path, self.net_, meta, {"target": self.target_})

    @classmethod
    def load(cls, path):
        net, meta, arrays = nn.load_checkpoint(path)
        if meta.get("model") != "nnr-detector":
            raise nn.ConfigurationError(f"{path} is not a detector checkpoint")
        det = cls(**meta["params"])
        det.net_ = net
        det.threshold_ = meta["threshold"]
        det.input_scale_ = meta["input_scale"]
        det.n_features_in_ = meta["n_features_in"]
        det.target_ = arrays["target"]
        return det


def variance_metric(model, z):
    return float(model.decision_function(z))


def detect(model, z):
    s2 = variance_metric(model, z)
    return DetectionResult(s2, s2 > model.threshold_)
