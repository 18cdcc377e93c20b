"""Lightweight stand-ins for a simulated object and a fitted two-tier classifier.

The object returns its true label as a one-bin spectrum and the tier reads it
back, so sampling-loop tests are not coupled to network training.
"""
from types import SimpleNamespace

import numpy as np


class LabelObject:
    def __init__(self, truth, seed=None):
        self.truth = np.asarray(truth, dtype=np.int64)
        self.N = self.truth.shape[0]
        self.p = 1
        self.seed = seed
        self.n_labels = int(self.truth.max())

    def spectrum(self, r, c):
        return np.array([float(self.truth[r, c])])


class OracleTier:
    def __init__(self, n_labels):
        self.classes_ = np.arange(1, n_labels + 1)
        self.detector_ = SimpleNamespace(n_features_in_=1)

    def predict_details(self, X):
        X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        labels = X[:, 0].astype(np.int64)
        s2 = np.where(labels == 0, 1.0, 0.0)
        maxprob = np.where(labels == 0, np.nan, 1.0)
        return labels, s2, maxprob


def half_plane(N, split=None):
    split = N // 2 if split is None else split
    return np.where(np.arange(N)[None, :] < split, 1, 2).repeat(N, axis=0)


def disc(N, radius_frac=0.3):
    rr, cc = np.mgrid[:N, :N]
    return np.where((rr - N / 2) ** 2 + (cc - N / 2) ** 2 < (radius_frac * N) ** 2, 2, 1)
