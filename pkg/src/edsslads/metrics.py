"""Scalar quality measures for reconstructions and classifiers."""
from __future__ import annotations

import numpy as np

from .reconstruction import InputError, distortion


def total_distortion(truth, recon):
    """Fraction of pixels whose reconstructed label differs from the truth."""
    truth = np.asarray(truth)
    return distortion(truth, recon) / truth.size


def distortion_image(truth, recon):
    """Pixelwise 0/1 indicator of disagreement."""
    truth, recon = np.asarray(truth), np.asarray(recon)
    if truth.shape != recon.shape:
        raise InputError(f"shape mismatch {truth.shape} vs {recon.shape}")
    return (truth != recon).astype(np.int64)


def misclassification_rate(predicted, actual):
    """Fraction of measured pixels whose assigned label is wrong."""
    predicted, actual = np.asarray(predicted).ravel(), np.asarray(actual).ravel()
    if predicted.size == 0:
        raise InputError("no measured pixels")
    if predicted.shape != actual.shape:
        raise InputError("label arrays differ in length")
    return float(np.count_nonzero(predicted != actual)) / predicted.size
