"""Offline fitting of the linear ERD model from fully known label images."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .nn import ConfigurationError
from .reconstruction import DEFAULT_K, LabelField, MeasurementSet
from .slads import FEATURE_VERSION, N_FEATURES, _window_counts, compute_features

log = logging.getLogger(__name__)

DEFAULT_COVERAGE = (0.05, 0.10, 0.20, 0.40, 0.80)
CORPUS_MAGIC = b"EDSRDC01"


@dataclass
class TrainingCorpus:
    features: np.ndarray
    rd: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, N_FEATURES)
        self.rd = np.asarray(self.rd, dtype=np.float64).ravel()
        if len(self.features) != len(self.rd):
            raise ConfigurationError("features and rd lengths differ")

    def __len__(self):
        return len(self.rd)

    def extend(self, other):
        meta = dict(self.meta)
        meta["sources"] = self.meta.get("sources", []) + other.meta.get("sources", [])
        return TrainingCorpus(
            np.vstack([self.features, other.features]), np.concatenate([self.rd, other.rd]), meta
        )

    def save(self, path):
        """Header (JSON) then little-endian float64 rows of ``t`` features + rd."""
        header = dict(self.meta, n_rows=len(self), n_features=N_FEATURES,
                      feature_version=FEATURE_VERSION)
        raw = json.dumps(header, sort_keys=True).encode()
        table = np.column_stack([self.features, self.rd]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(CORPUS_MAGIC + struct.pack("<Q", len(raw)) + raw)
            fh.write(table.tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:8] != CORPUS_MAGIC:
            raise ConfigurationError(f"{path}: not a training corpus")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + hlen])
        if header["feature_version"] != FEATURE_VERSION:
            raise ConfigurationError(f"{path}: feature version {header['feature_version']}")
        table = np.frombuffer(data, dtype="<f8", offset=16 + hlen).reshape(
            header["n_rows"], header["n_features"] + 1
        )
        meta = {k: v for k, v in header.items() if k not in ("n_rows", "n_features", "feature_version")}
        return cls(table[:, :-1].copy(), table[:, -1].copy(), meta)


def reduction_in_distortion(lf, truth_flat, r, c):
    """Exact drop in mismatched pixels if (r, c) were measured with its true label.

    Only pixels whose neighbour list admits the new measurement can change, so
    the difference is taken over those pixels plus (r, c) itself.
    """
    s = r * lf.N + c
    label = int(truth_flat[s])
    pix, new_labels, _, _ = lf.peek_add(r, c, label)
    before = np.count_nonzero(lf.recon[pix] != truth_flat[pix]) + (lf.recon[s] != label)
    after = np.count_nonzero(new_labels != truth_flat[pix])
    return int(before - after)


def generate_pairs(truth, coverage_levels=DEFAULT_COVERAGE, samples_per_level=200, seed=0,
                   n_neighbors=DEFAULT_K, density_radius=4, source=None):
    """(feature, RD) pairs from random masks at each coverage level."""
    truth = np.asarray(truth, dtype=np.int64)
    N = truth.shape[0]
    flat = truth.ravel()
    if len(np.unique(flat)) < 2:
        log.warning("training image has a single label; every RD will be zero")
    if any(not 0 < c < 1 for c in coverage_levels):
        raise ConfigurationError("coverage levels must lie in (0, 1)")
    n_labels = int(flat.max())
    seed = [int(v) for v in np.atleast_1d(seed)]
    rng = np.random.default_rng([*seed, 0x7EA1])
    feats, rds = [], []
    for level in coverage_levels:
        m = max(1, int(round(level * N * N)))
        chosen = rng.choice(N * N, size=m, replace=False)
        rows, cols = np.divmod(chosen, N)
        lf = LabelField.from_measurements(N, MeasurementSet(rows, cols, flat[chosen]),
                                          n_neighbors, n_labels)
        mask = lf.measured_mask
        counts = _window_counts(mask, density_radius)
        area = _window_counts(np.ones_like(mask), density_radius)
        free = np.flatnonzero(lf.order < 0)
        pick = rng.choice(free, size=min(samples_per_level, len(free)), replace=False)
        feats.append(compute_features(lf, pick, counts, area))
        rds.append([reduction_in_distortion(lf, flat, int(p // N), int(p % N)) for p in pick])
    meta = {
        "sources": [source if source is not None else {"seed": seed}],
        "coverage_levels": list(coverage_levels),
        "samples_per_level": samples_per_level,
        "n_neighbors": n_neighbors,
        "density_radius": density_radius,
    }
    return TrainingCorpus(np.vstack(feats), np.concatenate([np.asarray(r, float) for r in rds]), meta)


def fit_theta(corpus, ridge_lambda=1e-6):
    """Ridge least squares ``argmin sum (rd - theta.v)^2 + lambda ||theta||^2``."""
    V, y = corpus.features, corpus.rd
    if len(V) < V.shape[1]:
        raise ConfigurationError(f"need at least {V.shape[1]} pairs, got {len(V)}")
    A = V.T @ V + ridge_lambda * np.eye(V.shape[1])
    if ridge_lambda == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations; use ridge_lambda > 0")
    return np.linalg.solve(A, V.T @ y)


class ERDRegressor(RegressorMixin, BaseEstimator):
    """Linear ERD model ``theta . v`` fitted by ridge-regularised normal equations."""

    def __init__(self, ridge_lambda=1e-6):
        self.ridge_lambda = ridge_lambda

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        self.coef_ = fit_theta(TrainingCorpus(X, y), self.ridge_lambda)
        self.n_features_in_ = X.shape[1]
        self.feature_version_ = FEATURE_VERSION
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return np.asarray(X, dtype=np.float64) @ self.coef_

    def save(self, path, meta=None):
        check_is_fitted(self, "coef_")
        doc = {
            "model": "erd-linear",
            "feature_version": self.feature_version_,
            "ridge_lambda": self.ridge_lambda,
            "theta": [float(v) for v in self.coef_],
            "meta": meta or {},
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        if doc.get("model") != "erd-linear":
            raise ConfigurationError(f"{path} is not an ERD model")
        model = cls(doc["ridge_lambda"])
        model.coef_ = np.asarray(doc["theta"], dtype=np.float64)
        model.n_features_in_ = len(model.coef_)
        model.feature_version_ = doc["feature_version"]
        model.meta_ = doc.get("meta", {})
        return model


def train_erd_model(truth_images, coverage_levels=DEFAULT_COVERAGE, samples_per_level=200,
                    seed=0, ridge_lambda=1e-6, n_neighbors=DEFAULT_K, density_radius=4,
                    sources=None):
    """Corpus over several training images, then a fitted :class:`ERDRegressor`."""
    corpus = None
    for i, img in enumerate(truth_images):
        src = sources[i] if sources else {"image": i, "seed": [int(seed), i]}
        part = generate_pairs(img, coverage_levels, samples_per_level, [int(seed), i],
                              n_neighbors, density_radius, source=src)
        corpus = part if corpus is None else corpus.extend(part)
    model = ERDRegressor(ridge_lambda).fit(corpus.features, corpus.rd)
    return model, corpus
