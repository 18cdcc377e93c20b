"""Dynamic sampling loop: features, linear ERD estimates and greedy selection."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .nn import ConfigurationError
from .reconstruction import DEFAULT_K, InputError, LabelField, MeasurementSet

log = logging.getLogger(__name__)

FEATURE_VERSION = "knn-label-v1"
FEATURE_NAMES = (
    "inv_nearest_distance",
    "local_density",
    "neighbour_disagreement",
    "neighbour_entropy",
    "recon_gradient",
    "bias",
)
N_FEATURES = len(FEATURE_NAMES)
TRACE_COLUMNS = ("k", "x", "y", "label", "sigma2", "td")


class SamplingComplete(Exception):
    """No unmeasured pixels remain."""


@dataclass
class SamplingConfig:
    initial_fraction: float = 0.01
    stop_fraction: float = 0.15
    seed: int = 0
    n_neighbors: int = DEFAULT_K
    density_radius: int = 4
    snapshot_stride: int = 0

    def __post_init__(self):
        if not 0 < self.initial_fraction <= self.stop_fraction <= 1:
            raise ConfigurationError("need 0 < initial_fraction <= stop_fraction <= 1")
        if self.n_neighbors < 1 or self.density_radius < 0:
            raise ConfigurationError("n_neighbors must be >= 1 and density_radius >= 0")


# -- features ------------------------------------------------------------------


def _window_counts(mask, radius):
    """Number of True entries in the clipped (2r+1)^2 box around each pixel."""
    N = mask.shape[0]
    S = np.zeros((N + 1, N + 1), dtype=np.int64)
    S[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)
    lo = np.clip(np.arange(N) - radius, 0, N)
    hi = np.clip(np.arange(N) + radius + 1, 0, N)
    return S[hi][:, hi] - S[lo][:, hi] - S[hi][:, lo] + S[lo][:, lo]


def compute_features(lf, pix, density_counts, window_area):
    """Feature rows for the flat pixel indices ``pix`` of a :class:`LabelField`."""
    N = lf.N
    pix = np.asarray(pix, dtype=np.int64)
    n = len(pix)
    V = np.empty((n, N_FEATURES))
    idx, d2 = lf.nbr_idx[pix], lf.nbr_d2[pix]
    valid = idx >= 0
    nvalid = np.maximum(valid.sum(axis=1), 1)
    V[:, 0] = 1.0 / np.sqrt(d2[:, 0])
    V[:, 1] = density_counts.ravel()[pix] / window_area.ravel()[pix]
    labs = np.where(valid, lf.labels[np.where(valid, idx, 0)], -1)
    here = lf.recon[pix]
    V[:, 2] = np.sum(valid & (labs != here[:, None]), axis=1) / nvalid
    hist = np.zeros((n, lf.n_labels + 2))
    rows = np.arange(n)
    for j in range(idx.shape[1]):
        hist[rows, labs[:, j]] += valid[:, j]
    prob = hist[:, :-1] / nvalid[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        V[:, 3] = -np.sum(np.where(prob > 0, prob * np.log(prob), 0.0), axis=1)
    r, c = lf._pr[pix], lf._pc[pix]
    diff = np.zeros(n)
    cnt = np.zeros(n)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < N) & (cc >= 0) & (cc < N)
        q = np.where(ok, rr * N + cc, 0)
        diff += ok & (lf.recon[q] != here)
        cnt += ok
    V[:, 4] = diff / cnt
    V[:, 5] = 1.0
    return V


def extract_features(lf, s, density_radius=4):
    """Feature vector of the unmeasured pixel ``s = (row, col)``."""
    r, c = s
    p = r * lf.N + c
    if lf.order[p] >= 0:
        raise InputError(f"pixel {s} is already measured")
    mask = lf.measured_mask
    counts = _window_counts(mask, density_radius)
    area = _window_counts(np.ones_like(mask), density_radius)
    return compute_features(lf, [p], counts, area)[0]


def estimate_erd(model, v):
    """Linear ERD estimate ``theta . v`` (``model`` may be a fitted regressor or theta)."""
    theta = np.asarray(getattr(model, "coef_", model), dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != theta.shape[0]:
        raise InputError(f"feature length {v.shape[-1]} != model length {theta.shape[0]}")
    return v @ theta


def _check_version(model):
    version = getattr(model, "feature_version_", FEATURE_VERSION)
    if version != FEATURE_VERSION:
        raise ConfigurationError(f"ERD model was trained on features {version!r}")


class ERDMap:
    """Features and ERD for every unmeasured pixel, kept in step with a LabelField."""

    def __init__(self, lf, model, density_radius=4):
        _check_version(model)
        self.lf = lf
        self.theta = np.asarray(getattr(model, "coef_", model), dtype=np.float64)
        if self.theta.shape != (N_FEATURES,):
            raise ConfigurationError(f"ERD model needs {N_FEATURES} coefficients")
        self.radius = int(density_radius)
        N = lf.N
        mask = lf.measured_mask
        self.density = _window_counts(mask, self.radius)
        self.area = _window_counts(np.ones_like(mask), self.radius)
        self.erd = np.full(N * N, -np.inf)
        self.refresh(np.flatnonzero(lf.order < 0))

    def refresh(self, pix):
        pix = pix[self.lf.order[pix] < 0]
        if len(pix):
            V = compute_features(self.lf, pix, self.density, self.area)
            self.erd[pix] = V @ self.theta

    def add(self, r, c, label):
        """Measure (r, c); returns ``(changed_pixels, their_previous_labels)``."""
        lf, N = self.lf, self.lf.N
        changed, previous = lf.add(r, c, label, return_previous=True)
        rad = self.radius
        self.density[max(r - rad, 0) : r + rad + 1, max(c - rad, 0) : c + rad + 1] += 1
        cr, cc = lf._pr[changed], lf._pc[changed]
        r0 = max(min(cr.min() - 1, r - rad), 0)
        r1 = min(max(cr.max() + 1, r + rad), N - 1)
        c0 = max(min(cc.min() - 1, c - rad), 0)
        c1 = min(max(cc.max() + 1, c + rad), N - 1)
        rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        self.erd[r * N + c] = -np.inf
        self.refresh((rr * N + cc).ravel())
        return changed, previous

    def select_next(self):
        s = int(np.argmax(self.erd))
        if not np.isfinite(self.erd[s]):
            raise SamplingComplete()
        return divmod(s, self.lf.N)


def select_next(model, lf, density_radius=4):
    """Unmeasured pixel with the largest ERD; ties go to the first in row-major order."""
    return ERDMap(lf, model, density_radius).select_next()


# -- the sampling loop ---------------------------------------------------------------


def halton_locations(N, n, seed=0):
    """``n`` distinct pixels from a scrambled 2D Halton sequence."""
    if n > N * N:
        raise ConfigurationError("more initial samples than pixels")
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    chosen, seen = [], set()
    while len(chosen) < n:
        pts = np.minimum((sampler.random(max(n, 16)) * N).astype(np.int64), N - 1)
        for r, c in pts:
            key = int(r) * N + int(c)
            if key not in seen:
                seen.add(key)
                chosen.append(key)
                if len(chosen) == n:
                    break
    rows, cols = np.divmod(np.asarray(chosen, dtype=np.int64), N)
    return rows, cols


def _n_pixels(fraction, N):
    return max(1, int(round(fraction * N * N)))


@dataclass
class SladsResult:
    field: LabelField
    trace: list
    sigma2: np.ndarray  # detector variance per measurement, acquisition order
    snapshots: list = field(default_factory=list)

    @property
    def reconstruction(self):
        return self.field.image()

    @property
    def mask(self):
        return self.field.measured_mask

    def total_distortion(self, truth):
        return float(np.mean(self.reconstruction != np.asarray(truth)))


def _measure(obj, tier, rows, cols):
    spectra = np.stack([obj.spectrum(r, c) for r, c in zip(rows, cols)])
    labels, s2, _ = tier.predict_details(spectra)
    return labels, s2


def _two_tier(det, cls):
    from .classifier import TwoTierClassifier

    if hasattr(det, "predict_details"):
        return det
    return TwoTierClassifier.from_fitted(det, cls)


def run_slads(obj, erd_model, det, cls=None, cfg=None, truth=None, on_step=None):
    """Sample ``obj`` until ``cfg.stop_fraction`` of its pixels are measured.

    ``det``/``cls`` are the fitted detector and classifier (or one
    :class:`~edsslads.classifier.TwoTierClassifier` passed as ``det``).
    ``truth`` defaults to the object's ground truth and is used only for the
    TD column of the trace. ``on_step(row)`` is called after every trace row.
    """
    cfg = cfg or SamplingConfig()
    tier = _two_tier(det, cls)
    if tier.detector_.n_features_in_ != obj.p:
        raise ConfigurationError(f"models expect p={tier.detector_.n_features_in_}, object has p={obj.p}")
    N = obj.N
    truth = obj.truth if truth is None else np.asarray(truth)
    n_labels = int(max(tier.classes_.max(), truth.max()))
    n0 = _n_pixels(cfg.initial_fraction, N)
    n_stop = max(_n_pixels(cfg.stop_fraction, N), n0)

    rows, cols = halton_locations(N, n0, cfg.seed)
    labels, s2 = _measure(obj, tier, rows, cols)
    trace = [(k + 1, int(c), int(r), int(l), float(v), None)
             for k, (r, c, l, v) in enumerate(zip(rows, cols, labels, s2))]
    if on_step:
        for row in trace:
            on_step(row)
    lf = LabelField.from_measurements(N, MeasurementSet(rows, cols, labels), cfg.n_neighbors, n_labels)
    sigma2 = list(s2)
    flat_truth = truth.ravel()
    wrong = int(np.count_nonzero(lf.recon != flat_truth))
    erd = ERDMap(lf, erd_model, cfg.density_radius) if n_stop > n0 else None
    snapshots = []
    for k in range(n0 + 1, n_stop + 1):
        r, c = erd.select_next()
        lab, v = _measure(obj, tier, [r], [c])
        changed, previous = erd.add(r, c, int(lab[0]))
        t = flat_truth[changed]
        wrong += int(np.count_nonzero(lf.recon[changed] != t) - np.count_nonzero(previous != t))
        sigma2.append(float(v[0]))
        row = (k, int(c), int(r), int(lab[0]), float(v[0]), wrong / (N * N))
        trace.append(row)
        if on_step:
            on_step(row)
        if cfg.snapshot_stride and (k - n0) % cfg.snapshot_stride == 0:
            snapshots.append((k, lf.measured_mask.copy(), lf.image()))
    return SladsResult(lf, trace, np.asarray(sigma2), snapshots)


def run_random_sampling(obj, det, cls=None, fraction=0.15, seed=0, n_neighbors=DEFAULT_K):
    """Baseline: uniformly random pixels through the same classifier and reconstructor."""
    tier = _two_tier(det, cls)
    N = obj.N
    n = _n_pixels(fraction, N)
    flat = np.random.default_rng([int(seed), 0xBA5E]).choice(N * N, size=n, replace=False)
    rows, cols = np.divmod(flat, N)
    labels, s2 = _measure(obj, tier, rows, cols)
    n_labels = int(max(tier.classes_.max(), obj.truth.max()))
    lf = LabelField.from_measurements(N, MeasurementSet(rows, cols, labels), n_neighbors, n_labels)
    trace = [(k + 1, int(c), int(r), int(l), float(v), None)
             for k, (r, c, l, v) in enumerate(zip(rows, cols, labels, s2))]
    return SladsResult(lf, trace, s2)


def format_trace_row(row):
    k, x, y, label, s2, td = row
    return [str(k), str(x), str(y), str(label), f"{s2:.10g}", "" if td is None else f"{td:.10g}"]


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(format_trace_row(row))


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows
