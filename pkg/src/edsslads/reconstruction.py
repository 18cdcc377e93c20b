"""Label-image reconstruction from scattered measurements.

Every unmeasured pixel takes the inverse-squared-distance weighted mode of its
K nearest measured neighbours. Neighbours are ranked by squared distance and
then by acquisition order, which makes the neighbour sets, and therefore the
reconstruction, independent of how they were computed: a full rebuild and a
sequence of incremental insertions give identical images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .nn import ConfigurationError

DEFAULT_K = 10
_KD_PAD = 6


class InputError(ValueError):
    """Raised for empty or mismatched measurement inputs."""


def distortion(x, xhat):
    """Number of pixels whose labels differ."""
    x, xhat = np.asarray(x), np.asarray(xhat)
    if x.shape != xhat.shape:
        raise InputError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return int(np.count_nonzero(x != xhat))


@dataclass
class MeasurementSet:
    """Measured pixels in acquisition order."""

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if not (len(self.rows) == len(self.cols) == len(self.labels)):
            raise InputError("rows, cols and labels must have equal length")

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            return cls([], [], [])
        r, c, lab = zip(*[(int(a), int(b), int(l)) for (a, b), l in pairs])
        return cls(r, c, lab)


@dataclass
class Reconstruction:
    labels: np.ndarray
    measured: np.ndarray  # bool mask, True where the label was measured


class LabelField:
    """Incrementally maintained K-NN label reconstruction on an N x N grid."""

    def __init__(self, N, K=DEFAULT_K, n_labels=None):
        if K < 1:
            raise ConfigurationError("K must be >= 1")
        self.N = int(N)
        self.K = int(K)
        self.n_labels = n_labels
        size = self.N * self.N
        self.rows = np.zeros(size, dtype=np.int64)
        self.cols = np.zeros(size, dtype=np.int64)
        self.labels = np.zeros(size, dtype=np.int64)
        self.count = 0
        self.order = np.full(size, -1, dtype=np.int64)  # measurement index per pixel
        self.nbr_idx = np.full((size, self.K), -1, dtype=np.int64)
        self.nbr_d2 = np.full((size, self.K), np.inf)
        self.recon = np.zeros(size, dtype=np.int64)
        self._pr, self._pc = np.divmod(np.arange(size), self.N)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_measurements(cls, N, measurements, K=DEFAULT_K, n_labels=None):
        field = cls(N, K, n_labels)
        field.reset(measurements)
        return field

    def reset(self, ms):
        if len(ms) == 0:
            raise InputError("empty measurement set")
        flat = ms.rows * self.N + ms.cols
        if np.any((ms.rows < 0) | (ms.rows >= self.N) | (ms.cols < 0) | (ms.cols >= self.N)):
            raise InputError("measurement outside the grid")
        if len(np.unique(flat)) != len(flat):
            raise InputError("duplicate measurement locations")
        if self.n_labels is None:
            self.n_labels = int(ms.labels.max())
        if ms.labels.min() < 0 or ms.labels.max() > self.n_labels:
            raise InputError("label out of range")
        m = len(ms)
        self.count = m
        self.rows[:m], self.cols[:m], self.labels[:m] = ms.rows, ms.cols, ms.labels
        self.order[:] = -1
        self.order[flat] = np.arange(m)
        self.nbr_idx[:] = -1
        self.nbr_d2[:] = np.inf
        todo = np.flatnonzero(self.order < 0)
        if len(todo):
            idx, d2 = self._knn(todo)
            self.nbr_idx[todo, : idx.shape[1]] = idx
            self.nbr_d2[todo, : idx.shape[1]] = d2
        self.nbr_d2[flat] = 0.0
        self.recon[flat] = ms.labels
        if len(todo):
            self.recon[todo] = self._vote(todo)

    def _knn(self, pix):
        """Canonical K nearest measurements of each pixel in ``pix``."""
        m = self.count
        k = min(self.K, m)
        kq = min(self.K + _KD_PAD, m)
        pts = np.column_stack([self.rows[:m], self.cols[:m]])
        qr, qc = self._pr[pix], self._pc[pix]
        _, cand = cKDTree(pts).query(np.column_stack([qr, qc]), k=kq)
        cand = cand.reshape(len(pix), kq)
        idx, d2 = self._rank(qr, qc, cand, k)
        if kq < m:
            # ties at the K-th distance might extend past the queried candidates
            full_d2 = (self.rows[cand[:, -1]] - qr) ** 2 + (self.cols[cand[:, -1]] - qc) ** 2
            unsure = np.flatnonzero(full_d2 <= d2[:, -1])
            step = max(1, 2_000_000 // m)
            for i in range(0, len(unsure), step):
                sub = unsure[i : i + step]
                everyone = np.broadcast_to(np.arange(m), (len(sub), m))
                idx[sub], d2[sub] = self._rank(qr[sub], qc[sub], everyone, k)
        return idx, d2

    def _rank(self, qr, qc, cand, k):
        d2 = (self.rows[cand] - qr[:, None]) ** 2 + (self.cols[cand] - qc[:, None]) ** 2
        key = d2 * (self.N * self.N + 1) + cand
        if cand.shape[1] > k:
            part = np.argpartition(key, k - 1, axis=1)[:, :k]
            key = np.take_along_axis(key, part, axis=1)
            cand = np.take_along_axis(cand, part, axis=1)
            d2 = np.take_along_axis(d2, part, axis=1)
        o = np.argsort(key, axis=1)
        return np.take_along_axis(cand, o, axis=1), np.take_along_axis(d2, o, axis=1).astype(float)

    def _vote(self, pix, nbr_idx=None, nbr_d2=None):
        nbr_idx = self.nbr_idx[pix] if nbr_idx is None else nbr_idx
        nbr_d2 = self.nbr_d2[pix] if nbr_d2 is None else nbr_d2
        valid = nbr_idx >= 0
        labs = self.labels[np.where(valid, nbr_idx, 0)]
        w = np.where(valid, 1.0 / np.where(valid, nbr_d2, 1.0), 0.0)
        votes = np.zeros((len(pix), self.n_labels + 1))
        rows = np.arange(len(pix))
        for j in range(nbr_idx.shape[1]):
            votes[rows, labs[:, j]] += w[:, j]
        return np.argmax(votes, axis=1)

    # -- incremental updates ---------------------------------------------------

    @property
    def measured_mask(self):
        return (self.order >= 0).reshape(self.N, self.N)

    def image(self):
        return self.recon.reshape(self.N, self.N).copy()

    def _affected(self, r, c):
        """Unmeasured pixels whose neighbour list would admit a measurement at (r, c)."""
        dk = self.nbr_d2[:, -1]
        reach = np.max(dk)
        if np.isfinite(reach):
            R = int(np.ceil(np.sqrt(reach)))
            r0, r1 = max(r - R, 0), min(r + R + 1, self.N)
            c0, c1 = max(c - R, 0), min(c + R + 1, self.N)
            rr, cc = np.mgrid[r0:r1, c0:c1]
            pix = (rr * self.N + cc).ravel()
        else:
            pix = np.arange(self.N * self.N)
        d2 = (self._pr[pix] - r) ** 2 + (self._pc[pix] - c) ** 2
        hit = (d2 < dk[pix]) & (self.order[pix] < 0)
        return pix[hit], d2[hit].astype(float)

    def peek_add(self, r, c, label):
        """What adding a measurement would change, without changing anything.

        Returns ``(pixels, new_labels, new_nbr_idx, new_nbr_d2)`` for the
        affected unmeasured pixels; the measured pixel itself is not included.
        """
        s = r * self.N + c
        if self.order[s] >= 0:
            raise InputError(f"pixel ({r}, {c}) already measured")
        if label < 0 or (self.n_labels is not None and label > self.n_labels):
            raise InputError("label out of range")
        pix, d2 = self._affected(r, c)
        pix_mask = pix != s
        pix, d2 = pix[pix_mask], d2[pix_mask]
        old_idx, old_d2 = self.nbr_idx[pix], self.nbr_d2[pix]
        pos = np.sum(old_d2 <= d2[:, None], axis=1)
        j = np.arange(self.K)[None, :]
        shifted_idx = np.concatenate([old_idx[:, :1], old_idx[:, :-1]], axis=1)
        shifted_d2 = np.concatenate([old_d2[:, :1], old_d2[:, :-1]], axis=1)
        m = self.count
        new_idx = np.where(j < pos[:, None], old_idx, np.where(j == pos[:, None], m, shifted_idx))
        new_d2 = np.where(j < pos[:, None], old_d2, np.where(j == pos[:, None], d2[:, None], shifted_d2))
        saved = self.labels[m]
        self.labels[m] = label
        try:
            new_labels = self._vote(pix, new_idx, new_d2)
        finally:
            self.labels[m] = saved
        return pix, new_labels, new_idx, new_d2

    def add(self, r, c, label, return_previous=False):
        """Record a measurement; returns the flat indices whose label may have changed.

        With ``return_previous`` also returns their labels before the update.
        """
        r, c, label = int(r), int(c), int(label)
        if self.n_labels is None:
            self.n_labels = label
        if label > self.n_labels:
            raise InputError("label out of range")
        pix, new_labels, new_idx, new_d2 = self.peek_add(r, c, label)
        s = r * self.N + c
        changed = np.append(pix, s)
        previous = self.recon[changed] if return_previous else None
        m = self.count
        self.rows[m], self.cols[m], self.labels[m] = r, c, label
        self.count += 1
        self.order[s] = m
        self.nbr_idx[pix], self.nbr_d2[pix] = new_idx, new_d2
        self.recon[pix] = new_labels
        self.nbr_idx[s] = -1
        self.nbr_d2[s] = 0.0
        self.recon[s] = label
        return (changed, previous) if return_previous else changed

    def measurements(self):
        m = self.count
        return MeasurementSet(self.rows[:m].copy(), self.cols[:m].copy(), self.labels[:m].copy())


def reconstruct(measurements, N, K=DEFAULT_K, n_labels=None):
    """Full reconstruction of an N x N label image from a :class:`MeasurementSet`."""
    if not isinstance(measurements, MeasurementSet):
        measurements = MeasurementSet.from_pairs(measurements)
    field = LabelField.from_measurements(N, measurements, K, n_labels)
    return Reconstruction(field.image(), field.measured_mask)
