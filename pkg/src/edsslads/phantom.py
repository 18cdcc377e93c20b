"""Synthetic phase maps, spectrum libraries and simulated EDS objects."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .nn import ConfigurationError

E_MAX_KEV = 20.0
DEFAULT_P = 2040
DEFAULT_NOISE_SCALE = 2.0
DEFAULT_ILL_LAMBDA = 20.0

# Approximate characteristic line energies (keV) used as the peak pool.
LINE_POOL_KEV = (
    0.277, 0.525, 0.849, 1.041, 1.254, 1.487, 1.740, 2.014, 2.308, 2.622,
    2.958, 3.314, 3.692, 4.090, 4.511, 4.952, 5.415, 5.899, 6.404, 6.930,
    7.478, 8.048, 8.639, 9.252, 9.886, 10.551, 11.222, 12.614, 13.395, 14.165,
)

MORPHOLOGIES = ("half-plane", "lamellar", "blobs")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- label images ----------------------------------------------------------------


def _lamellar(N, L, params, rng):
    period = params.get("period", 0.5)
    angle = params.get("angle")
    if angle is None:
        angle = rng.uniform(0, np.pi)
    amp = params.get("waviness", 0.03)
    freq = params.get("wave_cycles", 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(0, period)
    c = (np.arange(N) + 0.5) / N
    v, u = np.meshgrid(c, c, indexing="ij")
    along = -u * np.sin(angle) + v * np.cos(angle)
    across = u * np.cos(angle) + v * np.sin(angle)
    across = across + amp * np.sin(2 * np.pi * freq * along + phase) + offset
    t = np.mod(across / period, 1.0)
    return 1 + np.minimum((t * L).astype(np.int64), L - 1)


def _blobs(N, L, params, rng):
    base = int(params.get("base_grid", 64))
    sigma = params.get("blob_sigma", 4.0)
    fields = rng.standard_normal((L, base, base))
    fields = np.stack([ndimage.gaussian_filter(f, sigma, mode="wrap") for f in fields])
    zoomed = np.stack(
        [ndimage.zoom(f, N / base, order=3, mode="grid-wrap", grid_mode=True) for f in fields]
    )
    return 1 + np.argmax(zoomed[:, :N, :N], axis=0)


def synth_label_image(N, L, morphology="lamellar", params=None, seed=0):
    """Ground-truth phase map with labels ``1..L``.

    ``lamellar`` gives wavy eutectic-like bands, ``blobs`` an interpenetrating
    mixture from thresholded smooth random fields, and ``half-plane`` equal
    vertical stripes. Morphology parameters are expressed as fractions of the
    image so the same seed gives the same picture at any ``N``.
    """
    params = dict(params or {})
    if N < 8 or L < 2:
        raise ConfigurationError("need N >= 8 and L >= 2")
    if morphology not in MORPHOLOGIES:
        raise ConfigurationError(f"unknown morphology {morphology!r}")
    if morphology == "half-plane":
        col = np.arange(N) * L // N
        img = np.broadcast_to(1 + col, (N, N)).copy()
    else:
        ss = np.random.SeedSequence(seed)
        for child in ss.spawn(int(params.get("max_tries", 20))):
            rng = np.random.default_rng(child)
            img = (_lamellar if morphology == "lamellar" else _blobs)(N, L, params, rng)
            if _phase_fractions_ok(img, L):
                break
        else:
            raise ConfigurationError(f"could not place {L} phases on a {N}x{N} {morphology} image")
    if not _phase_fractions_ok(img, L):
        raise ConfigurationError(f"{L} phases do not fit on a {N}x{N} image")
    return img.astype(np.int64)


def _phase_fractions_ok(img, L):
    counts = np.bincount(img.ravel(), minlength=L + 1)[1:]
    return counts.min() >= 0.01 * img.size


# -- spectra -------------------------------------------------------------------


@dataclass
class PhaseLibrary:
    """Clean reference spectra, ``spectra[l - 1, m]`` is spectrum m of phase l."""

    spectra: np.ndarray
    peaks_kev: list = field(default_factory=list)

    def __post_init__(self):
        self.spectra = np.asarray(self.spectra, dtype=np.float64)
        if self.spectra.ndim != 3 or self.spectra.shape[1] < 1:
            raise ConfigurationError("library needs shape (L, M, p) with M >= 1")
        if np.any(self.spectra < 0) or not np.all(np.isfinite(self.spectra)):
            raise ConfigurationError("library spectra must be finite and nonnegative")

    @property
    def L(self):
        return self.spectra.shape[0]

    @property
    def M(self):
        return self.spectra.shape[1]

    @property
    def p(self):
        return self.spectra.shape[2]

    def subset(self, indices):
        return PhaseLibrary(self.spectra[:, list(indices)], self.peaks_kev)

    def split(self, *sizes):
        """Consecutive per-phase slices, e.g. ``split(12, 12, 12)``."""
        if sum(sizes) > self.M:
            raise ConfigurationError(f"cannot split {self.M} spectra into {sizes}")
        out, start = [], 0
        for n in sizes:
            out.append(self.subset(range(start, start + n)))
            start += n
        return out

    def labelled(self):
        """Flattened ``(X, y)`` with labels in ``1..L``."""
        X = self.spectra.reshape(-1, self.p)
        y = np.repeat(np.arange(1, self.L + 1), self.M)
        return X, y


def energy_axis(p):
    return (np.arange(p) + 0.5) * (E_MAX_KEV / p)


def background(p, level=4.0, beam_kev=15.0):
    """Kramers-like bremsstrahlung with low-energy absorption roll-off."""
    E = energy_axis(p)
    kramers = np.clip(beam_kev - E, 0, None) / E
    return level * kramers * (1 - np.exp(-((E / 1.2) ** 3)))


def synth_phase_spectra(L, M, p=DEFAULT_P, peak_params=None, seed=0):
    """Library of ``M`` clean spectra for each of ``L`` phases.

    Each phase gets its own set of Gaussian peaks drawn from the line pool on
    top of a shared smooth background; individual spectra jitter the peak
    heights and overall intensity.
    """
    pp = dict(peak_params or {})
    if L < 2 or M < 2 or p < 32:
        raise ConfigurationError("need L >= 2, M >= 2, p >= 32")
    n_peaks = int(pp.get("peaks_per_phase", 3))
    lo, hi = pp.get("amplitude_range", (80.0, 300.0))
    width_kev = pp.get("width_kev", 0.06)
    jitter = pp.get("jitter", 0.15)
    bg_level = pp.get("background", 4.0)
    shared = int(pp.get("shared_peaks", 0))
    rng = _rng(seed)

    pool = list(LINE_POOL_KEV)
    if pp.get("peaks_kev") is not None:
        peak_sets = [sorted(map(float, s)) for s in pp["peaks_kev"]]
        if len(peak_sets) != L:
            raise ConfigurationError("peaks_kev must list one peak set per phase")
    else:
        if L * n_peaks - (L - 1) * shared > len(pool):
            raise ConfigurationError("not enough distinct lines for the requested phases")
        order = [pool[i] for i in rng.permutation(len(pool))]
        common, rest = order[:shared], order[shared:]
        uniq = n_peaks - shared
        peak_sets = [sorted(common + rest[i * uniq : (i + 1) * uniq]) for i in range(L)]
    if len({tuple(s) for s in peak_sets}) != L:
        raise ConfigurationError("two phases have identical peak sets")

    E = energy_axis(p)
    bg = background(p, bg_level)
    heights = [rng.uniform(lo, hi, size=len(s)) for s in peak_sets]
    spectra = np.empty((L, M, p))
    for l, (peaks, h) in enumerate(zip(peak_sets, heights)):
        shapes = np.exp(-0.5 * ((E[None, :] - np.asarray(peaks)[:, None]) / width_kev) ** 2)
        for m in range(M):
            hj = h * (1 + jitter * rng.uniform(-1, 1, size=len(h)))
            scale = 1 + 0.5 * jitter * rng.uniform(-1, 1)
            spectra[l, m] = scale * (bg + hj @ shapes)
    return PhaseLibrary(spectra, peak_sets)


def add_poisson_noise(s, lambda_scale=DEFAULT_NOISE_SCALE, seed=None, mode="scaled"):
    """Shot noise on a clean spectrum.

    ``mode="scaled"`` draws ``Poisson(s * lambda_scale) / lambda_scale`` so the
    mean is unchanged; ``mode="offset"`` returns ``Poisson(s) + Poisson(lambda_scale)``.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ConfigurationError("spectrum must be nonnegative")
    rng = _rng(seed)
    if mode == "scaled":
        return rng.poisson(s * lambda_scale) / lambda_scale
    if mode == "offset":
        return (rng.poisson(s) + rng.poisson(lambda_scale, size=s.shape)).astype(np.float64)
    raise ConfigurationError(f"unknown noise mode {mode!r}")


def gen_ill_spectrum(p, lam=DEFAULT_ILL_LAMBDA, seed=None, size=None):
    """I.i.d. Poisson(lam) counts; ``size`` draws a stack of spectra."""
    if p < 1 or lam <= 0:
        raise ConfigurationError("need p >= 1 and lam > 0")
    shape = (p,) if size is None else (size, p)
    return _rng(seed).poisson(lam, size=shape).astype(np.float64)


def noisy_draws(lib, n, lambda_scale=DEFAULT_NOISE_SCALE, seed=None, mode="scaled"):
    """``n`` noisy spectra drawn uniformly over phases and library entries."""
    rng = _rng(seed)
    labels = rng.integers(1, lib.L + 1, size=n)
    idx = rng.integers(0, lib.M, size=n)
    clean = lib.spectra[labels - 1, idx]
    if mode == "scaled":
        X = rng.poisson(clean * lambda_scale) / lambda_scale
    else:
        X = add_poisson_noise(clean, lambda_scale, rng, mode)
    return X, labels


# -- simulated object --------------------------------------------------------------


class SimulatedObject:
    """N x N grid of spectra with ground-truth labels.

    Spectra are generated on demand from a per-pixel random stream derived from
    ``(seed, row, col)``, so reading a pixel twice gives the same counts and
    large objects never need to be held in memory. Objects loaded from disk are
    backed by their stored spectra instead.
    """

    def __init__(self, truth, library=None, choice=None, seed=0,
                 lambda_scale=DEFAULT_NOISE_SCALE, ill_lambda=DEFAULT_ILL_LAMBDA,
                 noise_mode="scaled", spectra=None):
        self.truth = np.asarray(truth, dtype=np.int64)
        self.library = library
        self.choice = choice
        self.seed = int(seed)
        self.lambda_scale = lambda_scale
        self.ill_lambda = ill_lambda
        self.noise_mode = noise_mode
        self._spectra = spectra
        if self.truth.ndim != 2 or self.truth.shape[0] != self.truth.shape[1]:
            raise ConfigurationError("truth must be a square label image")
        if spectra is None and (library is None or choice is None):
            raise ConfigurationError("need a library and per-pixel choices, or stored spectra")

    @property
    def N(self):
        return self.truth.shape[0]

    @property
    def p(self):
        return self._spectra.shape[-1] if self._spectra is not None else self.library.p

    @property
    def shape(self):
        return self.truth.shape

    def spectrum(self, row, col):
        if self._spectra is not None:
            return np.asarray(self._spectra[row, col], dtype=np.float64)
        rng = np.random.default_rng([self.seed, int(row), int(col)])
        label = self.truth[row, col]
        if label == 0:
            return gen_ill_spectrum(self.p, self.ill_lambda, rng)
        clean = self.library.spectra[label - 1, self.choice[row, col]]
        return add_poisson_noise(clean, self.lambda_scale, rng, self.noise_mode)

    def spectra_rows(self):
        """Yield ``(N, p)`` blocks row by row."""
        for r in range(self.N):
            yield np.stack([self.spectrum(r, c) for c in range(self.N)])


def build_simulated_object(truth, lib, noise_fraction=0.0, seed=0,
                           lambda_scale=DEFAULT_NOISE_SCALE, ill_lambda=DEFAULT_ILL_LAMBDA,
                           noise_mode="scaled"):
    """Relabel ``floor(noise_fraction * N^2)`` random pixels as ill (0) and
    attach a uniformly chosen library spectrum to every other pixel."""
    truth = np.array(truth, dtype=np.int64)
    if not 0 <= noise_fraction < 1:
        raise ConfigurationError("noise_fraction must be in [0, 1)")
    if truth.max() > lib.L or truth.min() < 0:
        raise ConfigurationError("truth labels exceed library phases")
    if lib.M < 1:
        raise ConfigurationError("empty library phase")
    rng = np.random.default_rng([int(seed), 0x5EED])
    n_ill = int(np.floor(noise_fraction * truth.size))
    ill = rng.choice(truth.size, size=n_ill, replace=False)
    truth.ravel()[ill] = 0
    choice = rng.integers(0, lib.M, size=truth.shape)
    return SimulatedObject(truth, lib, choice, seed, lambda_scale, ill_lambda, noise_mode)
