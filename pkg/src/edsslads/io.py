"""File formats: PGM label images, spectrum libraries and object directories."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import ConfigurationError
from .phantom import PhaseLibrary, SimulatedObject


def write_pgm(path, image):
    """Binary 8-bit PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.min() < 0 or image.max() > 255:
        raise ConfigurationError("PGM needs a 2D image with values in 0..255")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.astype(np.uint8).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ConfigurationError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def label_levels(n_labels):
    """Gray level for each label 0..n_labels, spread over 0..255."""
    return {lab: int(round(lab * 255 / n_labels)) for lab in range(n_labels + 1)}


def write_label_image(path, labels, n_labels=None):
    """Write ``labels`` as PGM plus a ``.json`` sidecar mapping levels to labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n_labels = int(labels.max()) if n_labels is None else int(n_labels)
    n_labels = max(n_labels, 1)
    levels = label_levels(n_labels)
    lut = np.array([levels[i] for i in range(n_labels + 1)], dtype=np.uint8)
    path = Path(path)
    write_pgm(path, lut[labels])
    sidecar = {"levels": {str(v): k for k, v in levels.items()}, "n_labels": n_labels}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def read_label_image(path):
    path = Path(path)
    gray = read_pgm(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    lut = np.full(256, -1, dtype=np.int64)
    for level, lab in sidecar["levels"].items():
        lut[int(level)] = lab
    labels = lut[gray]
    if np.any(labels < 0):
        raise ConfigurationError(f"{path}: gray levels missing from sidecar")
    return labels


def write_library_csv(path, lib):
    """One spectrum per row: ``phase,index,c0..c{p-1}``, after an ``L,M,p`` header."""
    with open(path, "w") as fh:
        fh.write(f"# L={lib.L},M={lib.M},p={lib.p}\n")
        fh.write("phase,index," + ",".join(f"c{i}" for i in range(lib.p)) + "\n")
        for l in range(lib.L):
            for m in range(lib.M):
                vals = ",".join(repr(float(v)) for v in lib.spectra[l, m])
                fh.write(f"{l + 1},{m},{vals}\n")
    meta = Path(path).with_suffix(".json")
    meta.write_text(json.dumps({"peaks_kev": lib.peaks_kev}, indent=1) + "\n")


def read_library_csv(path):
    path = Path(path)
    with open(path) as fh:
        head = fh.readline().lstrip("# ").strip()
    dims = dict(kv.split("=") for kv in head.split(","))
    L, M, p = int(dims["L"]), int(dims["M"]), int(dims["p"])
    rows = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    spectra = np.zeros((L, M, p))
    for row in rows:
        spectra[int(row[0]) - 1, int(row[1])] = row[2:]
    peaks = []
    meta = path.with_suffix(".json")
    if meta.exists():
        peaks = json.loads(meta.read_text())["peaks_kev"]
    return PhaseLibrary(spectra, peaks)


def read_spectra_csv(path):
    """Spectra from a library CSV or a plain CSV (one spectrum per row)."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# L="):
        X, _ = read_library_csv(path).labelled()
        return X
    return np.loadtxt(path, delimiter=",", ndmin=2)


def save_object(directory, obj, n_labels=None):
    """Write ``truth.pgm`` (+sidecar), ``spectra.bin`` and ``meta.json``.

    ``spectra.bin`` is row-major ``(N, N, p)`` little-endian float64.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if n_labels is None and obj.library is not None:
        n_labels = obj.library.L
    write_label_image(d / "truth.pgm", obj.truth, n_labels)
    with open(d / "spectra.bin", "wb") as fh:
        for block in obj.spectra_rows():
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
    meta = {
        "N": obj.N,
        "p": obj.p,
        "n_labels": n_labels,
        "seed": obj.seed,
        "lambda_scale": obj.lambda_scale,
        "ill_lambda": obj.ill_lambda,
        "noise_mode": obj.noise_mode,
        "dtype": "<f8",
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_object(directory):
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    truth = read_label_image(d / "truth.pgm")
    N, p = meta["N"], meta["p"]
    spectra = np.memmap(d / "spectra.bin", dtype="<f8", mode="r", shape=(N, N, p))
    obj = SimulatedObject(truth, seed=meta["seed"], spectra=spectra,
                          lambda_scale=meta["lambda_scale"], ill_lambda=meta["ill_lambda"],
                          noise_mode=meta["noise_mode"])
    obj.n_labels = meta.get("n_labels")
    return obj
