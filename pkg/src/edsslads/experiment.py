"""End-to-end experiment: synthesize, train, sample, report."""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .classifier import CNNClassifier, TwoTierClassifier
from .config import ExperimentConfig
from .detector import NNRDetector
from .metrics import distortion_image, misclassification_rate, total_distortion
from .phantom import (
    build_simulated_object,
    gen_ill_spectrum,
    noisy_draws,
    synth_label_image,
    synth_phase_spectra,
)
from .slads import SamplingConfig, run_random_sampling, run_slads, write_trace
from .training import train_erd_model

log = logging.getLogger(__name__)

PANELS = ("measurements", "reconstruction", "truth", "distortion")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the reason."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    coverage: list
    td: list
    final_td: float
    misclassification_rate: float
    random_td: float | None
    threshold: float
    stage_seconds: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class _Stages:
    def __init__(self):
        self.seconds = {}

    @contextmanager
    def __call__(self, name):
        log.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            yield
        except (StageError, KeyboardInterrupt):
            raise
        except Exception as exc:  # noqa: BLE001 - tagged and re-raised
            raise StageError(name, exc) from exc
        finally:
            self.seconds[name] = round(time.perf_counter() - t0, 3)


def build_library(cfg):
    return synth_phase_spectra(cfg.phases, cfg.library_size, cfg.p, seed=cfg.library_seed)


def train_networks(cfg, library):
    """Detector and classifier on the training split, threshold on the rest."""
    train, held = library.split(cfg.train_per_phase, cfg.library_size - cfg.train_per_phase)
    X, y = train.labelled()
    det = NNRDetector(n_iter=cfg.detector_iter, learning_rate=cfg.detector_learning_rate,
                      momentum=cfg.momentum, batch_size=cfg.batch_size,
                      noise_scale=cfg.lambda_scale, seed=cfg.network_seed)
    det.fit(X)
    valid, _ = noisy_draws(held, cfg.calibration_draws, cfg.lambda_scale,
                           seed=[cfg.network_seed, 11], mode=cfg.noise_mode)
    ill = gen_ill_spectrum(cfg.p, cfg.ill_lambda, seed=[cfg.network_seed, 12],
                           size=cfg.calibration_draws)
    det.calibrate(valid, ill)
    cls = CNNClassifier(n_iter=cfg.classifier_iter, learning_rate=cfg.classifier_learning_rate,
                        momentum=cfg.momentum, batch_size=cfg.batch_size,
                        noise_scale=cfg.lambda_scale, seed=cfg.network_seed)
    cls.fit(X, y)
    return det, cls


def training_images(cfg, seeds=None):
    seeds = cfg.train_seeds if seeds is None else seeds
    return [synth_label_image(cfg.size, cfg.phases, cfg.morphology, cfg.morphology_params(), s)
            for s in seeds]


def write_panels(out, result, truth, n_labels):
    """Measurement mask, reconstruction, truth and distortion images."""
    out = Path(out)
    recon = result.reconstruction
    paths = {}
    images = {
        "measurements": (result.mask.astype(np.int64), 1),
        "reconstruction": (recon, n_labels),
        "truth": (truth, n_labels),
        "distortion": (distortion_image(truth, recon), 1),
    }
    for name in PANELS:
        img, n = images[name]
        path = out / f"{name}.pgm"
        io.write_label_image(path, img, n)
        paths[name] = str(path)
    return paths


def td_series(trace, n_pixels):
    """(coverage, TD) pairs for the trace rows that carry a TD value."""
    rows = [(k / n_pixels, td) for k, _, _, _, _, td in trace if td is not None]
    return [r[0] for r in rows], [r[1] for r in rows]


def run_experiment(config, out_dir=None):
    """Run every stage of ``config`` and write outputs to ``out_dir``."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.toml")
    stage = _Stages()
    paths = {"config": str(out / "config.toml")}

    with stage("synth"):
        library = build_library(cfg)
        truth = synth_label_image(cfg.size, cfg.phases, cfg.morphology,
                                  cfg.morphology_params(), cfg.seed)
        obj = build_simulated_object(truth, library, cfg.noise_fraction, cfg.seed,
                                     cfg.lambda_scale, cfg.ill_lambda, cfg.noise_mode)
    with stage("train-classifier"):
        det, cls = train_networks(cfg, library)
        det.save(out / "detector.ck")
        cls.save(out / "classifier.ck")
        paths.update(detector=str(out / "detector.ck"), classifier=str(out / "classifier.ck"))
    with stage("train-slads"):
        erd, corpus = train_erd_model(
            training_images(cfg), tuple(cfg.coverage_levels), cfg.samples_per_level,
            seed=cfg.seed, ridge_lambda=cfg.ridge_lambda, n_neighbors=cfg.n_neighbors,
            density_radius=cfg.density_radius,
            sources=[{"train_seed": s, "morphology": cfg.morphology} for s in cfg.train_seeds],
        )
        erd.save(out / "erd.json", meta={"train_seeds": cfg.train_seeds})
        corpus.save(out / "corpus.bin")
        paths.update(erd_model=str(out / "erd.json"), corpus=str(out / "corpus.bin"))
    tier = TwoTierClassifier.from_fitted(det, cls)
    sampling = SamplingConfig(cfg.initial_fraction, cfg.stop_fraction, cfg.seed,
                              cfg.n_neighbors, cfg.density_radius, cfg.snapshot_stride)
    with stage("sample"):
        trace_rows = []
        try:
            result = run_slads(obj, erd, tier, cfg=sampling, on_step=trace_rows.append)
        finally:
            write_trace(out / "trace.csv", trace_rows)
        paths["trace"] = str(out / "trace.csv")
    random_td = None
    if cfg.random_baseline:
        with stage("random-baseline"):
            rnd = run_random_sampling(obj, tier, fraction=cfg.stop_fraction, seed=cfg.seed,
                                      n_neighbors=cfg.n_neighbors)
            random_td = total_distortion(obj.truth, rnd.reconstruction)
    with stage("report"):
        paths.update(write_panels(out, result, obj.truth, cfg.phases))
        for k, mask, recon in result.snapshots:
            snap = out / "snapshots"
            snap.mkdir(exist_ok=True)
            io.write_label_image(snap / f"mask_{k:07d}.pgm", mask.astype(np.int64), 1)
            io.write_label_image(snap / f"recon_{k:07d}.pgm", recon, cfg.phases)
        ms = result.field.measurements()
        coverage, td = td_series(result.trace, cfg.size ** 2)
        report = RunReport(
            coverage=coverage,
            td=td,
            final_td=total_distortion(obj.truth, result.reconstruction),
            misclassification_rate=misclassification_rate(ms.labels, obj.truth[ms.rows, ms.cols]),
            random_td=random_td,
            threshold=det.threshold_,
            stage_seconds=stage.seconds,
            paths=paths,
        )
    report.save(out / "report.json")
    return report


def report_from_run_dir(run_dir):
    """Recompute headline numbers from the images and trace a run left behind."""
    from .slads import read_trace

    d = Path(run_dir)
    truth = io.read_label_image(d / "truth.pgm")
    recon = io.read_label_image(d / "reconstruction.pgm")
    rows = read_trace(d / "trace.csv")
    summary = {
        "run_dir": str(d),
        "size": int(truth.shape[0]),
        "measurements": len(rows),
        "coverage": len(rows) / truth.size,
        "td": total_distortion(truth, recon),
        "trace_final_td": float(rows[-1]["td"]) if rows and rows[-1]["td"] else None,
    }
    saved = d / "report.json"
    if saved.exists():
        rep = json.loads(saved.read_text())
        summary["misclassification_rate"] = rep.get("misclassification_rate")
        summary["random_td"] = rep.get("random_td")
    return summary
