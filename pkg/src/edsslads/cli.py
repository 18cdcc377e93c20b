"""Command line interface: ``edsslads <command> --seed S --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 training failure,
4 runtime failure. ``EDSSLADS_OUT`` supplies the default output directory and
``EDSSLADS_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import io
from .classifier import CNNClassifier, TwoTierClassifier
from .config import ExperimentConfig
from .detector import NNRDetector
from .experiment import (
    StageError,
    build_library,
    report_from_run_dir,
    run_experiment,
    train_networks,
    training_images,
    write_panels,
)
from .nn import ConfigurationError, TrainingError
from .phantom import build_simulated_object, synth_label_image
from .slads import SamplingConfig, run_slads, write_trace
from .training import ERDRegressor, train_erd_model

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_RUNTIME = 0, 2, 3, 4
ENV_OUT = "EDSSLADS_OUT"
ENV_THREADS = "EDSSLADS_THREADS"

log = logging.getLogger("edsslads")


def exit_code_for(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ConfigurationError, click.UsageError, FileNotFoundError)):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_RUNTIME


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    sys.exit(exit_code_for(exc))


def _command(fn):
    """Shared --seed/--out options, thread limits and error-to-exit-code mapping."""

    @click.option("--seed", type=int, default=0, show_default=True, help="Random seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None,
                  help=f"Output directory (default ${ENV_OUT} or the current directory).")
    @functools.wraps(fn)
    def wrapper(*args, seed, out, **kwargs):
        out = Path(out or os.environ.get(ENV_OUT) or ".")
        threads = os.environ.get(ENV_THREADS)
        try:
            if threads is not None and int(threads) < 1:
                raise ValueError
        except ValueError:
            _fail(ConfigurationError(f"{ENV_THREADS} must be a positive integer"))
        try:
            out.mkdir(parents=True, exist_ok=True)
            if threads:
                from threadpoolctl import threadpool_limits

                with threadpool_limits(int(threads)):
                    return fn(*args, seed=seed, out=out, **kwargs)
            return fn(*args, seed=seed, out=out, **kwargs)
        except (click.exceptions.Exit, click.Abort, SystemExit):
            raise
        except Exception as exc:  # noqa: BLE001 - mapped to an exit code
            log.debug("command failed", exc_info=True)
            _fail(exc)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Reduced-exposure EDS mapping with a two-tier classifier and SLADS."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path, **overrides):
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--phases", type=int, default=None, help="Number of phases L.")
@click.option("--size", type=int, default=None, help="Image side N.")
@click.option("--p", "p", type=int, default=None, help="Spectrum length.")
@click.option("--morphology", type=str, default=None)
@click.option("--noise-fraction", type=float, default=None)
@_command
def synth(config_path, phases, size, p, morphology, noise_fraction, seed, out):
    """Write a phase library (library.csv) and a simulated object (object/)."""
    cfg = _load_config(config_path, phases=phases, size=size, p=p, morphology=morphology,
                       noise_fraction=noise_fraction)
    library = build_library(cfg)
    io.write_library_csv(out / "library.csv", library)
    truth = synth_label_image(cfg.size, cfg.phases, cfg.morphology, cfg.morphology_params(), seed)
    obj = build_simulated_object(truth, library, cfg.noise_fraction, seed, cfg.lambda_scale,
                                 cfg.ill_lambda, cfg.noise_mode)
    io.save_object(out / "object", obj, cfg.phases)
    click.echo(f"library: {out / 'library.csv'}  object: {out / 'object'}")


@main.command("train-classifier")
@click.option("--library", "library_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--train-per-phase", type=int, default=None)
@click.option("--detector-iter", type=int, default=None)
@click.option("--classifier-iter", type=int, default=None)
@_command
def train_classifier(library_path, config_path, train_per_phase, detector_iter,
                     classifier_iter, seed, out):
    """Fit and calibrate the detector, fit the CNN; write detector.ck and classifier.ck."""
    library = io.read_library_csv(library_path)
    cfg = _load_config(config_path, train_per_phase=train_per_phase,
                       detector_iter=detector_iter, classifier_iter=classifier_iter)
    cfg = cfg.replace(network_seed=seed, phases=library.L, p=library.p, library_size=library.M)
    det, cls = train_networks(cfg, library)
    det.save(out / "detector.ck")
    cls.save(out / "classifier.ck")
    click.echo(f"threshold {det.threshold_:.6g}; models in {out}")


@main.command("train-slads")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--train-seed", "train_seeds", type=int, multiple=True,
              help="Seed of a training phantom (repeatable).")
@click.option("--phases", type=int, default=None)
@click.option("--size", type=int, default=None)
@click.option("--morphology", type=str, default=None)
@click.option("--samples-per-level", type=int, default=None)
@click.option("--test-object", type=click.Path(exists=True, file_okay=False), default=None,
              help="Object the model will be used on; training must not overlap it.")
@_command
def train_slads(config_path, train_seeds, phases, size, morphology, samples_per_level,
                test_object, seed, out):
    """Fit the ERD model on training phantoms; write erd.json and corpus.bin."""
    cfg = _load_config(config_path, phases=phases, size=size, morphology=morphology,
                       samples_per_level=samples_per_level)
    seeds = list(train_seeds) or cfg.train_seeds
    images = training_images(cfg, seeds)
    if test_object:
        meta = json.loads((Path(test_object) / "meta.json").read_text())
        truth = io.read_label_image(Path(test_object) / "truth.pgm")
        if meta.get("seed") in seeds:
            raise ConfigurationError(f"test object seed {meta['seed']} is a training seed")
        test_valid = np.where(truth > 0, truth, -1)
        for s, img in zip(seeds, images):
            if img.shape == truth.shape and np.array_equal(np.where(truth > 0, img, -1), test_valid):
                raise ConfigurationError(f"training phantom {s} matches the test object")
    erd, corpus = train_erd_model(
        images, tuple(cfg.coverage_levels), cfg.samples_per_level, seed=seed,
        ridge_lambda=cfg.ridge_lambda, n_neighbors=cfg.n_neighbors,
        density_radius=cfg.density_radius,
        sources=[{"train_seed": s, "morphology": cfg.morphology} for s in seeds],
    )
    erd.save(out / "erd.json", meta={"train_seeds": seeds})
    corpus.save(out / "corpus.bin")
    click.echo("theta " + " ".join(f"{v:.6g}" for v in erd.coef_))


@main.command()
@click.option("--object", "object_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--erd-model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--detector", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--classifier", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--stop-fraction", type=float, default=0.15, show_default=True)
@click.option("--initial-fraction", type=float, default=0.01, show_default=True)
@click.option("--snapshot-stride", type=int, default=0)
@_command
def run(object_dir, erd_model, detector, classifier, stop_fraction, initial_fraction,
        snapshot_stride, seed, out):
    """Sample a stored object with SLADS; write trace.csv and the image panels."""
    obj = io.load_object(object_dir)
    tier = TwoTierClassifier.from_fitted(NNRDetector.load(detector), CNNClassifier.load(classifier))
    erd = ERDRegressor.load(erd_model)
    if obj.seed in erd.meta_.get("train_seeds", []):
        raise ConfigurationError(f"ERD model was trained on the phantom with seed {obj.seed}")
    cfg = SamplingConfig(initial_fraction, stop_fraction, seed, snapshot_stride=snapshot_stride)
    rows = []
    try:
        result = run_slads(obj, erd, tier, cfg=cfg, on_step=rows.append)
    finally:
        write_trace(out / "trace.csv", rows)
    n_labels = int(obj.n_labels or tier.classes_.max())
    write_panels(out, result, obj.truth, n_labels)
    for k, mask, recon in result.snapshots:
        (out / "snapshots").mkdir(exist_ok=True)
        io.write_label_image(out / "snapshots" / f"mask_{k:07d}.pgm", mask.astype(np.int64), 1)
        io.write_label_image(out / "snapshots" / f"recon_{k:07d}.pgm", recon, n_labels)
    click.echo(f"TD {result.total_distortion(obj.truth):.6g} after {len(rows)} measurements")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run the full experiment described by this file.")
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Summarize an existing run directory instead.")
@_command
def report(config_path, run_dir, seed, out):
    """Run a configured experiment, or summarize a finished one, as JSON."""
    if bool(config_path) == bool(run_dir):
        raise ConfigurationError("give exactly one of --config or --run-dir")
    if run_dir:
        summary = report_from_run_dir(run_dir)
    else:
        cfg = ExperimentConfig.load(config_path)
        if seed:
            cfg = cfg.replace(seed=seed)
        rep = run_experiment(cfg, out)
        summary = {"final_td": rep.final_td, "random_td": rep.random_td,
                   "misclassification_rate": rep.misclassification_rate,
                   "stage_seconds": rep.stage_seconds, "out": str(out)}
    click.echo(json.dumps(summary, indent=1, sort_keys=True))


@main.command()
@click.option("--detector", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--classifier", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--spectra", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV, one spectrum per row (a library CSV also works).")
@_command
def classify(detector, classifier, spectra, seed, out):
    """Label spectra (0 = ill); write labels.csv with index,label,sigma2,max_prob."""
    tier = TwoTierClassifier.from_fitted(NNRDetector.load(detector), CNNClassifier.load(classifier))
    X = io.read_spectra_csv(spectra)
    labels, s2, maxprob = tier.predict_details(X)
    with open(out / "labels.csv", "w") as fh:
        fh.write("index,label,sigma2,max_prob\n")
        for i, (lab, v, mp) in enumerate(zip(labels, s2, maxprob)):
            fh.write(f"{i},{lab},{v:.10g},{'' if np.isnan(mp) else f'{mp:.10g}'}\n")
    counts = np.bincount(labels, minlength=tier.classes_.max() + 1)
    click.echo("label counts " + " ".join(f"{i}:{c}" for i, c in enumerate(counts)))


if __name__ == "__main__":
    main()
