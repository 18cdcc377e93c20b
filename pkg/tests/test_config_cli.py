import json

import numpy as np
import pytest
from click.testing import CliRunner

from edsslads.cli import ENV_OUT, ENV_THREADS, exit_code_for, main
from edsslads.config import ExperimentConfig
from edsslads.experiment import StageError
from edsslads.nn import ConfigurationError, TrainingError

TINY = dict(size=24, p=128, library_size=8, train_per_phase=4, detector_iter=150,
            classifier_iter=40, calibration_draws=100, samples_per_level=30,
            train_seeds=[1001, 1002], stop_fraction=0.1, initial_fraction=0.02)


def test_config_toml_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=5, phases=4, morphology="blobs", coverage_levels=[0.1, 0.5])
    cfg.save(tmp_path / "c.toml")
    assert ExperimentConfig.load(tmp_path / "c.toml") == cfg


def test_unknown_key_rejected(tmp_path):
    (tmp_path / "c.toml").write_text("version = 1\nsize = 64\nsise = 32\n")
    with pytest.raises(ConfigurationError, match="sise"):
        ExperimentConfig.load(tmp_path / "c.toml")


def test_missing_version_rejected():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"size": 64})


@pytest.mark.parametrize("changes", [
    {"seed": 1001},
    {"size": 4},
    {"morphology": "spirals"},
    {"initial_fraction": 0.5, "stop_fraction": 0.1},
    {"train_per_phase": 24},
    {"size": "big"},
    {"coverage_levels": [0.0, 0.5]},
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigurationError):
        ExperimentConfig(**changes).validate()


def test_exit_code_mapping():
    assert exit_code_for(ConfigurationError("x")) == 2
    assert exit_code_for(TrainingError("x", [1.0])) == 3
    assert exit_code_for(RuntimeError("x")) == 4
    assert exit_code_for(StageError("train-classifier", TrainingError("x", []))) == 3


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """synth -> train-classifier -> train-slads -> run through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = ExperimentConfig(**TINY)
    cfg.save(root / "cfg.toml")
    runner = CliRunner()
    results = {}

    def invoke(name, *args):
        res = runner.invoke(main, list(args), catch_exceptions=False)
        results[name] = res
        return res

    invoke("synth", "synth", "--config", str(root / "cfg.toml"), "--seed", "7", "--out", str(root / "s"))
    invoke("train-classifier", "train-classifier", "--library", str(root / "s/library.csv"),
           "--config", str(root / "cfg.toml"), "--seed", "0", "--out", str(root / "m"))
    invoke("train-slads", "train-slads", "--config", str(root / "cfg.toml"), "--train-seed", "1001",
           "--train-seed", "1002", "--test-object", str(root / "s/object"), "--out", str(root / "e"))
    invoke("run", "run", "--object", str(root / "s/object"), "--erd-model", str(root / "e/erd.json"),
           "--detector", str(root / "m/detector.ck"), "--classifier", str(root / "m/classifier.ck"),
           "--stop-fraction", "0.1", "--initial-fraction", "0.02", "--seed", "3",
           "--out", str(root / "r"))
    return root, results


@pytest.mark.parametrize("stage", ["synth", "train-classifier", "train-slads", "run"])
def test_cli_pipeline_exit_zero(cli_run, stage):
    _, results = cli_run
    assert results[stage].exit_code == 0, results[stage].output


def test_cli_outputs(cli_run):
    root, _ = cli_run
    for name in ("s/library.csv", "s/object/truth.pgm", "m/detector.ck", "m/classifier.ck",
                 "e/erd.json", "e/corpus.bin", "r/trace.csv", "r/reconstruction.pgm",
                 "r/measurements.pgm", "r/truth.pgm", "r/distortion.pgm"):
        assert (root / name).exists(), name
    lines = (root / "r/trace.csv").read_text().splitlines()
    assert lines[0] == "k,x,y,label,sigma2,td"
    assert len(lines) - 1 == round(0.1 * 24 * 24)


def test_cli_report_run_dir(cli_run):
    root, _ = cli_run
    res = CliRunner().invoke(main, ["report", "--run-dir", str(root / "r"), "--out", str(root / "rep")])
    assert res.exit_code == 0, res.output
    summary = json.loads(res.output)
    assert summary["td"] == pytest.approx(summary["trace_final_td"], abs=1e-9)


def test_cli_classify(cli_run):
    root, _ = cli_run
    res = CliRunner().invoke(main, ["classify", "--detector", str(root / "m/detector.ck"),
                                    "--classifier", str(root / "m/classifier.ck"),
                                    "--spectra", str(root / "s/library.csv"), "--out", str(root / "c")])
    assert res.exit_code == 0, res.output
    lines = (root / "c/labels.csv").read_text().splitlines()
    assert lines[0] == "index,label,sigma2,max_prob"
    assert len(lines) == 1 + 2 * 8


def test_cli_rejects_training_on_test_object(cli_run):
    root, _ = cli_run
    res = CliRunner().invoke(main, ["train-slads", "--config", str(root / "cfg.toml"),
                                    "--train-seed", "7", "--test-object", str(root / "s/object"),
                                    "--out", str(root / "bad")])
    assert res.exit_code == 2
    erd = json.loads((root / "e/erd.json").read_text())
    erd["meta"]["train_seeds"].append(7)
    (root / "erd7.json").write_text(json.dumps(erd))
    res = CliRunner().invoke(main, ["run", "--object", str(root / "s/object"),
                                    "--erd-model", str(root / "erd7.json"),
                                    "--detector", str(root / "m/detector.ck"),
                                    "--classifier", str(root / "m/classifier.ck"),
                                    "--out", str(root / "bad2")])
    assert res.exit_code == 2


def test_cli_config_error_exit_2(tmp_path):
    (tmp_path / "c.toml").write_text("version = 1\nbogus = 3\n")
    res = CliRunner().invoke(main, ["report", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path)])
    assert res.exit_code == 2
    res = CliRunner().invoke(main, ["report", "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_cli_training_failure_exit_3(tmp_path):
    cfg = ExperimentConfig(**{**TINY, "detector_learning_rate": 50.0, "detector_iter": 200})
    cfg.save(tmp_path / "c.toml")
    res = CliRunner().invoke(main, ["report", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "o")])
    assert res.exit_code == 3, res.output


def test_cli_runtime_failure_exit_4(tmp_path):
    (tmp_path / "lib.csv").write_text("# L=2,M=1,p=3\nphase,index,c0,c1,c2\n1,0,1,2\n")
    res = CliRunner().invoke(main, ["train-classifier", "--library", str(tmp_path / "lib.csv"),
                                    "--out", str(tmp_path / "o")])
    assert res.exit_code == 4


def test_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "envout"))
    monkeypatch.setenv(ENV_THREADS, "1")
    res = CliRunner().invoke(main, ["synth", "--size", "16", "--p", "64", "--seed", "2"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "envout/library.csv").exists()
    monkeypatch.setenv(ENV_THREADS, "zero")
    res = CliRunner().invoke(main, ["synth", "--size", "16", "--p", "64"])
    assert res.exit_code == 2


def test_out_flag_beats_env(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "envout"))
    res = CliRunner().invoke(main, ["synth", "--size", "16", "--p", "64", "--out", str(tmp_path / "flag")])
    assert res.exit_code == 0
    assert (tmp_path / "flag/library.csv").exists()
    assert not (tmp_path / "envout").exists()


def test_synth_seed_reproducible(tmp_path):
    for name in ("a", "b"):
        CliRunner().invoke(main, ["synth", "--size", "16", "--p", "64", "--seed", "4",
                                  "--out", str(tmp_path / name)])
    assert (tmp_path / "a/object/spectra.bin").read_bytes() == (tmp_path / "b/object/spectra.bin").read_bytes()
    assert np.array_equal(np.loadtxt(tmp_path / "a/library.csv", delimiter=",", skiprows=2),
                          np.loadtxt(tmp_path / "b/library.csv", delimiter=",", skiprows=2))
