import json

import pytest

from raretrip.cli import ExperimentConfig, SweepConfig, load_experiment_config, main
from raretrip.models import RaretripConfigError

TINY_EXPERIMENT = {
    "generator" : {
        "num_procedures"                : 10,
        "frac_with_events"              : 1.0,
        "events_per_procedure_dist"     : {"1" : 1.0},
        "frames_per_event_dist"         : {"3-4" : 1.0},
        "size_morphology_mix"           : {"small/sessile" : 0.5, "medium/undefined" : 0.5},
        "negative_frames_per_procedure" : 40,
        "frame_size"                    : 16,
    },
    "train" : {
        "epochs"            : 1,
        "classifier_epochs" : 1,
        "batch_size"        : 8,
        "positive_fraction" : 0.5,
        "learning_rate"     : 0.01,
        "augment"           : False,
        "verbose"           : False,
    },
    "eval" : {
        "min_negative_ratio"  : 0,
        "specificity_targets" : [0.8, 0.9],
    },
    "sweep" : {
        "margins"         : [0.1, 0.5],
        "embedding_sizes" : [None, 4],
        "degrees"         : [1, 2],
        "repeats"         : 1,
    },
}


@pytest.fixture
def experiment(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(TINY_EXPERIMENT))
    return str(path)
pass


def _run(experiment, out, *command):
    return main(["--config", experiment, "--out", str(out), "--jobs", "1", *command])
pass


def test_config_sections_and_seed_override(experiment):
    config = load_experiment_config(experiment)
    assert config.generator.num_procedures == 10
    assert config.generator.events_per_procedure_dist == {1 : 1.0}
    assert config.eval.specificity_targets == (0.8, 0.9)
    assert config.sweep.embedding_sizes == (None, 4)
    assert config.sha256() == load_experiment_config(experiment).sha256()

    seeded = load_experiment_config(experiment, seed = 11)
    assert seeded.generator.seed == seeded.train.seed == 11
    assert seeded.sha256() != config.sha256()
    assert ExperimentConfig().train.seed == 3407
pass


@pytest.mark.parametrize("data", [
    {"train" : {"optimizer" : "adam"}},
    {"colour" : True},
    {"eval" : {"k" : 1}},
    {"generator" : "tiny"},
])
def test_bad_configs_are_rejected(tmp_path, data):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(RaretripConfigError):
        load_experiment_config(str(path))
pass


def test_sweep_config_errors():
    for bad in (dict(margins = [-0.1]), dict(degrees = [0]), dict(repeats = 0), dict(methods = ["svm"])):
        with pytest.raises(RaretripConfigError):
            SweepConfig(**bad)
    pass
pass


def test_gen_data_train_eval_and_cam(experiment, tmp_path):
    data = tmp_path / "data"
    assert _run(experiment, data, "gen-data") == 0
    assert (data / "dataset" / "manifest.json").exists()
    record = json.loads((data / "run.json").read_text())
    assert record["command"] == "gen-data"
    assert "dataset/" in record["artifacts"]

    dataset = str(data / "dataset")
    assert main(["--config", experiment, "--out", str(tmp_path / "train"), "--jobs", "1", "--data", dataset, "train"]) == 0
    assert (tmp_path / "train" / "model.trm").exists()
    history = (tmp_path / "train" / "history.csv").read_text().splitlines()
    assert len(history) == 3

    assert main(["--config", experiment, "--out", str(tmp_path / "eval"), "--jobs", "1", "--data", dataset, "eval"]) == 0
    cv = (tmp_path / "eval" / "cv.csv").read_text().splitlines()
    assert len(cv) == 7
    assert cv[-1].startswith("mean ± std,")
    summary = json.loads((tmp_path / "eval" / "summary.json").read_text())
    assert len(summary["folds"]) == 5

    assert main([
        "--config", experiment, "--out", str(tmp_path / "cam"), "--jobs", "1", "--data", dataset,
        "cam", "--checkpoint", str(tmp_path / "train" / "model.trm"), "--per-kind", "2", "--specificity", "0.8",
    ]) == 0
    localization = json.loads((tmp_path / "cam" / "localization.json").read_text())
    assert localization["target_specificity"] == 0.8
    assert "localization_rate" in localization
pass


def test_reruns_give_identical_results(experiment, tmp_path):
    assert _run(experiment, tmp_path / "first", "eval") == 0
    assert _run(experiment, tmp_path / "second", "eval") == 0
    first  = (tmp_path / "first"  / "cv.csv").read_bytes()
    second = (tmp_path / "second" / "cv.csv").read_bytes()
    assert first == second
pass


def test_exit_codes(experiment, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train" : {"optimizer" : "adam"}}))
    assert main(["--config", str(bad), "--out", str(tmp_path / "a"), "--jobs", "1", "gen-data"]) == 2
    assert "kind=config" in capsys.readouterr().err

    assert _run(experiment, tmp_path / "b", "gen-data") == 0
    assert _run(experiment, tmp_path / "b", "gen-data") == 2

    assert _run(experiment, tmp_path / "c", "cam") == 2
    assert main(["--config", experiment, "--out", str(tmp_path / "d"), "--jobs", "0", "gen-data"]) == 2

    missing = str(tmp_path / "no-such-dataset")
    assert main(["--config", experiment, "--out", str(tmp_path / "e"), "--jobs", "1", "--data", missing, "train"]) == 3
    assert "kind=runtime" in capsys.readouterr().err
pass


def test_partial_runs_are_never_overwritten(experiment, tmp_path, capsys):
    missing = str(tmp_path / "no-such-dataset")
    out = tmp_path / "partial"
    assert main(["--config", experiment, "--out", str(out), "--jobs", "1", "--data", missing, "train"]) == 3
    assert not (out / "run.json").exists()
    (out / "history.csv").write_text("epoch,loss\n")
    capsys.readouterr()

    assert _run(experiment, out, "gen-data") == 2
    assert "kind=config" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == ["history.csv"]
    assert (out / "history.csv").read_text() == "epoch,loss\n"

    stray = tmp_path / "stray.txt"
    stray.write_text("x")
    assert _run(experiment, stray, "gen-data") == 2
pass


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["margin", "embedding", "imbalance"])
def test_sweeps(experiment, tmp_path, kind):
    assert _run(experiment, tmp_path / kind, "sweep", "--kind", kind) == 0
    table = (tmp_path / kind / f"sweep_{kind}.csv").read_text().splitlines()
    assert len(table) >= 3
pass
