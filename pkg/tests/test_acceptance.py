import json
from dataclasses import replace

import numpy as np
import pytest

from raretrip.cli import main
from raretrip.models._utils import default_jobs
from raretrip.evaluator import EvalConfig, cross_validate, imbalance_sweep, roc_and_auc, score_manifest
from raretrip.sampler import FramePool
from raretrip.synthdata import GeneratorConfig, generate_dataset, split_by_procedure
from raretrip.trainer import TrainConfig, train

# Desk-scale runs on the default synthetic dataset and the default training setup
pytestmark = pytest.mark.slow


@pytest.fixture(scope = "module")
def default_dataset():
    return generate_dataset(GeneratorConfig())
pass


@pytest.fixture(scope = "module")
def cross_validated(default_dataset):
    manifest, store = default_dataset
    return {
        method : cross_validate(manifest, store, replace(TrainConfig(), method = method), EvalConfig(), jobs = default_jobs())
        for method in ("triplet_batch_all", "cross_entropy_baseline")
    }
pass


def test_trainer_beats_chance_on_the_held_out_fold(default_dataset):
    manifest, store = default_dataset
    config = TrainConfig()
    folds = split_by_procedure(manifest, EvalConfig().k, config.seed)
    model, _ = train(config, FramePool.from_manifest(manifest, folds.train_procedures(0)), store)
    _, area = roc_and_auc(score_manifest(model, manifest, store, folds.test_procedures(0), config.score_batch_size))
    assert area > 0.5
pass


def test_triplet_batch_all_beats_the_baseline(cross_validated):
    triplet  = cross_validated["triplet_batch_all"].aggregate.mean["auc"]
    baseline = cross_validated["cross_entropy_baseline"].aggregate.mean["auc"]
    assert triplet >= 0.85
    assert triplet > baseline
pass


def test_events_are_found_more_often_than_frames(cross_validated):
    for report in cross_validated["triplet_batch_all"].reports:
        detection = report.event_detection[0.95]
        for counts in (detection.size_counts, detection.morphology_counts):
            assert sum(d for d, _ in counts.values()) == detection.num_detected
            assert sum(n for _, n in counts.values()) == detection.num_events
        pass
    pass
    mean = cross_validated["triplet_batch_all"].aggregate.mean
    assert mean["event_rate_at_95"] >= mean["recall_at_95"]
pass


def test_triplet_loss_holds_up_under_imbalance(default_dataset):
    manifest, store = default_dataset
    result = imbalance_sweep(
        manifest, store, TrainConfig(), degrees = (10, 100), repeats = 10, jobs = default_jobs(),
    )
    mean = {(value, method) : auc for value, method, auc, *_ in result.table()}
    assert abs(mean[(100, "triplet_batch_all")] - mean[(10, "triplet_batch_all")]) < 0.05
    assert mean[(10, "cross_entropy_baseline")] - mean[(100, "cross_entropy_baseline")] >= 0.05
pass


def test_cam_peaks_fall_on_the_event(tmp_path):
    assert main(["--out", str(tmp_path / "train"), "train"]) == 0
    assert main([
        "--out", str(tmp_path / "cam"), "cam",
        "--checkpoint", str(tmp_path / "train" / "model.trm"), "--specificity", "0.95",
    ]) == 0
    localization = json.loads((tmp_path / "cam" / "localization.json").read_text())
    assert localization["true_positives"] > 0
    assert localization["localization_rate"] >= 0.70
    assert np.isfinite(localization["recall"])
pass
