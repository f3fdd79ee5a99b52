import numpy as np
import pytest

from raretrip import evaluator
from raretrip.models import RaretripConfigError, ManifestError
from raretrip.models._utils import make_rng
from raretrip.evaluator import (
    ScoredFrame,
    EvalConfig,
    roc_and_auc,
    recall_at_specificity,
    threshold_metrics,
    event_detection,
    evaluate_scores,
    aggregate_reports,
    format_mean_std,
    cross_validate,
    imbalance_sweep,
    parameter_sweep,
    run_jobs,
    check_imbalance_degrees,
    DEFAULT_IMBALANCE_DEGREES,
)
from raretrip.trainer import TrainConfig
from raretrip.sampler import FramePool
from raretrip.synthdata import GeneratorConfig, generate_dataset, split_by_procedure

from conftest import hand_manifest


def _scored(pairs, event_id = 0):
    return [
        ScoredFrame(0, i, label, score, event_id if label == 1 else None)
        for i, (score, label) in enumerate(pairs)
    ]
pass


def _pairwise_auc(scores, labels):
    positives, negatives = scores[labels == 1], scores[labels == 0]
    wins = (positives[:, None] > negatives[None, :]).sum() + 0.5 * (positives[:, None] == negatives[None, :]).sum()
    return wins / (len(positives) * len(negatives))
pass


def _hand_list():
    # Ten negatives at 0.0, 0.1, ..., 0.9 and two positives at 0.85 and 0.55
    return _scored([(i / 10, 0) for i in range(10)] + [(0.85, 1), (0.55, 1)])
pass


def _tiny_train_config(**overrides):
    values = dict(
        epochs = 1, classifier_epochs = 1, batch_size = 8, positive_fraction = 0.5,
        learning_rate = 0.01, augment = False,
    )
    values.update(overrides)
    return TrainConfig(**values)
pass


def test_auc_examples():
    _, area = roc_and_auc(_scored([(0.9, 1), (0.8, 1), (0.1, 0)]))
    assert area == 1.0
    _, area = roc_and_auc(_scored([(0.4, 1), (0.4, 0), (0.4, 0), (0.4, 1)]))
    assert area == pytest.approx(0.5)
    with pytest.raises(ValueError):
        roc_and_auc(_scored([(0.4, 0), (0.3, 0)]))
pass


def test_auc_matches_pairwise_oracle_with_ties():
    for seed in range(100):
        rng = make_rng(seed)
        labels = (rng.random(200) < 0.3).astype(int)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(200), 1)
        curve, area = roc_and_auc(_scored(zip(scores, labels)))
        assert abs(area - _pairwise_auc(scores, labels)) <= 1e-9
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        _, inverted = roc_and_auc(_scored(zip(1 - scores, labels)))
        assert inverted == pytest.approx(1 - area, abs = 1e-9)
    pass
pass


def test_monotone_transform_keeps_roc_and_recall():
    rng = make_rng(3)
    labels = (rng.random(300) < 0.2).astype(int)
    scores = rng.random(300)
    base, transformed = _scored(zip(scores, labels)), _scored(zip(scores ** 3, labels))
    curve, area = roc_and_auc(base)
    other, other_area = roc_and_auc(transformed)
    assert np.array_equal(curve.fpr, other.fpr) and np.array_equal(curve.tpr, other.tpr)
    assert other_area == pytest.approx(area, abs = 1e-12)
    for target in (0.8, 0.9, 0.95):
        assert recall_at_specificity(base, target).recall == recall_at_specificity(transformed, target).recall
    pass
pass


def test_roc_csv(tmp_path):
    curve, _ = roc_and_auc(_scored([(0.9, 1), (0.2, 0), (0.6, 1), (0.4, 0)]))
    lines = curve.to_csv(tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert len(lines) == len(curve) + 1
pass


def test_recall_at_specificity_hand_list():
    point = recall_at_specificity(_hand_list(), 0.90)
    assert point.threshold == pytest.approx(0.8)
    assert point.recall == 0.5
    assert point.specificity == pytest.approx(0.9)
    point = recall_at_specificity(_hand_list(), 0.80)
    assert point.threshold == pytest.approx(0.7)
    assert point.recall == 0.5
    point = recall_at_specificity(_hand_list(), 1.0)
    assert point.threshold == pytest.approx(0.9)
    assert point.recall == 0.0
pass


def test_recall_at_specificity_properties():
    perfect = _scored([(0.1, 0), (0.2, 0), (0.3, 0), (0.8, 1), (0.9, 1)])
    for target in (0.8, 0.9, 0.95, 1.0):
        assert recall_at_specificity(perfect, target).recall == 1.0
    rng = make_rng(8)
    scored = _scored(zip(rng.random(400), (rng.random(400) < 0.25).astype(int)))
    recalls = [recall_at_specificity(scored, t).recall for t in (0.5, 0.7, 0.8, 0.9, 0.95, 0.99)]
    assert recalls == sorted(recalls, reverse = True)
    for t in (0.5, 0.8, 0.95):
        assert recall_at_specificity(scored, t).specificity >= t
    pass
pass


def test_recall_at_specificity_errors():
    with pytest.raises(ValueError):
        recall_at_specificity(_scored([(0.1, 0), (0.2, 0)]), 0.9)
    with pytest.raises(ValueError):
        recall_at_specificity(_scored([(0.9, 1)]), 0.9)
    for target in (0.0, 1.5):
        with pytest.raises(RaretripConfigError):
            recall_at_specificity(_hand_list(), target)
    pass
pass


def test_threshold_metrics():
    scored = _scored([(0.9, 1), (0.8, 0), (0.1, 0), (0.2, 1)])
    metrics = threshold_metrics(scored, 0.5)
    assert (metrics.tp, metrics.fp, metrics.tn, metrics.fn) == (1, 1, 1, 1)
    assert metrics.accuracy == 0.5 and metrics.precision == 0.5
    nothing = threshold_metrics(scored, 1.0)
    assert (nothing.sensitivity, nothing.specificity, nothing.precision) == (0.0, 1.0, 0.0)
    everything = threshold_metrics(scored, 0.0)
    assert (everything.sensitivity, everything.specificity) == (1.0, 0.0)
    with pytest.raises(RaretripConfigError):
        threshold_metrics(scored, 1.5)
pass


def test_scored_frame_validation():
    with pytest.raises(ValueError):
        ScoredFrame(0, 0, 2, 0.5)
    with pytest.raises(ValueError):
        ScoredFrame(0, 0, 1, 0.5)
    with pytest.raises(ValueError):
        ScoredFrame(0, 0, 0, 0.5, event_id = 3)
pass


def _event_scores(manifest, positive_scores, negative_scores):
    scored = []
    for event in manifest.events:
        for f, score in zip(event.frame_indices, positive_scores[event.event_id]):
            scored.append(ScoredFrame(event.procedure_id, f, 1, score, event.event_id))
    pass
    for i, score in enumerate(negative_scores):
        scored.append(ScoredFrame(100, i, 0, score))
    return scored
pass


def test_event_detection_examples():
    manifest = hand_manifest(2, 0, frames_per_event = 6)
    positive_scores = {0 : [0.1, 0.1, 0.95, 0.1, 0.1, 0.1], 1 : [0.5] * 6}
    scored = _event_scores(manifest, positive_scores, [i / 10 for i in range(10)])
    detection = event_detection(scored, 0.90, manifest.events)
    assert detection.threshold == pytest.approx(0.8)
    assert detection.detected == {0 : True, 1 : False}
    assert detection.rate == 0.5
    assert detection.rate >= recall_at_specificity(scored, 0.90).recall
    assert detection.rows()[0] == [90, "overall", "all", 1, 2, 0.5]
    assert detection.size_counts == {"small" : (1, 1), "medium" : (0, 1)}
pass


def test_event_rate_is_the_weighted_mean_of_class_rates():
    manifest = hand_manifest(20, 0, frames_per_event = 3)
    rng = make_rng(20)
    positive_scores = {e.event_id : rng.random(3) for e in manifest.events}
    scored = _event_scores(manifest, positive_scores, rng.random(200))
    for target in (0.8, 0.9, 0.95):
        detection = event_detection(scored, target, manifest.events)
        for counts in (detection.size_counts, detection.morphology_counts):
            assert sum(n for _, n in counts.values()) == 20
            weighted = sum((d / n) * n for d, n in counts.values()) / 20
            assert weighted == pytest.approx(detection.rate)
        pass
    pass
pass


def test_event_detection_errors():
    manifest = hand_manifest(2, 0, frames_per_event = 2)
    scored = _event_scores(manifest, {0 : [0.9, 0.8], 1 : [0.1, 0.2]}, [0.3, 0.4])
    with pytest.raises(ManifestError, match = "event 1"):
        event_detection([s for s in scored if s.event_id != 1], 0.9, manifest.events)
    stray = scored + [ScoredFrame(5, 0, 1, 0.7, 99)]
    with pytest.raises(ManifestError, match = "99"):
        event_detection(stray, 0.9, manifest.events)
pass


def test_evaluate_scores_warns_on_a_thin_negative_set(monkeypatch):
    warnings = []
    monkeypatch.setattr(evaluator.logger, "warning_once", warnings.append, raising = False)
    manifest = hand_manifest(2, 0, frames_per_event = 2)
    scored = _event_scores(manifest, {0 : [0.9, 0.8], 1 : [0.1, 0.7]}, [0.3, 0.4, 0.2])
    report = evaluate_scores(scored, manifest.events, EvalConfig(specificity_targets = (0.9,)))
    assert len(warnings) == 1 and "0.8 negatives per positive" in warnings[0]
    assert report.num_positives == 4 and report.num_negatives == 3
    scalars = report.scalars()
    assert list(scalars) == [
        "auc", "accuracy", "sensitivity", "specificity", "precision", "recall_at_90", "event_rate_at_90",
    ]
    assert scalars["auc"] == pytest.approx(_pairwise_auc(
        np.array([s.score for s in scored]), np.array([s.label for s in scored])
    ))
pass


def test_eval_config():
    config = EvalConfig()
    assert (config.k, config.specificity_targets, config.min_negative_ratio) == (5, (0.95, 0.90, 0.80), 100.0)
    assert EvalConfig.from_dict(config.to_dict()) == config
    for bad in (dict(k = 1), dict(specificity_targets = ()), dict(specificity_targets = (1.2,)),
                dict(threshold = 2.0), dict(fold = 5)):
        with pytest.raises(RaretripConfigError):
            EvalConfig(**bad)
    pass
    with pytest.raises(RaretripConfigError):
        EvalConfig.from_dict({"folds" : 5})
pass


def test_aggregate_and_formatting():
    assert format_mean_std(0.9294, 0.0187) == "92.94 ± 1.87"
    manifest = hand_manifest(2, 0, frames_per_event = 2)
    scored = _event_scores(manifest, {0 : [0.9, 0.8], 1 : [0.1, 0.7]}, [0.3, 0.4, 0.2])
    report = evaluate_scores(scored, manifest.events, EvalConfig(min_negative_ratio = 0))
    aggregate = aggregate_reports([report, report])
    assert all(v == 0.0 for v in aggregate.std.values())
    assert aggregate.mean["auc"] == report.auc
    with pytest.raises(ValueError):
        aggregate_reports([])
pass


def test_cross_validation_structure(tiny_dataset, tmp_path):
    manifest, store = tiny_dataset
    result = cross_validate(manifest, store, _tiny_train_config(), EvalConfig(min_negative_ratio = 0))
    assert len(result.reports) == 5
    for fold, report in enumerate(result.reports):
        assert report.fold == fold
        assert len(report.test_procedures) == 2
        assert not set(report.test_procedures) & set(report.train_procedures)
        assert len(report.train_procedures) == 8
        assert 0.0 <= report.auc <= 1.0
    pass
    all_tested = sorted(p for r in result.reports for p in r.test_procedures)
    assert all_tested == manifest.procedure_ids

    lines = result.to_csv(tmp_path / "cv.csv").read_text(encoding = "utf-8").splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("fold,auc,accuracy")
    assert lines[-1].startswith("mean ± std,")
pass


def test_fold_jobs_reject_leakage_and_name_the_fold():
    manifest = hand_manifest(2, 3)
    config, eval_config = _tiny_train_config(), EvalConfig()
    with pytest.raises(ManifestError, match = r"training procedures \[1\]"):
        run_jobs(evaluator._fold_job, [(config, eval_config, 0, (0, 1), (1, 2))], manifest, None)
    # Event-free training procedures cannot be trained on
    with pytest.raises(ManifestError, match = "fold 3"):
        run_jobs(evaluator._fold_job, [(config, eval_config, 3, (2, 3, 4), (0, 1))], manifest, None)
pass


def test_imbalance_sweep_structure(tiny_dataset, tmp_path):
    manifest, store = tiny_dataset
    result = imbalance_sweep(
        manifest, store, _tiny_train_config(), degrees = (1, 2), repeats = 2,
        eval_config = EvalConfig(min_negative_ratio = 0),
    )
    assert len(result.cells) == 2 * 2 * 2
    assert {c.method for c in result.cells} == {"cross_entropy_baseline", "triplet_batch_all"}
    for cell in result.cells:
        assert cell.num_negatives == cell.value * cell.num_positives
        assert 0.0 <= cell.auc <= 1.0
    pass
    table = result.table()
    assert len(table) == 4
    assert all(row[4] == 2 for row in table)
    assert result.header == ["degree", "method", "auc_mean", "auc_std", "runs", "auc"]
    assert len(result.to_csv(tmp_path / "sweep.csv").read_text(encoding = "utf-8").splitlines()) == 5
pass


def test_imbalance_sweep_errors(tiny_dataset):
    manifest, store = tiny_dataset
    with pytest.raises(RaretripConfigError, match = "available ratio"):
        imbalance_sweep(manifest, store, _tiny_train_config(), degrees = (1, 100), repeats = 1)
    with pytest.raises(RaretripConfigError):
        imbalance_sweep(manifest, store, _tiny_train_config(), degrees = (0,), repeats = 1)
    with pytest.raises(RaretripConfigError):
        imbalance_sweep(manifest, store, _tiny_train_config(), degrees = (1,), repeats = 0)
pass


def test_parameter_sweep(tiny_dataset):
    manifest, store = tiny_dataset
    eval_config = EvalConfig(k = 2, min_negative_ratio = 0)
    result = parameter_sweep(manifest, store, _tiny_train_config(), "embedding", [None, 4], eval_config)
    assert [(c.value, c.repeat) for c in result.cells] == [(None, 0), (None, 1), (4, 0), (4, 1)]
    assert [row[0] for row in result.table()] == ["none", 4]
    with pytest.raises(RaretripConfigError):
        parameter_sweep(manifest, store, _tiny_train_config(), "depth", [1], eval_config)
    with pytest.raises(RaretripConfigError):
        parameter_sweep(manifest, store, _tiny_train_config(), "margin", [], eval_config)
    with pytest.raises(RaretripConfigError):
        parameter_sweep(manifest, store, _tiny_train_config(), "margin", [0.2, -1.0], eval_config)
pass


def test_worker_pool_matches_sequential_run(tiny_dataset):
    manifest, store = tiny_dataset
    eval_config = EvalConfig(k = 2, min_negative_ratio = 0)
    sequential = cross_validate(manifest, store, _tiny_train_config(), eval_config, jobs = 1)
    pooled     = cross_validate(manifest, store, _tiny_train_config(), eval_config, jobs = 2)
    assert [r.test_procedures for r in pooled.reports] == [r.test_procedures for r in sequential.reports]
    for a, b in zip(sequential.reports, pooled.reports):
        assert a.auc == pytest.approx(b.auc, abs = 1e-9)
    pass
pass


def test_default_dataset_reaches_every_imbalance_degree():
    manifest, _ = generate_dataset(GeneratorConfig())
    assignment = split_by_procedure(manifest, EvalConfig().k, TrainConfig().seed)
    for fold in range(assignment.k):
        pool = FramePool.from_manifest(manifest, assignment.train_procedures(fold))
        assert pool.num_negatives >= max(DEFAULT_IMBALANCE_DEGREES) * pool.num_positives
        check_imbalance_degrees(pool, DEFAULT_IMBALANCE_DEGREES)
    pass
    with pytest.raises(RaretripConfigError, match = "available ratio"):
        check_imbalance_degrees(pool, (pool.num_negatives // pool.num_positives + 1,))
pass
