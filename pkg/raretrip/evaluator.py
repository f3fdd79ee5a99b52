# Copyright 2025-present the Raretrip team. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

__all__ = [
    "ScoredFrame",
    "RocCurve",
    "OperatingPoint",
    "ThresholdMetrics",
    "EventDetection",
    "EvalConfig",
    "EvalReport",
    "AggregateReport",
    "CrossValidationResult",
    "SweepCell",
    "SweepResult",
    "roc_and_auc",
    "recall_at_specificity",
    "threshold_metrics",
    "event_detection",
    "score_manifest",
    "evaluate_scores",
    "aggregate_reports",
    "format_mean_std",
    "cross_validate",
    "imbalance_sweep",
    "check_imbalance_degrees",
    "parameter_sweep",
    "run_jobs",
]

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics import auc, confusion_matrix, roc_curve

from .models._utils import (
    logger,
    RaretripConfigError,
    ManifestError,
    child_seed,
    make_rng,
)
from .sampler import FramePool
from .synthdata import (
    SIZE_CLASSES,
    MORPHOLOGY_CLASSES,
    DatasetManifest,
    EventAnnotation,
    FoldAssignment,
    split_by_procedure,
)
from .trainer import TrainConfig, train, score_refs
from .save import write_csv

DEFAULT_SPECIFICITY_TARGETS = (0.95, 0.90, 0.80)
DEFAULT_IMBALANCE_DEGREES   = (1, 10, 25, 50, 100)
SWEEP_KINDS = ("margin", "embedding")


def _percent_key(target : float) -> int:
    return int(round(100 * target))
pass


@dataclass(frozen = True)
class ScoredFrame:
    procedure_id : int
    frame_id     : int
    label        : int
    score        : float
    event_id     : Optional[int] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"Raretrip: frame ({self.procedure_id}, {self.frame_id}) has label {self.label}.")
        if (self.event_id is not None) != (self.label == 1):
            raise ValueError(
                f"Raretrip: frame ({self.procedure_id}, {self.frame_id}) must carry an event id "\
                "iff it is positive."
            )
        pass
    pass
pass


def _arrays(scored : Sequence[ScoredFrame]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.fromiter((s.label for s in scored), dtype = np.int64, count = len(scored))
    scores = np.fromiter((s.score for s in scored), dtype = np.float64, count = len(scored))
    return labels, scores
pass


@dataclass(frozen = True)
class RocCurve:
    fpr        : np.ndarray
    tpr        : np.ndarray
    thresholds : np.ndarray   # a frame is positive when score >= threshold

    def __len__(self): return len(self.fpr)

    def rows(self):
        return [[float(t), float(f), float(p)] for t, f, p in zip(self.thresholds, self.fpr, self.tpr)]
    pass

    def to_csv(self, path):
        return write_csv(path, ("threshold", "fpr", "tpr"), self.rows())
    pass
pass


def roc_and_auc(scored : Sequence[ScoredFrame]) -> Tuple[RocCurve, float]:
    """
    ROC over every distinct score and the trapezoidal area under it.
    Tied scores share one ROC point, which gives them half credit.
    """
    labels, scores = _arrays(scored)
    n_positive = int(labels.sum())
    if n_positive == 0 or n_positive == len(labels):
        raise ValueError(
            f"Raretrip: ROC needs both classes, got {n_positive} positives and "\
            f"{len(labels) - n_positive} negatives."
        )
    pass
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate = False)
    return RocCurve(fpr, tpr, thresholds), float(auc(fpr, tpr))
pass


@dataclass(frozen = True)
class OperatingPoint:
    target_specificity : float
    threshold          : float   # a frame is positive when score > threshold
    recall             : float
    specificity        : float
pass


def recall_at_specificity(scored : Sequence[ScoredFrame], target_specificity : float) -> OperatingPoint:
    """
    The lowest threshold whose specificity reaches the target, which is the
    one with the highest recall. Frames scoring above it are positive.
    """
    if not (0.0 < target_specificity <= 1.0):
        raise RaretripConfigError(f"Raretrip: target specificity must be in (0, 1], got {target_specificity}.")
    labels, scores = _arrays(scored)
    negatives = np.sort(scores[labels == 0])
    positives = scores[labels == 1]
    if len(negatives) == 0:
        raise ValueError("Raretrip: recall at specificity needs negative frames.")
    if len(positives) == 0:
        raise ValueError("Raretrip: recall is undefined without positive frames.")
    pass

    # Smallest number of negatives that must fall at or below the threshold
    needed = max(1, int(math.ceil(target_specificity * len(negatives) - 1e-9)))
    threshold = float(negatives[needed - 1])
    return OperatingPoint(
        target_specificity = float(target_specificity),
        threshold          = threshold,
        recall             = float(np.mean(positives > threshold)),
        specificity        = float(np.mean(negatives <= threshold)),
    )
pass


@dataclass(frozen = True)
class ThresholdMetrics:
    threshold   : float
    accuracy    : float
    sensitivity : float
    specificity : float
    precision   : float
    tp : int
    fp : int
    tn : int
    fn : int
pass


def threshold_metrics(scored : Sequence[ScoredFrame], threshold : float) -> ThresholdMetrics:
    if not (0.0 <= threshold <= 1.0):
        raise RaretripConfigError(f"Raretrip: threshold must be in [0, 1], got {threshold}.")
    labels, scores = _arrays(scored)
    predicted = (scores > threshold).astype(np.int64)
    tn, fp, fn, tp = (int(x) for x in confusion_matrix(labels, predicted, labels = [0, 1]).ravel())

    nan = float("nan")
    return ThresholdMetrics(
        threshold   = float(threshold),
        accuracy    = (tp + tn) / len(labels) if len(labels) else nan,
        sensitivity = tp / (tp + fn) if (tp + fn) else nan,
        specificity = tn / (tn + fp) if (tn + fp) else nan,
        # Nothing predicted positive counts as precision 0
        precision   = tp / (tp + fp) if (tp + fp) else 0.0,
        tp = tp, fp = fp, tn = tn, fn = fn,
    )
pass


@dataclass
class EventDetection:
    target_specificity : float
    threshold          : float
    detected           : Dict[int, bool]
    size_class         : Dict[int, str]
    morphology_class   : Dict[int, str]

    @property
    def num_events(self) -> int: return len(self.detected)

    @property
    def num_detected(self) -> int: return int(sum(self.detected.values()))

    @property
    def rate(self) -> float:
        return self.num_detected / self.num_events if self.num_events else float("nan")
    pass

    def _counts(self, classes : Dict[int, str], order) -> Dict[str, Tuple[int, int]]:
        counts = {}
        for name in order:
            members = [event_id for event_id, c in classes.items() if c == name]
            if members:
                counts[name] = (sum(self.detected[e] for e in members), len(members))
        pass
        return counts
    pass

    @property
    def size_counts(self) -> Dict[str, Tuple[int, int]]:
        return self._counts(self.size_class, SIZE_CLASSES)
    pass

    @property
    def morphology_counts(self) -> Dict[str, Tuple[int, int]]:
        return self._counts(self.morphology_class, MORPHOLOGY_CLASSES)
    pass

    @property
    def by_size(self) -> Dict[str, float]:
        return {k : d / n for k, (d, n) in self.size_counts.items()}
    pass

    @property
    def by_morphology(self) -> Dict[str, float]:
        return {k : d / n for k, (d, n) in self.morphology_counts.items()}
    pass

    def rows(self):
        spec = _percent_key(self.target_specificity)
        rows = [[spec, "overall", "all", self.num_detected, self.num_events, self.rate]]
        for group, counts in (("size", self.size_counts), ("morphology", self.morphology_counts)):
            for name, (d, n) in counts.items():
                rows.append([spec, group, name, d, n, d / n])
        pass
        return rows
    pass
pass

EVENT_HEADER = ("specificity", "group", "class", "detected", "events", "rate")


def event_detection(
    scored             : Sequence[ScoredFrame],
    target_specificity : float,
    events             : Iterable[EventAnnotation],
) -> EventDetection:
    """
    An event is detected when at least one of its frames scores above the
    recall-at-specificity threshold.
    """
    point = recall_at_specificity(scored, target_specificity)
    events = {event.event_id : event for event in events}

    best = {}
    for frame in scored:
        if frame.label != 1: continue
        if frame.event_id not in events:
            raise ManifestError(
                f"Raretrip: positive frame ({frame.procedure_id}, {frame.frame_id}) "\
                f"maps to unknown event {frame.event_id}."
            )
        best[frame.event_id] = max(best.get(frame.event_id, -math.inf), frame.score)
    pass
    for event_id, event in events.items():
        if len(event.frame_indices) == 0 or event_id not in best:
            raise ManifestError(f"Raretrip: event {event_id} has no scored frames.")
    pass

    return EventDetection(
        target_specificity = point.target_specificity,
        threshold          = point.threshold,
        detected           = {e : bool(best[e] > point.threshold) for e in sorted(events)},
        size_class         = {e : events[e].size_class       for e in sorted(events)},
        morphology_class   = {e : events[e].morphology_class for e in sorted(events)},
    )
pass


@dataclass
class EvalConfig:
    k : int = field(
        default = 5,
        metadata = {"help" : "Folds for cross validation. Whole procedures go to one fold."},
    )
    specificity_targets : Tuple[float, ...] = field(
        default = DEFAULT_SPECIFICITY_TARGETS,
        metadata = {"help" : "Specificities at which recall and event detection are reported."},
    )
    threshold : float = field(
        default = 0.5,
        metadata = {"help" : "Score threshold for accuracy, sensitivity, specificity and precision."},
    )
    min_negative_ratio : float = field(
        default = 100.0,
        metadata = {"help" : "Warn when a test set has fewer negatives per positive than this."},
    )
    fold : int = field(
        default = 0,
        metadata = {"help" : "Held-out fold for single-split runs (train, imbalance sweep, cam)."},
    )

    def __post_init__(self):
        self.specificity_targets = tuple(float(t) for t in self.specificity_targets)
        if self.k < 2:
            raise RaretripConfigError(f"Raretrip: k must be >= 2, got {self.k}.")
        if len(self.specificity_targets) == 0:
            raise RaretripConfigError("Raretrip: at least one specificity target is needed.")
        for target in self.specificity_targets:
            if not (0.0 < target <= 1.0):
                raise RaretripConfigError(f"Raretrip: specificity target {target} is outside (0, 1].")
        if not (0.0 <= self.threshold <= 1.0):
            raise RaretripConfigError(f"Raretrip: threshold must be in [0, 1], got {self.threshold}.")
        if not (self.min_negative_ratio >= 0):
            raise RaretripConfigError("Raretrip: min_negative_ratio must be >= 0.")
        if not (0 <= self.fold < self.k):
            raise RaretripConfigError(f"Raretrip: fold must be in [0, {self.k}), got {self.fold}.")
        pass
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "EvalConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RaretripConfigError(f"Raretrip: unknown eval config keys {unknown}.")
        return cls(**data)
    pass

    def to_dict(self) -> Dict:
        return {f.name : getattr(self, f.name) for f in fields(self)}
    pass
pass


@dataclass
class EvalReport:
    auc                   : float
    metrics               : ThresholdMetrics
    operating_points      : Dict[float, OperatingPoint]
    event_detection       : Dict[float, EventDetection]
    roc                   : RocCurve
    num_positives         : int
    num_negatives         : int
    fold                  : Optional[int] = None
    train_procedures      : Tuple[int, ...] = ()
    test_procedures       : Tuple[int, ...] = ()

    @property
    def recall_at_specificity(self) -> Dict[float, float]:
        return {t : p.recall for t, p in self.operating_points.items()}
    pass

    def scalars(self) -> Dict[str, float]:
        """Flat metric table, the columns of the cross-validation CSV."""
        values = {
            "auc"         : self.auc,
            "accuracy"    : self.metrics.accuracy,
            "sensitivity" : self.metrics.sensitivity,
            "specificity" : self.metrics.specificity,
            "precision"   : self.metrics.precision,
        }
        for target, point in self.operating_points.items():
            values[f"recall_at_{_percent_key(target)}"] = point.recall
        for target, detection in self.event_detection.items():
            values[f"event_rate_at_{_percent_key(target)}"] = detection.rate
        return values
    pass
pass


def score_manifest(
    model,
    manifest      : DatasetManifest,
    store,
    procedure_ids : Optional[Iterable[int]] = None,
    batch_size    : int = 512,
) -> List[ScoredFrame]:
    procedure_ids = manifest.procedure_ids if procedure_ids is None else sorted(procedure_ids)
    refs = [(pid, f) for pid in procedure_ids for f in range(manifest.procedure(pid).num_frames)]
    scores = score_refs(model, store, refs, batch_size)
    index = manifest.label_index
    return [
        ScoredFrame(pid, f, index.get((pid, f), 0), float(score), manifest.event_of(pid, f))
        for (pid, f), score in zip(refs, scores)
    ]
pass


def evaluate_scores(
    scored      : Sequence[ScoredFrame],
    events      : Iterable[EventAnnotation],
    eval_config : Optional[EvalConfig] = None,
    fold        : Optional[int] = None,
) -> EvalReport:
    eval_config = eval_config or EvalConfig()
    labels, _ = _arrays(scored)
    n_positive = int(labels.sum())
    n_negative = len(labels) - n_positive
    if n_positive and n_negative / n_positive < eval_config.min_negative_ratio:
        logger.warning_once(
            f"Raretrip: the test set has {n_negative / n_positive:.1f} negatives per positive, "\
            f"below the floor of {eval_config.min_negative_ratio:g}. Rare-event metrics will look optimistic."
        )
    pass

    events = list(events)
    roc, area = roc_and_auc(scored)
    return EvalReport(
        auc              = area,
        metrics          = threshold_metrics(scored, eval_config.threshold),
        operating_points = {t : recall_at_specificity(scored, t) for t in eval_config.specificity_targets},
        event_detection  = {t : event_detection(scored, t, events) for t in eval_config.specificity_targets},
        roc              = roc,
        num_positives    = n_positive,
        num_negatives    = n_negative,
        fold             = fold,
    )
pass


@dataclass
class AggregateReport:
    mean : Dict[str, float]
    std  : Dict[str, float]

    def formatted(self) -> Dict[str, str]:
        return {k : format_mean_std(self.mean[k], self.std[k]) for k in self.mean}
    pass
pass


def aggregate_reports(reports : Sequence[EvalReport]) -> AggregateReport:
    """Mean and population standard deviation of every scalar metric over folds."""
    if len(reports) == 0:
        raise ValueError("Raretrip: no reports to aggregate.")
    table = [r.scalars() for r in reports]
    keys = list(table[0])
    values = {k : np.array([row[k] for row in table], dtype = np.float64) for k in keys}
    return AggregateReport(
        mean = {k : float(np.mean(v)) for k, v in values.items()},
        std  = {k : float(np.std (v)) for k, v in values.items()},
    )
pass


def format_mean_std(mean : float, std : float) -> str:
    """0.9294, 0.0187 -> '92.94 ± 1.87'."""
    return f"{100 * mean:.2f} ± {100 * std:.2f}"
pass


# =============================================
# Job pool
_WORKER_DATA : Dict[str, Any] = {}

def _worker_init(manifest, store) -> None:
    torch.set_num_threads(1)
    _WORKER_DATA["manifest"] = manifest
    _WORKER_DATA["store"]    = store
pass


def run_jobs(function : Callable, jobs : Sequence, manifest, store, n_workers : int = 1) -> List:
    """
    Runs function(job) for every job, returning results in job order.
    Workers receive the manifest and frame store once through the initializer.
    """
    n_workers = max(1, min(int(n_workers or 1), len(jobs)))
    if n_workers == 1:
        _worker_init(manifest, store)
        try:
            return [function(job) for job in jobs]
        finally:
            _WORKER_DATA.clear()
    pass
    with ProcessPoolExecutor(
        max_workers = n_workers,
        mp_context  = multiprocessing.get_context("spawn"),
        initializer = _worker_init,
        initargs    = (manifest, store),
    ) as executor:
        return list(executor.map(function, jobs))
    pass
pass


def _reraise_with_fold(error : Exception, fold : int):
    message = f"Raretrip: fold {fold}: {error}"
    try:
        wrapped = type(error)(message)
    except Exception:
        raise error
    raise wrapped from error
pass


def _fold_job(job) -> EvalReport:
    train_config, eval_config, fold, train_ids, test_ids = job
    manifest, store = _WORKER_DATA["manifest"], _WORKER_DATA["store"]
    leaked = set(train_ids) & set(test_ids)
    if leaked:
        raise ManifestError(f"Raretrip: fold {fold} tests on training procedures {sorted(leaked)}.")
    try:
        model, _ = train(train_config, FramePool.from_manifest(manifest, train_ids), store)
        test = manifest.subset(test_ids)
        scored = score_manifest(model, test, store, batch_size = train_config.score_batch_size)
        report = evaluate_scores(scored, test.events, eval_config, fold = fold)
    except Exception as error:
        _reraise_with_fold(error, fold)
    pass
    report.train_procedures = tuple(train_ids)
    report.test_procedures  = tuple(test_ids)
    return report
pass


@dataclass
class CrossValidationResult:
    folds     : FoldAssignment
    reports   : List[EvalReport]
    aggregate : AggregateReport

    def rows(self):
        keys = list(self.aggregate.mean)
        rows = [[r.fold] + [r.scalars()[k] for k in keys] for r in self.reports]
        rows.append(["mean ± std"] + [self.aggregate.formatted()[k] for k in keys])
        return rows
    pass

    @property
    def header(self):
        return ["fold"] + list(self.aggregate.mean)
    pass

    def to_csv(self, path):
        return write_csv(path, self.header, self.rows())
    pass
pass


def cross_validate(
    manifest     : DatasetManifest,
    store,
    train_config : TrainConfig,
    eval_config  : Optional[EvalConfig] = None,
    seed         : Optional[int] = None,
    jobs         : int = 1,
) -> CrossValidationResult:
    """
    Trains one model per fold on the other k - 1 folds and evaluates it on the
    held-out procedures. Every fold trains from the same seed.
    """
    eval_config = eval_config or EvalConfig()
    seed = train_config.seed if seed is None else seed
    assignment = split_by_procedure(manifest, eval_config.k, seed)
    fold_jobs = [
        (train_config, eval_config, fold, assignment.train_procedures(fold), assignment.test_procedures(fold))
        for fold in range(eval_config.k)
    ]
    reports = run_jobs(_fold_job, fold_jobs, manifest, store, jobs)
    return CrossValidationResult(assignment, reports, aggregate_reports(reports))
pass


# =============================================
# Sweeps
@dataclass(frozen = True)
class SweepCell:
    parameter : str
    value     : Any
    method    : str
    repeat    : int
    auc       : float
    num_positives : int = 0
    num_negatives : int = 0
pass


@dataclass
class SweepResult:
    kind  : str
    cells : List[SweepCell]

    def table(self) -> List[List]:
        """One row per (value, method): mean and std of the AUC over repeats or folds."""
        groups : Dict[Tuple, List[float]] = {}
        for cell in self.cells:
            groups.setdefault((cell.value, cell.method), []).append(cell.auc)
        rows = []
        for (value, method), aucs in groups.items():
            aucs = np.array(aucs)
            rows.append([
                "none" if value is None else value, method,
                float(np.mean(aucs)), float(np.std(aucs)), len(aucs),
                format_mean_std(np.mean(aucs), np.std(aucs)),
            ])
        pass
        return rows
    pass

    @property
    def header(self):
        return [self.kind, "method", "auc_mean", "auc_std", "runs", "auc"]
    pass

    def to_csv(self, path):
        return write_csv(path, self.header, self.table())
    pass

    def cells_to_csv(self, path):
        return write_csv(
            path,
            ["parameter", "value", "method", "repeat", "auc", "num_positives", "num_negatives"],
            [[c.parameter, "none" if c.value is None else c.value, c.method, c.repeat, c.auc,
              c.num_positives, c.num_negatives] for c in self.cells],
        )
    pass
pass


def _imbalance_job(job) -> SweepCell:
    train_config, degree, repeat, subsample_seed, train_ids, test_ids = job
    manifest, store = _WORKER_DATA["manifest"], _WORKER_DATA["store"]
    pool = FramePool.from_manifest(manifest, train_ids)
    pool = pool.subsample_negatives(degree * pool.num_positives, make_rng(subsample_seed))
    try:
        model, _ = train(train_config, pool, store)
        scored = score_manifest(model, manifest, store, test_ids, train_config.score_batch_size)
        _, area = roc_and_auc(scored)
    except Exception as error:
        _reraise_with_fold(error, repeat)
    pass
    return SweepCell("degree", degree, train_config.method, repeat, area, pool.num_positives, pool.num_negatives)
pass


def check_imbalance_degrees(pool : FramePool, degrees : Sequence[int]) -> None:
    """Raises unless the pool holds degree negatives per positive for every degree."""
    for degree in degrees:
        if int(degree) != degree or degree < 1:
            raise RaretripConfigError(f"Raretrip: imbalance degree must be a positive integer, got {degree}.")
        if degree * pool.num_positives > pool.num_negatives:
            raise RaretripConfigError(
                f"Raretrip: imbalance degree {degree} needs {degree * pool.num_positives} negatives, "\
                f"the training pool has {pool.num_negatives} "\
                f"(an available ratio of {pool.num_negatives / max(1, pool.num_positives):.2f})."
            )
    pass
pass


def imbalance_sweep(
    manifest     : DatasetManifest,
    store,
    train_config : TrainConfig,
    degrees      : Sequence[int] = DEFAULT_IMBALANCE_DEGREES,
    repeats      : int = 10,
    methods      : Optional[Sequence[str]] = None,
    eval_config  : Optional[EvalConfig] = None,
    jobs         : int = 1,
) -> SweepResult:
    """
    For every imbalance degree (negatives per positive in the training pool)
    and repeat, subsamples the training negatives, trains every method on the
    same subsample and scores the common held-out fold.
    """
    eval_config = eval_config or EvalConfig()
    methods = tuple(methods or ("cross_entropy_baseline", train_config.method))
    methods = tuple(dict.fromkeys(methods))
    if repeats < 1:
        raise RaretripConfigError(f"Raretrip: repeats must be >= 1, got {repeats}.")
    assignment = split_by_procedure(manifest, eval_config.k, train_config.seed)
    train_ids = assignment.train_procedures(eval_config.fold)
    test_ids  = assignment.test_procedures (eval_config.fold)

    pool = FramePool.from_manifest(manifest, train_ids)
    check_imbalance_degrees(pool, degrees)

    sweep_jobs = [
        (replace(train_config, method = method), int(degree), repeat,
         child_seed(train_config.seed, 7, int(degree), repeat), train_ids, test_ids)
        for degree in degrees for repeat in range(repeats) for method in methods
    ]
    return SweepResult("degree", run_jobs(_imbalance_job, sweep_jobs, manifest, store, jobs))
pass


def parameter_sweep(
    manifest     : DatasetManifest,
    store,
    train_config : TrainConfig,
    kind         : str,
    values       : Sequence,
    eval_config  : Optional[EvalConfig] = None,
    jobs         : int = 1,
) -> SweepResult:
    """
    Cross-validates train_config once per value of the margin or of the
    embedding head width (None keeps the pooled features as the embedding).
    """
    if kind not in SWEEP_KINDS:
        raise RaretripConfigError(f"Raretrip: unknown sweep kind '{kind}'. Choose from {SWEEP_KINDS}.")
    if len(values) == 0:
        raise RaretripConfigError(f"Raretrip: the {kind} sweep has no values.")
    eval_config = eval_config or EvalConfig()
    attribute = "margin" if kind == "margin" else "embedding_head"
    # Validate every cell before any work
    configs = [replace(train_config, **{attribute : value}) for value in values]
    assignment = split_by_procedure(manifest, eval_config.k, train_config.seed)

    sweep_jobs = [
        (config, eval_config, fold, assignment.train_procedures(fold), assignment.test_procedures(fold))
        for config in configs for fold in range(eval_config.k)
    ]
    reports = run_jobs(_fold_job, sweep_jobs, manifest, store, jobs)
    cells = [
        SweepCell(kind, getattr(config, attribute), config.method, report.fold, report.auc,
                  report.num_positives, report.num_negatives)
        for (config, *_), report in zip(sweep_jobs, reports)
    ]
    return SweepResult(kind, cells)
pass
