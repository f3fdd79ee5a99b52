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

"""
Experiment driver.

    raretrip --config experiment.json --out runs/cv eval
    raretrip --config experiment.json --out runs/margins --jobs 4 sweep --kind margin
    raretrip --config experiment.json --out runs/cam cam --checkpoint runs/train/model.trm

Every run directory gets a run.json provenance record and is never written twice.
Exit status: 0 success, 2 configuration error, 3 runtime error.
"""

__all__ = [
    "SweepConfig",
    "ExperimentConfig",
    "build_parser",
    "load_experiment_config",
    "cmd_gen_data",
    "cmd_train",
    "cmd_eval",
    "cmd_sweep",
    "cmd_cam",
    "main",
]

import sys
import json
import hashlib
import argparse
import platform
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import sklearn

from .models._utils import (
    __version__,
    RaretripConfigError,
    default_jobs,
)
from .synthdata import (
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    write_dataset,
    split_by_procedure,
)
from .sampler import FramePool
from .trainer import METHODS, TrainConfig, train
from .evaluator import (
    DEFAULT_IMBALANCE_DEGREES,
    EVENT_HEADER,
    EvalConfig,
    cross_validate,
    imbalance_sweep,
    parameter_sweep,
    recall_at_specificity,
    score_manifest,
)
from .cam import GALLERY_KINDS, cam_for_frames, export_overlay, gallery, localization_hit, localization_rate, upsample
from .save import save_checkpoint, load_checkpoint, write_csv, write_json

SWEEP_KINDS = ("margin", "embedding", "imbalance")
RUN_RECORD  = "run.json"


def _reject_unknown(cls, data : Dict, section : str):
    if not isinstance(data, dict):
        raise RaretripConfigError(f"Raretrip: config section '{section}' must be an object.")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise RaretripConfigError(f"Raretrip: unknown keys {unknown} in config section '{section}'.")
pass


@dataclass
class SweepConfig:
    margins : Tuple[float, ...] = field(
        default = (0.1, 0.2, 0.5, 1.0),
        metadata = {"help" : "Margins for the margin sweep."},
    )
    embedding_sizes : Tuple[Optional[int], ...] = field(
        default = (None, 16, 32, 64),
        metadata = {"help" : "Embedding head widths for the embedding sweep. None means no extra layer."},
    )
    degrees : Tuple[int, ...] = field(
        default = DEFAULT_IMBALANCE_DEGREES,
        metadata = {"help" : "Negatives per positive for the imbalance sweep."},
    )
    repeats : int = field(
        default = 10,
        metadata = {"help" : "Negative subsamples per imbalance degree."},
    )
    methods : Tuple[str, ...] = field(
        default = ("cross_entropy_baseline", "triplet_batch_all"),
        metadata = {"help" : "Methods compared by the imbalance sweep."},
    )

    def __post_init__(self):
        self.margins         = tuple(float(m) for m in self.margins)
        self.embedding_sizes = tuple(None if e is None else int(e) for e in self.embedding_sizes)
        self.degrees         = tuple(int(d) for d in self.degrees)
        self.methods         = tuple(self.methods)
        if any(not (m >= 0) for m in self.margins):
            raise RaretripConfigError(f"Raretrip: sweep margins must be >= 0, got {self.margins}.")
        if any(e is not None and e < 1 for e in self.embedding_sizes):
            raise RaretripConfigError(f"Raretrip: embedding sizes must be positive, got {self.embedding_sizes}.")
        if any(d < 1 for d in self.degrees):
            raise RaretripConfigError(f"Raretrip: imbalance degrees must be >= 1, got {self.degrees}.")
        if self.repeats < 1:
            raise RaretripConfigError(f"Raretrip: repeats must be >= 1, got {self.repeats}.")
        for method in self.methods:
            if method not in METHODS:
                raise RaretripConfigError(f"Raretrip: unknown sweep method '{method}'. Choose from {METHODS}.")
        pass
    pass

    def to_dict(self) -> Dict:
        return {f.name : list(getattr(self, f.name)) if f.name != "repeats" else self.repeats for f in fields(self)}
    pass
pass


@dataclass
class ExperimentConfig:
    generator : GeneratorConfig = field(default_factory = GeneratorConfig)
    train     : TrainConfig     = field(default_factory = TrainConfig)
    eval      : EvalConfig      = field(default_factory = EvalConfig)
    sweep     : SweepConfig     = field(default_factory = SweepConfig)
    seed      : Optional[int]   = field(
        default = None,
        metadata = {"help" : "Overrides the generator and training seeds when set."},
    )
    out       : str = field(
        default = "runs/raretrip",
        metadata = {"help" : "Run directory, unless --out is given."},
    )

    def __post_init__(self):
        if self.seed is not None:
            self.seed = int(self.seed)
            if not (0 <= self.seed < 2 ** 64):
                raise RaretripConfigError(f"Raretrip: seed must be an unsigned 64-bit integer, got {self.seed}.")
            self.generator = replace(self.generator, seed = self.seed)
            self.train     = replace(self.train,     seed = self.seed)
        pass
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "ExperimentConfig":
        _reject_unknown(cls, data, "root")
        sections = {}
        for name, section in (("generator", GeneratorConfig), ("train", TrainConfig),
                              ("eval", EvalConfig), ("sweep", SweepConfig)):
            values = data.get(name, {})
            _reject_unknown(section, values, name)
            sections[name] = section(**values)
        pass
        return cls(**sections, seed = data.get("seed"), out = data.get("out", "runs/raretrip"))
    pass

    def to_dict(self) -> Dict:
        return {
            "generator" : self.generator.to_dict(),
            "train"     : self.train.to_dict(),
            "eval"      : {**self.eval.to_dict(), "specificity_targets" : list(self.eval.specificity_targets)},
            "sweep"     : self.sweep.to_dict(),
            "seed"      : self.seed,
        }
    pass

    def sha256(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys = True, separators = (",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()
    pass
pass


def load_experiment_config(path : Optional[str], seed : Optional[int] = None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as error:
            raise RaretripConfigError(f"Raretrip: cannot read config {path}: {error}") from error
        except json.JSONDecodeError as error:
            raise RaretripConfigError(f"Raretrip: config {path} is not valid JSON: {error}") from error
    pass
    if seed is not None:
        data = {**data, "seed" : seed}
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as error:
        raise RaretripConfigError(f"Raretrip: invalid config {path}: {error}") from error
pass


# =============================================
# Commands. Each returns the artifacts it wrote, relative to the run directory.
def _load_data(args, config : ExperimentConfig):
    if args.data is not None:
        return load_dataset(args.data)
    return generate_dataset(config.generator)
pass


def _held_out_split(manifest, config : ExperimentConfig):
    assignment = split_by_procedure(manifest, config.eval.k, config.train.seed)
    fold = config.eval.fold
    return assignment, assignment.train_procedures(fold), assignment.test_procedures(fold)
pass


def cmd_gen_data(args, config : ExperimentConfig, out : Path) -> List[str]:
    manifest, store = generate_dataset(config.generator)
    write_dataset(manifest, store, out / "dataset", verbose = config.train.verbose)
    write_json(out / "statistics.json", manifest.statistics())
    return ["dataset/", "statistics.json"]
pass


def cmd_train(args, config : ExperimentConfig, out : Path) -> List[str]:
    manifest, store = _load_data(args, config)
    assignment, train_ids, test_ids = _held_out_split(manifest, config)
    model, history = train(
        config.train,
        FramePool.from_manifest(manifest, train_ids),
        store,
        val_split = manifest.subset(test_ids),
    )
    save_checkpoint(model, out / "model.trm", extra = {
        "method"           : config.train.method,
        "fold"             : config.eval.fold,
        "train_procedures" : list(train_ids),
        "test_procedures"  : list(test_ids),
    })
    history.to_csv(out / "history.csv")
    write_json(out / "folds.json", assignment.to_dict())
    return ["model.trm", "history.csv", "folds.json"]
pass


def cmd_eval(args, config : ExperimentConfig, out : Path) -> List[str]:
    manifest, store = _load_data(args, config)
    result = cross_validate(manifest, store, config.train, config.eval, jobs = args.jobs)
    artifacts = ["cv.csv", "events.csv", "summary.json"]
    result.to_csv(out / "cv.csv")

    event_rows = []
    for report in result.reports:
        report.roc.to_csv(out / f"roc_fold{report.fold}.csv")
        artifacts.append(f"roc_fold{report.fold}.csv")
        for detection in report.event_detection.values():
            event_rows += [[report.fold] + row for row in detection.rows()]
    pass
    write_csv(out / "events.csv", ("fold",) + EVENT_HEADER, event_rows)

    write_json(out / "summary.json", {
        "method" : config.train.method,
        "folds"  : [
            {
                "fold"             : r.fold,
                "metrics"          : r.scalars(),
                "num_positives"    : r.num_positives,
                "num_negatives"    : r.num_negatives,
                "train_procedures" : list(r.train_procedures),
                "test_procedures"  : list(r.test_procedures),
            }
            for r in result.reports
        ],
        "aggregate" : {
            "mean"      : result.aggregate.mean,
            "std"       : result.aggregate.std,
            "formatted" : result.aggregate.formatted(),
        },
    })
    return artifacts
pass


def cmd_sweep(args, config : ExperimentConfig, out : Path) -> List[str]:
    manifest, store = _load_data(args, config)
    if args.kind == "imbalance":
        result = imbalance_sweep(
            manifest, store, config.train,
            degrees     = config.sweep.degrees,
            repeats     = config.sweep.repeats,
            methods     = config.sweep.methods,
            eval_config = config.eval,
            jobs        = args.jobs,
        )
    else:
        values = config.sweep.margins if args.kind == "margin" else config.sweep.embedding_sizes
        result = parameter_sweep(manifest, store, config.train, args.kind, values, config.eval, jobs = args.jobs)
    pass
    result.to_csv(out / f"sweep_{args.kind}.csv")
    result.cells_to_csv(out / f"sweep_{args.kind}_cells.csv")
    return [f"sweep_{args.kind}.csv", f"sweep_{args.kind}_cells.csv"]
pass


def cmd_cam(args, config : ExperimentConfig, out : Path) -> List[str]:
    if args.checkpoint is None:
        raise RaretripConfigError("Raretrip: the cam command needs --checkpoint.")
    model = load_checkpoint(args.checkpoint)
    manifest, store = _load_data(args, config)
    _, _, test_ids = _held_out_split(manifest, config)

    scored = score_manifest(model, manifest, store, test_ids, config.train.score_batch_size)
    point  = recall_at_specificity(scored, args.specificity)
    kinds  = GALLERY_KINDS if args.frames == "all" else {
        "tp" : ("true_positive",), "fp" : ("false_positive",), "fn" : ("false_negative",),
    }[args.frames]
    selected = gallery(scored, point.threshold, args.per_kind)

    (out / "cam").mkdir(parents = True, exist_ok = True)
    artifacts = []
    for kind in kinds:
        frames = [store.get(s.procedure_id, s.frame_id) for s in selected[kind]]
        if not frames: continue
        refs = [(s.procedure_id, s.frame_id) for s in selected[kind]]
        for frame, activation in zip(frames, cam_for_frames(model, frames, refs = refs)):
            stem = f"cam/{kind}_proc{frame.procedure_id}_frame{frame.frame_index}"
            export_overlay(frame, upsample(activation, frame.pixels.shape[1:]), out / f"{stem}.ppm")
            activation.to_csv(out / f"{stem}.csv")
            artifacts += [f"{stem}.ppm", f"{stem}.csv"]
        pass
    pass

    # Localization over every true positive at the operating point
    rows, hits = [], []
    true_positives = gallery(scored, point.threshold)["true_positive"]
    true_positives.sort(key = lambda s: (s.procedure_id, s.frame_id))
    for start in range(0, len(true_positives), config.train.score_batch_size):
        chunk  = true_positives[start : start + config.train.score_batch_size]
        frames = [store.get(s.procedure_id, s.frame_id) for s in chunk]
        for s, frame, activation in zip(chunk, frames, cam_for_frames(model, frames)):
            hit = localization_hit(upsample(activation, frame.pixels.shape[1:]), frame.mask, args.dilation)
            hits.append(hit)
            rows.append([s.procedure_id, s.frame_id, s.event_id, s.score, hit])
        pass
    pass
    write_csv(out / "localization.csv", ("procedure_id", "frame_index", "event_id", "score", "hit"), rows)
    write_json(out / "localization.json", {
        "target_specificity" : point.target_specificity,
        "threshold"          : point.threshold,
        "recall"             : point.recall,
        "true_positives"     : len(hits),
        "localization_rate"  : localization_rate(hits),
        "dilation_px"        : args.dilation,
    })
    return artifacts + ["localization.csv", "localization.json"]
pass

COMMANDS = {
    "gen-data" : cmd_gen_data,
    "train"    : cmd_train,
    "eval"     : cmd_eval,
    "sweep"    : cmd_sweep,
    "cam"      : cmd_cam,
}
# =============================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog = "raretrip",
        description = "Triplet-loss training and clinical evaluation for rare events in image sequences.",
    )
    parser.add_argument("--config", type = str, default = None, help = "JSON experiment config. Defaults are used for missing keys.")
    parser.add_argument("--seed",   type = int, default = None, help = "Overrides the seeds of the config.")
    parser.add_argument("--out",    type = str, default = None, help = "Run directory. Must be new or empty.")
    parser.add_argument("--jobs",   type = int, default = None, help = "Worker processes for folds and sweep cells, default is the number of physical cores.")
    parser.add_argument("--data",   type = str, default = None, help = "Dataset directory written by gen-data, instead of regenerating it.")

    commands = parser.add_subparsers(dest = "command", required = True)
    commands.add_parser("gen-data", help = "Generate and write the synthetic dataset.")
    commands.add_parser("train",    help = "Train one model on every fold but eval.fold.")
    commands.add_parser("eval",     help = "k-fold cross validation by procedure.")

    sweep = commands.add_parser("sweep", help = "Margin, embedding size or imbalance degree sweeps.")
    sweep.add_argument("--kind", type = str, required = True, choices = SWEEP_KINDS)

    cam = commands.add_parser("cam", help = "Class activation map galleries and localization rate.")
    cam.add_argument("--checkpoint",  type = str,   default = None, help = "Checkpoint written by train.")
    cam.add_argument("--frames",      type = str,   default = "all", choices = ["all", "tp", "fp", "fn"])
    cam.add_argument("--per-kind",    type = int,   default = 8, dest = "per_kind", help = "Overlays per gallery, default is 8.")
    cam.add_argument("--specificity", type = float, default = 0.95, help = "Operating point, default is 0.95.")
    cam.add_argument("--dilation",    type = float, default = 2.0, help = "Mask dilation in pixels for a localization hit.")
    return parser
pass


def _prepare_run_directory(out : Path) -> Path:
    """A run goes to a new or empty directory."""
    if (out / RUN_RECORD).exists():
        raise RaretripConfigError(f"Raretrip: {out} already holds a run. Choose a new --out directory.")
    if out.is_dir() and any(out.iterdir()):
        raise RaretripConfigError(
            f"Raretrip: {out} is not empty. It may hold artifacts of an unfinished run. Choose a new --out directory."
        )
    if out.exists() and not out.is_dir():
        raise RaretripConfigError(f"Raretrip: --out {out} is a file, not a directory.")
    try:
        out.mkdir(parents = True, exist_ok = True)
    except OSError as error:
        raise RaretripConfigError(f"Raretrip: cannot create run directory {out}: {error}") from error
    return out
pass


def _provenance(args, config : ExperimentConfig, artifacts : List[str]) -> Dict:
    seed = config.seed if config.seed is not None else config.train.seed
    return {
        "command"       : args.command,
        "options"       : {k : v for k, v in vars(args).items() if k not in ("command", "out", "jobs", "config")},
        "config"        : config.to_dict(),
        "config_sha256" : config.sha256(),
        "seed"          : seed,
        "versions"      : {
            "raretrip"     : __version__,
            "torch"        : torch.__version__,
            "numpy"        : np.__version__,
            "scikit-learn" : sklearn.__version__,
            "python"       : platform.python_version(),
        },
        "artifacts"     : sorted(artifacts),
    }
pass


def _report_error(kind : str, error : BaseException) -> None:
    reason = " ".join(str(error).split()).replace('"', '\\"')
    print(f'raretrip: error kind={kind} type={type(error).__name__} reason="{reason}"', file = sys.stderr)
pass


def main(argv = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_experiment_config(args.config, args.seed)
        if args.jobs is None: args.jobs = default_jobs()
        if args.jobs < 1:
            raise RaretripConfigError(f"Raretrip: --jobs must be positive, got {args.jobs}.")
        out = _prepare_run_directory(Path(args.out if args.out is not None else config.out))
        artifacts = COMMANDS[args.command](args, config, out)
        write_json(out / RUN_RECORD, _provenance(args, config, artifacts))
    except RaretripConfigError as error:
        _report_error("config", error)
        return 2
    except Exception as error:
        _report_error("runtime", error)
        return 3
    pass
    return 0
pass


if __name__ == "__main__":
    sys.exit(main())
pass
