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
    "METHODS",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "TrainResult",
    "train",
    "score_frames",
    "score_refs",
]

import math
from dataclasses import dataclass, field, fields, asdict
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from sklearn.metrics import roc_auc_score
from tqdm import tqdm as ProgressBar

from .models._utils import (
    __version__,
    DTYPE,
    RaretripConfigError,
    ManifestError,
    NonFiniteGradientError,
    TrainingDivergedError,
    child_seed,
    make_rng,
)
from .models.resnet import (
    HEAD_ACTIVATIONS,
    ModelState,
    default_layer_specs,
    init_params,
    forward,
    backward,
    sgd_step,
)
from .kernels.activations import l2_normalize_forward, l2_normalize_backward
from .kernels.cross_entropy_loss import mean_bce_loss
from .kernels.triplet_loss import EmbeddingBatch, batch_all_loss, batch_hard_loss
from .sampler import BatchPlan, Batch, FramePool, FrameRef, epoch_batches
from .synthdata import DatasetManifest, Frame, augment
from .save import write_csv

METHODS = ("cross_entropy_baseline", "triplet_batch_all", "triplet_batch_hard")
STAGES  = {"triplet" : 1, "classifier" : 2, "baseline" : 3}
HISTORY_HEADER = ("epoch", "stage", "loss", "active_fraction", "val_auc")


@dataclass
class TrainConfig:
    method : str = field(
        default = "triplet_batch_all",
        metadata = {"help" : f"One of {METHODS}."},
    )
    margin : float = field(
        default = 0.2,
        metadata = {"help" : "Triplet margin alpha."},
    )
    embedding_head : Optional[int] = field(
        default = None,
        metadata = {"help" : "Width of an extra dense embedding layer after pooling. None uses the pooled features."},
    )
    embedding_activation : str = field(
        default = "relu",
        metadata = {"help" : f"Activation after the embedding layer, one of {HEAD_ACTIVATIONS}."},
    )
    normalize_embeddings : bool = field(
        default = False,
        metadata = {"help" : "L2 normalise embeddings before the triplet loss."},
    )
    learning_rate : float = field(
        default = 1e-3,
        metadata = {"help" : "Fixed SGD learning rate."},
    )
    epochs : int = field(
        default = 50,
        metadata = {"help" : "Triplet epochs, or end-to-end epochs for the baseline."},
    )
    classifier_epochs : int = field(
        default = 10,
        metadata = {"help" : "Classifier-only epochs after the triplet stage."},
    )
    weight_decay : float = field(
        default = 5e-4,
        metadata = {"help" : "L2 regularisation added to the gradient."},
    )
    batch_size : int = field(
        default = 64,
        metadata = {"help" : "Frames per batch."},
    )
    positive_fraction : float = field(
        default = 0.2,
        metadata = {"help" : "Share of positives per batch."},
    )
    augment : bool = field(
        default = True,
        metadata = {"help" : "Augment training batches."},
    )
    score_batch_size : int = field(
        default = 512,
        metadata = {"help" : "Frames per forward pass when scoring."},
    )
    seed : int = field(
        default = 3407,
        metadata = {"help" : "Seed for initialisation, batch order and augmentation."},
    )
    verbose : bool = field(
        default = False,
        metadata = {"help" : "Print a banner and progress bars."},
    )

    def __post_init__(self):
        if self.method not in METHODS:
            raise RaretripConfigError(f"Raretrip: unknown method '{self.method}'. Choose from {METHODS}.")
        if not (self.learning_rate > 0):
            raise RaretripConfigError(f"Raretrip: learning_rate must be > 0, got {self.learning_rate}.")
        if self.epochs < 1:
            raise RaretripConfigError(f"Raretrip: epochs must be >= 1, got {self.epochs}.")
        if self.classifier_epochs < 0:
            raise RaretripConfigError(f"Raretrip: classifier_epochs must be >= 0, got {self.classifier_epochs}.")
        if not (self.margin >= 0):
            raise RaretripConfigError(f"Raretrip: margin must be >= 0, got {self.margin}.")
        if not (self.weight_decay >= 0):
            raise RaretripConfigError(f"Raretrip: weight_decay must be >= 0, got {self.weight_decay}.")
        if self.embedding_head is not None and self.embedding_head < 1:
            raise RaretripConfigError(f"Raretrip: embedding_head must be positive or None, got {self.embedding_head}.")
        if self.embedding_activation not in HEAD_ACTIVATIONS:
            raise RaretripConfigError(
                f"Raretrip: embedding_activation must be one of {HEAD_ACTIVATIONS}, got '{self.embedding_activation}'."
            )
        if self.score_batch_size < 1:
            raise RaretripConfigError("Raretrip: score_batch_size must be positive.")
        # Validates the batch composition too
        self.batch_plan
    pass

    @property
    def batch_plan(self) -> BatchPlan:
        return BatchPlan(
            batch_size        = self.batch_size,
            positive_fraction = self.positive_fraction,
            augment           = self.augment,
        )
    pass

    @property
    def is_triplet(self) -> bool:
        return self.method != "cross_entropy_baseline"
    pass

    def to_dict(self) -> Dict:
        return asdict(self)
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RaretripConfigError(f"Raretrip: unknown train config keys {unknown}.")
        return cls(**data)
    pass
pass


@dataclass
class EpochRecord:
    epoch           : int
    stage           : str
    loss            : float
    active_fraction : Optional[float] = None
    val_auc         : Optional[float] = None
pass


@dataclass
class TrainHistory:
    records : List[EpochRecord] = field(default_factory = list)

    def append(self, record : EpochRecord) -> None:
        self.records.append(record)
    pass

    def __len__(self): return len(self.records)
    def __iter__(self): return iter(self.records)

    def stage(self, name : str) -> List[EpochRecord]:
        return [r for r in self.records if r.stage == name]
    pass

    def rows(self):
        return [[r.epoch, r.stage, r.loss, r.active_fraction, r.val_auc] for r in self.records]
    pass

    def to_csv(self, path):
        return write_csv(path, HISTORY_HEADER, self.rows())
    pass
pass


class TrainResult(NamedTuple):
    model   : ModelState
    history : TrainHistory
pass


def score_frames(model : ModelState, frames, batch_size : int = 512) -> np.ndarray:
    """
    Class probability per frame. `frames` is an (N, 3, H, W) array or tensor,
    or a sequence of Frame objects. Never augmented.
    """
    if isinstance(frames, (list, tuple)):
        if len(frames) == 0: return np.zeros(0)
        frames = np.stack([f.pixels if isinstance(f, Frame) else f for f in frames])
    pass
    X = torch.as_tensor(frames, dtype = DTYPE)
    scores = []
    with torch.no_grad():
        for start in range(0, X.shape[0], batch_size):
            scores.append(forward(model, X[start : start + batch_size]).class_probability)
    pass
    if len(scores) == 0: return np.zeros(0)
    return torch.cat(scores).numpy()
pass


def score_refs(model : ModelState, store, refs : Sequence, batch_size : int = 512) -> np.ndarray:
    """Scores (procedure_id, frame_index, ...) references chunk by chunk from a frame store."""
    scores = []
    for start in range(0, len(refs), batch_size):
        scores.append(score_frames(model, store.stack(refs[start : start + batch_size]), batch_size))
    pass
    return np.concatenate(scores) if scores else np.zeros(0)
pass


def _load_batch(store, batch : Batch, use_augment : bool, rng : np.random.Generator) -> torch.Tensor:
    frames = [store.get(ref.procedure_id, ref.frame_index) for ref in batch.frames]
    if use_augment:
        frames = [augment(frame, rng) for frame in frames]
    return torch.from_numpy(np.stack([frame.pixels for frame in frames])).to(DTYPE)
pass


def _validation_auc(model : ModelState, store, refs, labels, batch_size : int) -> Optional[float]:
    if refs is None or len(set(labels.tolist())) < 2: return None
    return float(roc_auc_score(labels, score_refs(model, store, refs, batch_size)))
pass


def _run_epoch(model, pool, store, config : TrainConfig, stage : str, epoch : int, trainable):
    plan = config.batch_plan
    batch_seed  = child_seed(config.seed, STAGES[stage], epoch)
    augment_rng = make_rng(config.seed, 10 + STAGES[stage], epoch)
    stop_at = model.classifier_index if stage == "classifier" else 0

    losses, fractions = [], []
    for batch_index, batch in enumerate(epoch_batches(pool, plan, batch_seed)):
        X = _load_batch(store, batch, plan.augment, augment_rng)
        labels = torch.from_numpy(batch.labels)
        activations = forward(model, X)

        if stage == "triplet":
            E = activations.embedding
            if config.normalize_embeddings:
                E, norm = l2_normalize_forward(E)
            embeddings = EmbeddingBatch(E, labels)
            if config.method == "triplet_batch_all":
                result = batch_all_loss(embeddings, config.margin)
            else:
                # The padded last batch may hold a single positive
                result = batch_hard_loss(embeddings, config.margin, strict = False)
            loss, grad = result.mean_loss, result.mean_grad
            if config.normalize_embeddings:
                grad = l2_normalize_backward(grad, E, norm)
            fractions.append(result.active_fraction)
            grad_kwargs = {"grad_embedding" : grad}
        else:
            loss, grad = mean_bce_loss(activations.class_probability, labels)
            loss = float(loss)
            grad_kwargs = {"grad_probability" : grad}
        pass

        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"Raretrip: {stage} loss became {loss} at epoch {epoch + 1}, batch {batch_index + 1}."
            )
        grads = backward(model, activations, stop_at = stop_at, **grad_kwargs)
        try:
            model = sgd_step(model, grads, config.learning_rate, config.weight_decay, trainable)
        except NonFiniteGradientError as error:
            raise TrainingDivergedError(
                f"Raretrip: training diverged in the {stage} stage at epoch {epoch + 1}, "\
                f"batch {batch_index + 1}: {error}"
            ) from error
        pass
        losses.append(loss)
    pass
    mean_fraction = float(np.mean(fractions)) if fractions else None
    return model, float(np.mean(losses)), mean_fraction
pass


def train(
    config      : TrainConfig,
    train_split : Union[FramePool, DatasetManifest],
    store,
    val_split   : Optional[DatasetManifest] = None,
) -> TrainResult:
    """
    Triplet methods: `epochs` of triplet loss on the backbone (and embedding head),
    then `classifier_epochs` of BCE on the classifier alone, backbone frozen.
    Baseline: `epochs` of BCE end to end.
    """
    pool = train_split if isinstance(train_split, FramePool) else FramePool.from_manifest(train_split)
    if pool.num_positives == 0 or pool.num_negatives == 0:
        raise ManifestError(
            f"Raretrip: training needs both classes, got {pool.num_positives} positives "\
            f"and {pool.num_negatives} negatives."
        )
    pass

    val_refs, val_labels = None, None
    if val_split is not None:
        val_refs = [
            FrameRef(pid, f, int(y))
            for pid in val_split.procedure_ids
            for f, y in enumerate(val_split.labels(pid))
        ]
        val_labels = np.array([ref.label for ref in val_refs])
    pass

    specs = default_layer_specs(config.embedding_head, config.embedding_activation)
    model = init_params(specs, config.seed)
    history = TrainHistory()

    if config.verbose:
        plan = config.batch_plan
        print(
            f"Raretrip {__version__}: {config.method} | positives = {pool.num_positives:,} | "\
            f"negatives = {pool.num_negatives:,}\n"\
            f"   Batch = {plan.num_positives} + {plan.num_negatives} | "\
            f"Epochs = {config.epochs} + {config.classifier_epochs if config.is_triplet else 0} | "\
            f"Parameters = {model.parameter_count():,}"
        )
    pass

    if config.is_triplet:
        schedule = [("triplet", config.epochs, ("backbone", "embedding")),
                    ("classifier", config.classifier_epochs, ("classifier",))]
    else:
        schedule = [("baseline", config.epochs, None)]
    pass

    epoch_number = 0
    for stage, n_epochs, roles in schedule:
        trainable = model.parameter_names(roles)
        progress = ProgressBar(range(n_epochs), desc = f"Raretrip: {stage}", disable = not config.verbose)
        for epoch in progress:
            model, loss, fraction = _run_epoch(model, pool, store, config, stage, epoch, trainable)
            epoch_number += 1
            val_auc = _validation_auc(model, store, val_refs, val_labels, config.score_batch_size)
            history.append(EpochRecord(epoch_number, stage, loss, fraction, val_auc))
            progress.set_postfix(loss = f"{loss:.4f}")
        pass
    pass
    return TrainResult(model, history)
pass
