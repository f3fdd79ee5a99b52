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
    "FrameRef",
    "FramePool",
    "BatchPlan",
    "Batch",
    "EpochSchedule",
    "compose_batch",
    "epoch_batches",
]

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, NamedTuple, Optional, Tuple, Union

import numpy as np

from .models._utils import (
    RaretripConfigError,
    ManifestError,
    EpochEnd,
    make_rng,
)
from .synthdata import DatasetManifest


class FrameRef(NamedTuple):
    procedure_id : int
    frame_index  : int
    label        : int
    event_id     : Optional[int] = None
pass


@dataclass(eq = False)
class FramePool:
    """
    Training frames: every positive, and the negatives grouped by procedure
    so they can be drawn procedure first.
    """
    positives : Tuple[FrameRef, ...]
    negatives : Dict[int, np.ndarray]   # procedure_id -> sorted negative frame indices

    @classmethod
    def from_manifest(cls, manifest : DatasetManifest, procedure_ids : Optional[Iterable[int]] = None) -> "FramePool":
        procedure_ids = manifest.procedure_ids if procedure_ids is None else sorted(int(p) for p in procedure_ids)
        positives, negatives = [], {}
        for pid in procedure_ids:
            for f in manifest.positive_frames(pid):
                positives.append(FrameRef(pid, int(f), 1, manifest.event_of(pid, int(f))))
            negatives[pid] = manifest.negative_frames(pid)
        pass
        return cls(tuple(positives), negatives)
    pass

    @property
    def procedure_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.negatives) | {ref.procedure_id for ref in self.positives}))
    pass

    @property
    def num_positives(self) -> int:
        return len(self.positives)
    pass

    @property
    def num_negatives(self) -> int:
        return int(sum(len(v) for v in self.negatives.values()))
    pass

    @property
    def procedures_with_negatives(self) -> Tuple[int, ...]:
        return tuple(pid for pid in sorted(self.negatives) if len(self.negatives[pid]) > 0)
    pass

    def subsample_negatives(self, n_negatives : int, rng : np.random.Generator) -> "FramePool":
        """Keeps n_negatives negatives drawn uniformly without replacement over the whole pool."""
        available = self.num_negatives
        if n_negatives > available:
            ratio = available / max(1, self.num_positives)
            raise RaretripConfigError(
                f"Raretrip: asked for {n_negatives} negatives but the pool only has {available} "\
                f"(an imbalance of {ratio:.2f} negatives per positive)."
            )
        pass
        owners = np.concatenate([np.full(len(self.negatives[pid]), pid) for pid in sorted(self.negatives)])
        frames = np.concatenate([self.negatives[pid] for pid in sorted(self.negatives)])
        chosen = np.sort(rng.choice(available, size = n_negatives, replace = False))
        negatives = {pid : frames[chosen[owners[chosen] == pid]] for pid in sorted(self.negatives)}
        return FramePool(self.positives, negatives)
    pass

    def refs(self) -> Tuple[FrameRef, ...]:
        negatives = tuple(
            FrameRef(pid, int(f), 0)
            for pid in sorted(self.negatives) for f in self.negatives[pid]
        )
        return self.positives + negatives
    pass
pass


@dataclass
class BatchPlan:
    batch_size : int = field(
        default = 64,
        metadata = {"help" : "Frames per batch."},
    )
    positive_fraction : float = field(
        default = 0.2,
        metadata = {"help" : "Share of positives per batch. 64 * 0.2 = 12.8 rounds to 13."},
    )
    negative_sampling : str = field(
        default = "stratified",
        metadata = {"help" : "Negatives are drawn procedure first, then frame. Only 'stratified' exists."},
    )
    augment : bool = field(
        default = True,
        metadata = {"help" : "Rotate, flip and jitter the brightness of training frames."},
    )

    def __post_init__(self):
        if self.batch_size < 1:
            raise RaretripConfigError(f"Raretrip: batch_size must be positive, got {self.batch_size}.")
        if not (0.0 < self.positive_fraction <= 1.0):
            raise RaretripConfigError(f"Raretrip: positive_fraction must be in (0, 1], got {self.positive_fraction}.")
        if self.negative_sampling != "stratified":
            raise RaretripConfigError(f"Raretrip: unknown negative_sampling '{self.negative_sampling}'.")
        if self.num_positives < 2 or self.num_negatives < 2:
            raise RaretripConfigError(
                f"Raretrip: a batch of {self.num_positives} positives and {self.num_negatives} negatives "\
                "has no valid triplet possible. Both classes need at least 2 frames."
            )
        pass
    pass

    @property
    def num_positives(self) -> int:
        # Round half up
        return int(math.floor(self.batch_size * self.positive_fraction + 0.5))
    pass

    @property
    def num_negatives(self) -> int:
        return self.batch_size - self.num_positives
    pass
pass


@dataclass(eq = False)
class Batch:
    frames : Tuple[FrameRef, ...]

    @property
    def labels(self) -> np.ndarray:
        return np.array([ref.label for ref in self.frames], dtype = np.int64)
    pass

    @property
    def num_positives(self) -> int:
        return int(sum(ref.label for ref in self.frames))
    pass

    def __len__(self): return len(self.frames)
pass


@dataclass(eq = False)
class EpochSchedule:
    """Shuffled positives, consumed num_positives at a time."""
    order       : Tuple[FrameRef, ...]
    per_batch   : int
    cursor      : int = 0

    @classmethod
    def shuffled(cls, pool : FramePool, plan : BatchPlan, rng : np.random.Generator) -> "EpochSchedule":
        if pool.num_positives == 0:
            raise ManifestError("Raretrip: the training split has no positive frames.")
        permutation = rng.permutation(pool.num_positives)
        return cls(tuple(pool.positives[i] for i in permutation), plan.num_positives)
    pass

    @property
    def num_batches(self) -> int:
        return math.ceil(len(self.order) / self.per_batch)
    pass

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.order)
    pass

    def next_positives(self) -> Tuple[FrameRef, ...]:
        if self.exhausted: raise EpochEnd()
        chunk = self.order[self.cursor : self.cursor + self.per_batch]
        self.cursor += len(chunk)
        return chunk
    pass
pass


def _sample_negatives(pool : FramePool, n : int, rng : np.random.Generator) -> Tuple[FrameRef, ...]:
    """
    A procedure uniformly, then a negative frame uniformly inside it, so long
    procedures do not dominate. Duplicates within the batch are redrawn.
    """
    candidates = list(pool.procedures_with_negatives)
    if len(candidates) == 0:
        raise ManifestError("Raretrip: the training split has no negative frames.")
    if pool.num_negatives < n:
        raise RaretripConfigError(
            f"Raretrip: a batch needs {n} distinct negatives but the split only has {pool.num_negatives}."
        )
    pass
    chosen, used = [], {}
    while len(chosen) < n:
        pid = candidates[int(rng.integers(len(candidates)))]
        frames = pool.negatives[pid]
        f = int(frames[int(rng.integers(len(frames)))])
        taken = used.setdefault(pid, set())
        if f in taken: continue
        taken.add(f)
        chosen.append(FrameRef(pid, f, 0))
        # A fully used procedure leaves the draw
        if len(taken) == len(frames): candidates.remove(pid)
    pass
    return tuple(chosen)
pass


def compose_batch(
    pool     : Union[FramePool, DatasetManifest],
    plan     : BatchPlan,
    rng      : np.random.Generator,
    schedule : EpochSchedule,
) -> Batch:
    """
    The next num_positives positives of the schedule plus stratified negatives.
    The last batch of an epoch may have fewer positives; negatives fill it up
    to batch_size. Raises EpochEnd when the schedule is used up.
    """
    if isinstance(pool, DatasetManifest): pool = FramePool.from_manifest(pool)
    positives = schedule.next_positives()
    negatives = _sample_negatives(pool, plan.batch_size - len(positives), rng)
    return Batch(positives + negatives)
pass


def epoch_batches(
    pool : Union[FramePool, DatasetManifest],
    plan : BatchPlan,
    seed : int,
) -> Iterator[Batch]:
    if isinstance(pool, DatasetManifest): pool = FramePool.from_manifest(pool)
    rng = make_rng(seed)
    schedule = EpochSchedule.shuffled(pool, plan, rng)
    while True:
        try:
            yield compose_batch(pool, plan, rng, schedule)
        except EpochEnd:
            return
        pass
    pass
pass
