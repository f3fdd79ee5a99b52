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
    "SIZE_CLASSES",
    "MORPHOLOGY_CLASSES",
    "SIZE_RADII",
    "MASK_AREA_BANDS",
    "GeneratorConfig",
    "Frame",
    "EventAnnotation",
    "ProcedureInfo",
    "DatasetManifest",
    "FoldAssignment",
    "SyntheticFrameStore",
    "PixmapFrameStore",
    "generate_dataset",
    "augment",
    "split_by_procedure",
    "write_dataset",
    "load_dataset",
]

import json
import math
import functools
from collections import Counter
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from sklearn.model_selection import StratifiedKFold
from tqdm import tqdm as ProgressBar

from .models._utils import (
    RaretripConfigError,
    ManifestError,
    make_rng,
)
from .save import write_ppm, write_pgm, read_ppm, read_pgm

SIZE_CLASSES       = ("small", "medium", "large")
MORPHOLOGY_CLASSES = ("sessile", "pedunculated", "undefined")

# Pixel radius bands of the head ellipse, inclusive
SIZE_RADII = {
    "small"  : (2, 3),
    "medium" : (4, 5),
    "large"  : (6, 8),
}
# Minor / major axis ratio of the head ellipse
ASPECT_RANGE = (0.75, 1.0)
# Mask area in pixels per size class, inclusive. Lobes and stalks count too,
# and the bands are disjoint.
MASK_AREA_BANDS = {
    "small"  : (6, 32),
    "medium" : (36, 90),
    "large"  : (100, 260),
}
MAX_GEOMETRY_DRAWS = 1000
MIN_FRAME_SIZE = 16
CHANNELS = 3

# Colours in RGB, values in [0, 1]
MUCOSA_COLOUR     = np.array([0.80, 0.50, 0.38])
POLYP_COLOUR      = np.array([0.93, 0.40, 0.33])
DISTRACTOR_COLOUR = np.array([0.86, 0.34, 0.30])
BUBBLE_COLOUR     = np.array([0.96, 0.95, 0.88])


def _normalize(histogram : Dict) -> Dict:
    total = float(sum(histogram.values()))
    return {k : v / total for k, v in histogram.items()}
pass

# Events per event-bearing procedure, frames per event and size x morphology counts
# of a 120 procedure capsule endoscopy study, rescaled to probabilities.
DEFAULT_EVENTS_PER_PROCEDURE = _normalize({1 : 17, 2 : 11, 3 : 8, 4 : 3, 5 : 5, 6 : 3, 7 : 2, 11 : 3})
DEFAULT_FRAMES_PER_EVENT = _normalize({
    "1-2"   : 33,
    "3-4"   : 32,
    "5-6"   : 20,
    "7-10"  : 19,
    "11-20" : 31,
    "21-30" : 30,
})
DEFAULT_SIZE_MORPHOLOGY = _normalize({
    "small/sessile"   : 65, "small/pedunculated"  : 4, "small/undefined"  : 19,
    "medium/sessile"  : 29, "medium/pedunculated" : 4, "medium/undefined" : 20,
    "large/sessile"   :  8, "large/pedunculated"  : 3, "large/undefined"  : 13,
})
DEFAULT_FRAC_WITH_EVENTS = 52 / 120


def parse_frame_bin(key : str) -> Tuple[int, int]:
    """'7-10' -> (7, 10), '4' -> (4, 4)."""
    try:
        lo, _, hi = str(key).partition("-")
        lo = int(lo)
        hi = int(hi) if hi else lo
    except ValueError:
        raise RaretripConfigError(f"Raretrip: frames_per_event_dist key '{key}' is not 'n' or 'lo-hi'.")
    if lo < 1 or hi < lo:
        raise RaretripConfigError(f"Raretrip: frames_per_event_dist key '{key}' is not a valid frame range.")
    return lo, hi
pass


def min_frame_size(size_class : str) -> int:
    # Head ellipse plus a one pixel border on each side, with room for the drift
    return 2 * (SIZE_RADII[size_class][1] + 2)
pass


@dataclass
class GeneratorConfig:
    num_procedures : int = field(
        default = 40,
        metadata = {"help" : "Number of synthetic procedures (videos)."},
    )
    frac_with_events : float = field(
        default = DEFAULT_FRAC_WITH_EVENTS,
        metadata = {"help" : "Probability that a procedure carries at least one event."},
    )
    events_per_procedure_dist : Dict[int, float] = field(
        default_factory = lambda: dict(DEFAULT_EVENTS_PER_PROCEDURE),
        metadata = {"help" : "Histogram over the event count of an event-bearing procedure."},
    )
    frames_per_event_dist : Dict[str, float] = field(
        default_factory = lambda: dict(DEFAULT_FRAMES_PER_EVENT),
        metadata = {"help" : "Histogram over frame-count bins 'lo-hi'; the count is uniform inside a bin."},
    )
    size_morphology_mix : Dict[str, float] = field(
        default_factory = lambda: dict(DEFAULT_SIZE_MORPHOLOGY),
        metadata = {"help" : "Joint histogram over 'size/morphology' classes."},
    )
    negative_frames_per_procedure : int = field(
        default = 3500,
        metadata = {"help" : "Negative frames per procedure. 3500 leaves every default training fold over 100 negatives per positive."},
    )
    frame_size : int = field(
        default = 32,
        metadata = {"help" : "Pixels per side."},
    )
    channels : int = field(
        default = CHANNELS,
        metadata = {"help" : "Colour channels. Only 3 is supported."},
    )
    distractor_rate : float = field(
        default = 0.05,
        metadata = {"help" : "Fraction of negative frames with a reddish patch or a bubble."},
    )
    seed : int = field(
        default = 3407,
        metadata = {"help" : "Unsigned 64-bit seed."},
    )

    def __post_init__(self):
        # JSON turns int keys into strings
        try:
            self.events_per_procedure_dist = {int(k) : float(v) for k, v in self.events_per_procedure_dist.items()}
        except ValueError:
            raise RaretripConfigError("Raretrip: events_per_procedure_dist keys must be integers.")
        self.frames_per_event_dist = {str(k) : float(v) for k, v in self.frames_per_event_dist.items()}
        self.size_morphology_mix   = {str(k) : float(v) for k, v in self.size_morphology_mix.items()}

        if self.num_procedures < 2:
            raise RaretripConfigError(f"Raretrip: num_procedures must be >= 2, got {self.num_procedures}.")
        if not (0.0 <= self.frac_with_events <= 1.0):
            raise RaretripConfigError(f"Raretrip: frac_with_events must be in [0, 1], got {self.frac_with_events}.")
        if self.negative_frames_per_procedure < 1:
            raise RaretripConfigError("Raretrip: negative_frames_per_procedure must be positive.")
        if self.channels != CHANNELS:
            raise RaretripConfigError(f"Raretrip: only {CHANNELS} channels are supported, got {self.channels}.")
        if not (0.0 <= self.distractor_rate <= 1.0):
            raise RaretripConfigError(f"Raretrip: distractor_rate must be in [0, 1], got {self.distractor_rate}.")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise RaretripConfigError(f"Raretrip: seed must be an unsigned 64-bit integer, got {self.seed}.")

        for name in ("events_per_procedure_dist", "frames_per_event_dist", "size_morphology_mix"):
            histogram = getattr(self, name)
            if len(histogram) == 0 or any(v < 0 for v in histogram.values()):
                raise RaretripConfigError(f"Raretrip: {name} must be a nonempty histogram of nonnegative weights.")
            if abs(sum(histogram.values()) - 1.0) > 1e-9:
                raise RaretripConfigError(f"Raretrip: {name} sums to {sum(histogram.values())!r}, not 1.")
        pass
        if any(k < 1 for k in self.events_per_procedure_dist):
            raise RaretripConfigError("Raretrip: events_per_procedure_dist counts must be >= 1.")
        for key in self.frames_per_event_dist: parse_frame_bin(key)
        for key in self.size_morphology_mix:
            size, _, morphology = key.partition("/")
            if size not in SIZE_CLASSES or morphology not in MORPHOLOGY_CLASSES:
                raise RaretripConfigError(
                    f"Raretrip: size_morphology_mix key '{key}' must be 'size/morphology' with size in "\
                    f"{SIZE_CLASSES} and morphology in {MORPHOLOGY_CLASSES}."
                )
        pass

        if self.frame_size < MIN_FRAME_SIZE:
            raise RaretripConfigError(f"Raretrip: frame_size must be >= {MIN_FRAME_SIZE}, got {self.frame_size}.")
        used = {key.partition("/")[0] for key, p in self.size_morphology_mix.items() if p > 0}
        for size in reversed(SIZE_CLASSES):
            if size in used and self.frame_size < min_frame_size(size):
                raise RaretripConfigError(
                    f"Raretrip: frame_size {self.frame_size} is too small to render size class '{size}' "\
                    f"(needs >= {min_frame_size(size)} pixels)."
                )
        pass
    pass

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["events_per_procedure_dist"] = {str(k) : v for k, v in sorted(self.events_per_procedure_dist.items())}
        return data
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RaretripConfigError(f"Raretrip: unknown generator config keys {unknown}.")
        return cls(**data)
    pass
pass


@dataclass
class Frame:
    pixels         : np.ndarray             # (3, H, W), values in [0, 1]
    procedure_id   : int
    frame_index    : int
    mask           : Optional[np.ndarray] = None   # (H, W) bool, positives only

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"Raretrip: frame pixels must be (channels, H, W), got {self.pixels.shape}.")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(
                f"Raretrip: frame {self.frame_index} of procedure {self.procedure_id} has pixels outside [0, 1]."
            )
        pass
    pass
pass


@dataclass(frozen = True)
class EventAnnotation:
    event_id         : int
    procedure_id     : int
    frame_indices    : Tuple[int, ...]
    size_class       : str
    morphology_class : str
    frame_size       : int
    # Geometry of the rendered blob
    radius           : int
    aspect           : float
    angle            : float
    centers          : Tuple[Tuple[int, int], ...]               # one (row, col) per frame
    lobes            : Tuple[Tuple[float, float, float], ...] = ()  # (d_row, d_col, scale)
    stalk            : Optional[Tuple[float, float]] = None         # (direction, length)

    def _field(self, frame_index : int) -> np.ndarray:
        """Normalised radial distance; the blob is where it is <= 1."""
        position = self.frame_indices.index(frame_index)
        return blob_field(
            self.frame_size, self.centers[position], self.radius, self.aspect, self.angle,
            self.lobes, self.stalk,
        )
    pass

    def mask(self, frame_index : int) -> np.ndarray:
        if frame_index not in self.frame_indices:
            raise ManifestError(f"Raretrip: frame {frame_index} is not part of event {self.event_id}.")
        return self._field(frame_index) <= 1.0
    pass

    @property
    def mask_per_frame(self) -> Dict[int, np.ndarray]:
        return {f : self.mask(f) for f in self.frame_indices}
    pass

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["frame_indices"] = list(self.frame_indices)
        data["centers"]       = [list(c) for c in self.centers]
        data["lobes"]         = [list(l) for l in self.lobes]
        data["stalk"]         = None if self.stalk is None else list(self.stalk)
        return data
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "EventAnnotation":
        data = dict(data)
        data["frame_indices"] = tuple(int(f) for f in data["frame_indices"])
        data["centers"]       = tuple(tuple(int(x) for x in c) for c in data["centers"])
        data["lobes"]         = tuple(tuple(float(x) for x in l) for l in data.get("lobes", ()))
        data["stalk"]         = None if data.get("stalk") is None else tuple(float(x) for x in data["stalk"])
        return cls(**data)
    pass
pass


@dataclass(frozen = True)
class ProcedureInfo:
    procedure_id : int
    num_frames   : int
    event_ids    : Tuple[int, ...] = ()

    @property
    def has_events(self) -> bool: return len(self.event_ids) > 0
pass


class DatasetManifest:
    """
    Procedures, their events and the frame labels.
    A frame is positive iff it belongs to an event.
    """

    def __init__(
        self,
        config     : GeneratorConfig,
        procedures : Sequence[ProcedureInfo],
        events     : Sequence[EventAnnotation],
    ):
        self.config     = config
        self.procedures = tuple(sorted(procedures, key = lambda p: p.procedure_id))
        self.events     = tuple(sorted(events, key = lambda e: e.event_id))

        self._procedures = {p.procedure_id : p for p in self.procedures}
        if len(self._procedures) != len(self.procedures):
            raise ManifestError("Raretrip: duplicate procedure ids in the manifest.")
        self._events = {e.event_id : e for e in self.events}
        self._labels = {p.procedure_id : np.zeros(p.num_frames, dtype = np.int8) for p in self.procedures}
        self._event_of = {}
        for event in self.events:
            if event.procedure_id not in self._procedures:
                raise ManifestError(
                    f"Raretrip: event {event.event_id} refers to unknown procedure {event.procedure_id}."
                )
            if len(event.frame_indices) == 0:
                raise ManifestError(f"Raretrip: event {event.event_id} has no frames.")
            n_frames = self._procedures[event.procedure_id].num_frames
            for f in event.frame_indices:
                if not (0 <= f < n_frames):
                    raise ManifestError(
                        f"Raretrip: event {event.event_id} frame {f} is outside procedure "\
                        f"{event.procedure_id} ({n_frames} frames)."
                    )
                self._labels[event.procedure_id][f] = 1
                self._event_of.setdefault((event.procedure_id, f), event.event_id)
            pass
        pass
    pass

    @property
    def procedure_ids(self) -> List[int]:
        return [p.procedure_id for p in self.procedures]
    pass

    def procedure(self, procedure_id : int) -> ProcedureInfo:
        try:
            return self._procedures[procedure_id]
        except KeyError:
            raise ManifestError(f"Raretrip: unknown procedure {procedure_id}.")
    pass

    def event(self, event_id : int) -> EventAnnotation:
        return self._events[event_id]
    pass

    def labels(self, procedure_id : int) -> np.ndarray:
        self.procedure(procedure_id)
        return self._labels[procedure_id]
    pass

    def label(self, procedure_id : int, frame_index : int) -> int:
        return int(self.labels(procedure_id)[frame_index])
    pass

    @property
    def label_index(self) -> Dict[Tuple[int, int], int]:
        return {
            (pid, f) : int(y)
            for pid, labels in self._labels.items()
            for f, y in enumerate(labels)
        }
    pass

    def event_of(self, procedure_id : int, frame_index : int) -> Optional[int]:
        return self._event_of.get((procedure_id, frame_index))
    pass

    def events_of(self, procedure_id : int) -> List[EventAnnotation]:
        return [self._events[e] for e in self.procedure(procedure_id).event_ids]
    pass

    def positive_frames(self, procedure_id : int) -> np.ndarray:
        return np.flatnonzero(self.labels(procedure_id) == 1)
    pass

    def negative_frames(self, procedure_id : int) -> np.ndarray:
        return np.flatnonzero(self.labels(procedure_id) == 0)
    pass

    @property
    def num_positives(self) -> int:
        return int(sum(labels.sum() for labels in self._labels.values()))
    pass

    @property
    def num_frames(self) -> int:
        return int(sum(p.num_frames for p in self.procedures))
    pass

    @property
    def num_negatives(self) -> int:
        return self.num_frames - self.num_positives
    pass

    def subset(self, procedure_ids : Iterable[int]) -> "DatasetManifest":
        keep = set(int(p) for p in procedure_ids)
        for pid in keep: self.procedure(pid)
        return DatasetManifest(
            self.config,
            [p for p in self.procedures if p.procedure_id in keep],
            [e for e in self.events if e.procedure_id in keep],
        )
    pass

    def statistics(self) -> Dict[str, Dict]:
        """Events per procedure, frames per event, size x morphology counts and mask area ranges."""
        events_per_procedure = Counter(len(p.event_ids) for p in self.procedures)
        frames_per_event = Counter()
        bins = [parse_frame_bin(k) + (k,) for k in self.config.frames_per_event_dist]
        for event in self.events:
            n = len(event.frame_indices)
            label = next((k for lo, hi, k in bins if lo <= n <= hi), str(n))
            frames_per_event[label] += 1
        pass
        size_morphology = Counter(f"{e.size_class}/{e.morphology_class}" for e in self.events)
        mask_area = {}
        for event in self.events:
            areas = [int(m.sum()) for m in event.mask_per_frame.values()]
            lo, hi = mask_area.get(event.size_class, (min(areas), max(areas)))
            mask_area[event.size_class] = (min(lo, *areas), max(hi, *areas))
        pass
        return {
            "events_per_procedure" : {str(k) : v for k, v in sorted(events_per_procedure.items())},
            "frames_per_event"     : dict(sorted(frames_per_event.items())),
            "size_morphology"      : dict(sorted(size_morphology.items())),
            "mask_area"            : {s : list(mask_area[s]) for s in SIZE_CLASSES if s in mask_area},
            "totals" : {
                "procedures"              : len(self.procedures),
                "procedures_with_events"  : sum(p.has_events for p in self.procedures),
                "events"                  : len(self.events),
                "positive_frames"         : self.num_positives,
                "negative_frames"         : self.num_negatives,
            },
        }
    pass

    def to_dict(self) -> Dict:
        return {
            "format"     : "raretrip-manifest",
            "version"    : 1,
            "config"     : self.config.to_dict(),
            "procedures" : [
                {"procedure_id" : p.procedure_id, "num_frames" : p.num_frames, "event_ids" : list(p.event_ids)}
                for p in self.procedures
            ],
            "events"     : [e.to_dict() for e in self.events],
        }
    pass

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent = 1, sort_keys = True) + "\n"
    pass

    @classmethod
    def from_dict(cls, data : Dict) -> "DatasetManifest":
        if data.get("format") != "raretrip-manifest":
            raise ManifestError("Raretrip: not a raretrip manifest.")
        return cls(
            GeneratorConfig.from_dict(data["config"]),
            [ProcedureInfo(p["procedure_id"], p["num_frames"], tuple(p["event_ids"])) for p in data["procedures"]],
            [EventAnnotation.from_dict(e) for e in data["events"]],
        )
    pass

    @classmethod
    def from_json(cls, text : str) -> "DatasetManifest":
        return cls.from_dict(json.loads(text))
    pass

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.to_dict() == other.to_dict()
    pass
pass


# =============================================
# Rendering
def _grid(size : int):
    return np.mgrid[0:size, 0:size].astype(np.float64)
pass


def _ellipse_field(rows, cols, center, radius, aspect, angle) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    dr, dc = rows - center[0], cols - center[1]
    u =  dc * c + dr * s
    v = -dc * s + dr * c
    return np.sqrt((u / radius) ** 2 + (v / (aspect * radius)) ** 2)
pass


def blob_field(size, center, radius, aspect, angle, lobes = (), stalk = None) -> np.ndarray:
    rows, cols = _grid(size)
    rho = _ellipse_field(rows, cols, center, radius, aspect, angle)
    for d_row, d_col, scale in lobes:
        lobe_center = (center[0] + d_row, center[1] + d_col)
        rho = np.minimum(rho, _ellipse_field(rows, cols, lobe_center, radius * scale, aspect, angle))
    pass
    if stalk is not None:
        direction, length = stalk
        dr, dc = rows - center[0], cols - center[1]
        along = dc * math.cos(direction) + dr * math.sin(direction)
        across = np.abs(-dc * math.sin(direction) + dr * math.cos(direction))
        on_stalk = (along >= 0) & (along <= radius + length) & (across <= 0.75)
        rho = np.where(on_stalk, np.minimum(rho, 0.95), rho)
    pass
    return rho
pass


def _background(rng : np.random.Generator, tint : np.ndarray, size : int) -> np.ndarray:
    coarse = rng.random((CHANNELS, 4, 4))
    smooth = ndimage.zoom(coarse, (1, size / 4, size / 4), order = 1, mode = "nearest")
    noise  = rng.standard_normal((CHANNELS, size, size)) * 0.02
    rows, cols = _grid(size)
    half = (size - 1) / 2
    vignette = 1.0 - 0.25 * (((rows - half) ** 2 + (cols - half) ** 2) / (2 * half * half))
    pixels = tint[:, None, None] * (0.8 + 0.3 * smooth) * vignette[None] + noise
    return pixels
pass


def _draw_polyp(pixels : np.ndarray, rho : np.ndarray, center, radius : int) -> np.ndarray:
    mask = rho <= 1.0
    # Dome shading, bright in the middle and dark towards the rim
    shade = 0.8 + 0.35 * (1.0 - np.clip(rho, 0.0, 1.0) ** 2)
    colour = POLYP_COLOUR[:, None, None] * shade[None]
    pixels = np.where(mask[None], 0.15 * pixels + 0.85 * colour, pixels)
    # Specular highlight up and to the left of the centre
    rows, cols = _grid(pixels.shape[1])
    h_row, h_col = center[0] - 0.35 * radius, center[1] - 0.35 * radius
    sigma = max(0.6, 0.3 * radius)
    highlight = 0.3 * np.exp(-((rows - h_row) ** 2 + (cols - h_col) ** 2) / (2 * sigma ** 2))
    pixels = pixels + np.where(mask, highlight, 0.0)[None]
    # Shadow ring just outside the blob
    ring = ndimage.binary_dilation(mask) & ~mask
    pixels = np.where(ring[None], 0.75 * pixels, pixels)
    return pixels
pass


def _draw_distractor(pixels : np.ndarray, rng : np.random.Generator) -> np.ndarray:
    size = pixels.shape[1]
    rows, cols = _grid(size)
    if rng.random() < 0.5:
        # Flat reddish patch: no dome shading, no highlight, no shadow ring
        center = rng.uniform(2, size - 3, size = 2)
        radius = rng.uniform(2.0, 6.0)
        rho = _ellipse_field(rows, cols, center, radius, rng.uniform(0.5, 1.0), rng.uniform(0, math.pi))
        offset = center + rng.uniform(-radius, radius, size = 2)
        rho = np.minimum(rho, _ellipse_field(rows, cols, offset, 0.7 * radius, 1.0, 0.0))
        patch = rho <= 1.0
        pixels = np.where(patch[None], 0.45 * pixels + 0.55 * DISTRACTOR_COLOUR[:, None, None], pixels)
    else:
        # Bubble: thin bright ring, slightly brighter inside
        center = rng.uniform(3, size - 4, size = 2)
        radius = rng.uniform(2.0, 5.0)
        distance = np.sqrt((rows - center[0]) ** 2 + (cols - center[1]) ** 2)
        ring = np.abs(distance - radius) <= 0.6
        pixels = np.where((distance < radius)[None], pixels * 1.05, pixels)
        pixels = np.where(ring[None], 0.3 * pixels + 0.7 * BUBBLE_COLOUR[:, None, None], pixels)
    pass
    return pixels
pass


def _procedure_tint(seed : int, procedure_id : int) -> np.ndarray:
    rng = make_rng(seed, 1, procedure_id)
    return MUCOSA_COLOUR + rng.uniform(-0.05, 0.05, size = CHANNELS)
pass


def render_frame(manifest : DatasetManifest, procedure_id : int, frame_index : int) -> Frame:
    """
    Renders one frame from its own child seed (seed, procedure, frame), so frames
    can be produced lazily and in any order.
    """
    config = manifest.config
    size = config.frame_size
    procedure = manifest.procedure(procedure_id)
    if not (0 <= frame_index < procedure.num_frames):
        raise ManifestError(
            f"Raretrip: frame {frame_index} is outside procedure {procedure_id} ({procedure.num_frames} frames)."
        )
    rng = make_rng(config.seed, 2, procedure_id, frame_index)
    pixels = _background(rng, _procedure_tint(config.seed, procedure_id), size)

    event_id = manifest.event_of(procedure_id, frame_index)
    mask = None
    if event_id is None:
        if rng.random() < config.distractor_rate:
            pixels = _draw_distractor(pixels, rng)
    else:
        event = manifest.event(event_id)
        rho = event._field(frame_index)
        center = event.centers[event.frame_indices.index(frame_index)]
        pixels = _draw_polyp(pixels, rho, center, event.radius)
        mask = rho <= 1.0
    pass
    return Frame(np.clip(pixels, 0.0, 1.0), procedure_id, frame_index, mask)
pass
# =============================================


class _CachedFrameStore:
    """Frame access by (procedure, frame) with an LRU cache that survives pickling."""

    def __init__(self, manifest : DatasetManifest, cache_size : int = 8192):
        self.manifest   = manifest
        self.frame_size = manifest.config.frame_size
        self.cache_size = cache_size
        self._get = functools.lru_cache(maxsize = cache_size)(self._load)
    pass

    def _load(self, procedure_id : int, frame_index : int) -> Frame:
        raise NotImplementedError
    pass

    def get(self, procedure_id : int, frame_index : int) -> Frame:
        return self._get(int(procedure_id), int(frame_index))
    pass

    def stack(self, refs : Iterable[Tuple[int, int]]) -> np.ndarray:
        """(N, 3, H, W) pixels for (procedure_id, frame_index, ...) references."""
        frames = [self.get(ref[0], ref[1]).pixels for ref in refs]
        if len(frames) == 0:
            return np.zeros((0, CHANNELS, self.frame_size, self.frame_size))
        return np.stack(frames)
    pass

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_get"]
        return state
    pass

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._get = functools.lru_cache(maxsize = self.cache_size)(self._load)
    pass
pass


class SyntheticFrameStore(_CachedFrameStore):
    def _load(self, procedure_id : int, frame_index : int) -> Frame:
        return render_frame(self.manifest, procedure_id, frame_index)
    pass
pass


def _frame_name(procedure_id : int, frame_index : int, extension : str) -> str:
    return f"proc{procedure_id}_frame{frame_index}.{extension}"
pass


class PixmapFrameStore(_CachedFrameStore):
    def __init__(self, directory, manifest : DatasetManifest, cache_size : int = 8192):
        self.directory = Path(directory)
        super().__init__(manifest, cache_size)
    pass

    def _load(self, procedure_id : int, frame_index : int) -> Frame:
        frame_path = self.directory / "frames" / _frame_name(procedure_id, frame_index, "ppm")
        try:
            pixels = read_ppm(frame_path)
            mask = None
            if self.manifest.label(procedure_id, frame_index) == 1:
                mask = read_pgm(self.directory / "masks" / _frame_name(procedure_id, frame_index, "pgm"))
        except OSError as error:
            raise OSError(f"Raretrip: could not read frame {frame_path}: {error}") from error
        pass
        return Frame(pixels, procedure_id, frame_index, mask)
    pass
pass


def _sample_key(rng : np.random.Generator, histogram : Dict):
    keys = list(histogram)
    p = np.array([histogram[k] for k in keys], dtype = np.float64)
    return keys[rng.choice(len(keys), p = p / p.sum())]
pass


def _draw_event_geometry(rng, size, size_class, morphology, n_frames):
    lo, hi = SIZE_RADII[size_class]
    radius = int(rng.integers(lo, hi + 1))
    aspect = float(rng.uniform(*ASPECT_RANGE))
    angle  = float(rng.uniform(0.0, math.pi))

    lobes, stalk = (), None
    if morphology == "undefined":
        n_lobes = int(rng.integers(1, 3))
        lobes = tuple(
            (float(rng.uniform(-radius / 2, radius / 2)),
             float(rng.uniform(-radius / 2, radius / 2)),
             float(rng.uniform(0.6, 0.9)))
            for _ in range(n_lobes)
        )
    elif morphology == "pedunculated":
        stalk = (float(rng.uniform(0.0, 2 * math.pi)), float(max(2, radius)))
    pass

    # The head ellipse always fits, the drift is a +-1 pixel random walk
    margin = radius + 1
    low, high = margin, size - 1 - margin
    center = rng.integers(low, high + 1, size = 2)
    centers = []
    for _ in range(n_frames):
        centers.append((int(center[0]), int(center[1])))
        center = np.clip(center + rng.integers(-1, 2, size = 2), low, high)
    pass
    return dict(radius = radius, aspect = aspect, angle = angle, centers = tuple(centers), lobes = lobes, stalk = stalk)
pass


def mask_areas(size : int, geometry : Dict) -> List[int]:
    """Mask pixel count of every frame of an event geometry."""
    return [
        int((blob_field(
            size, center, geometry["radius"], geometry["aspect"], geometry["angle"],
            geometry["lobes"], geometry["stalk"],
        ) <= 1.0).sum())
        for center in geometry["centers"]
    ]
pass


def _sample_event_geometry(rng, config, size_class, morphology, n_frames):
    """Redraws until the mask area of every frame lies in the band of the size class."""
    lo, hi = MASK_AREA_BANDS[size_class]
    for _ in range(MAX_GEOMETRY_DRAWS):
        geometry = _draw_event_geometry(rng, config.frame_size, size_class, morphology, n_frames)
        areas = mask_areas(config.frame_size, geometry)
        if lo <= min(areas) and max(areas) <= hi:
            return geometry
    pass
    raise RaretripConfigError(
        f"Raretrip: no {size_class}/{morphology} event fits the mask area band {MASK_AREA_BANDS[size_class]} "\
        f"in {config.frame_size} x {config.frame_size} frames after {MAX_GEOMETRY_DRAWS} draws."
    )
pass


def _layout_procedure(config : GeneratorConfig, procedure_id : int):
    """Event count, event lengths, classes, geometry and frame placement of one procedure."""
    rng = make_rng(config.seed, 0, procedure_id)
    n_events = 0
    if rng.random() < config.frac_with_events:
        n_events = int(_sample_key(rng, config.events_per_procedure_dist))

    drafts = []
    for _ in range(n_events):
        lo, hi = parse_frame_bin(_sample_key(rng, config.frames_per_event_dist))
        n_frames = int(rng.integers(lo, hi + 1))
        size_class, _, morphology = _sample_key(rng, config.size_morphology_mix).partition("/")
        geometry = _sample_event_geometry(rng, config, size_class, morphology, n_frames)
        drafts.append((n_frames, size_class, morphology, geometry))
    pass

    # Events become consecutive blocks inserted between negative frames
    n_negatives = config.negative_frames_per_procedure
    insert_at = np.sort(rng.integers(0, n_negatives + 1, size = n_events))
    placed, shift = [], 0
    for position, (n_frames, size_class, morphology, geometry) in zip(insert_at, drafts):
        start = int(position) + shift
        placed.append((tuple(range(start, start + n_frames)), size_class, morphology, geometry))
        shift += n_frames
    pass
    return n_negatives + shift, placed
pass


def generate_dataset(config : GeneratorConfig) -> Tuple[DatasetManifest, SyntheticFrameStore]:
    """
    Layout is decided per procedure from its own child seed, frames are
    rendered lazily by the returned store. Deterministic for a fixed config.
    """
    procedures, events = [], []
    next_event_id = 0
    for procedure_id in range(config.num_procedures):
        num_frames, placed = _layout_procedure(config, procedure_id)
        event_ids = []
        for frame_indices, size_class, morphology, geometry in placed:
            events.append(EventAnnotation(
                event_id         = next_event_id,
                procedure_id     = procedure_id,
                frame_indices    = frame_indices,
                size_class       = size_class,
                morphology_class = morphology,
                frame_size       = config.frame_size,
                **geometry,
            ))
            event_ids.append(next_event_id)
            next_event_id += 1
        pass
        procedures.append(ProcedureInfo(procedure_id, num_frames, tuple(event_ids)))
    pass
    manifest = DatasetManifest(config, procedures, events)
    return manifest, SyntheticFrameStore(manifest)
pass


def augment(
    frame           : Frame,
    rng             : np.random.Generator,
    rotation        : Optional[int]   = None,
    flip_horizontal : Optional[bool]  = None,
    flip_vertical   : Optional[bool]  = None,
    brightness      : Optional[float] = None,
) -> Frame:
    """
    Random rotation by a multiple of 90 degrees, independent horizontal and
    vertical flips with probability 0.5, brightness factor in [0.8, 1.2] then clip.
    All four draws always happen, so overriding one keeps the others reproducible.
    The mask follows the geometric part.
    """
    k       = int(rng.integers(0, 4))
    flip_h  = bool(rng.random() < 0.5)
    flip_v  = bool(rng.random() < 0.5)
    factor  = float(rng.uniform(0.8, 1.2))
    if rotation        is not None:
        if rotation % 90 != 0:
            raise ValueError(f"Raretrip: rotation must be a multiple of 90 degrees, got {rotation}.")
        k = (rotation // 90) % 4
    if flip_horizontal is not None: flip_h = bool(flip_horizontal)
    if flip_vertical   is not None: flip_v = bool(flip_vertical)
    if brightness      is not None: factor = float(brightness)

    def geometric(array, row_axis, col_axis):
        array = np.rot90(array, k, axes = (row_axis, col_axis))
        if flip_h: array = np.flip(array, axis = col_axis)
        if flip_v: array = np.flip(array, axis = row_axis)
        return np.ascontiguousarray(array)
    pass

    pixels = geometric(frame.pixels, 1, 2)
    if factor != 1.0: pixels = np.clip(pixels * factor, 0.0, 1.0)
    mask = None if frame.mask is None else geometric(frame.mask, 0, 1)
    return Frame(pixels, frame.procedure_id, frame.frame_index, mask)
pass


@dataclass(frozen = True)
class FoldAssignment:
    k     : int
    seed  : int
    folds : Tuple[Tuple[int, ...], ...]

    def test_procedures(self, fold : int) -> Tuple[int, ...]:
        return self.folds[fold]
    pass

    def train_procedures(self, fold : int) -> Tuple[int, ...]:
        return tuple(sorted(p for i, f in enumerate(self.folds) if i != fold for p in f))
    pass

    def fold_of(self, procedure_id : int) -> int:
        for i, fold in enumerate(self.folds):
            if procedure_id in fold: return i
        raise ManifestError(f"Raretrip: procedure {procedure_id} is in no fold.")
    pass

    def to_dict(self) -> Dict:
        return {"k" : self.k, "seed" : self.seed, "folds" : [list(f) for f in self.folds]}
    pass
pass


def split_by_procedure(manifest : DatasetManifest, k : int, seed : int) -> FoldAssignment:
    """
    Whole procedures go to k folds, stratified on whether a procedure has events,
    so event-bearing counts per fold differ by at most one.
    """
    procedure_ids = np.array(manifest.procedure_ids)
    has_events = np.array([p.has_events for p in manifest.procedures], dtype = np.int64)
    if k < 2:
        raise RaretripConfigError(f"Raretrip: need at least 2 folds, got {k}.")
    if len(procedure_ids) < k:
        raise RaretripConfigError(f"Raretrip: {len(procedure_ids)} procedures cannot fill {k} folds.")
    if has_events.sum() < k:
        raise RaretripConfigError(
            f"Raretrip: only {int(has_events.sum())} procedures carry events, fewer than the {k} folds."
        )
    pass
    splitter = StratifiedKFold(n_splits = k, shuffle = True, random_state = int(seed) % (2 ** 32))
    folds = [
        tuple(sorted(int(p) for p in procedure_ids[test]))
        for _, test in splitter.split(np.zeros(len(procedure_ids)), has_events)
    ]
    return FoldAssignment(k, int(seed), tuple(folds))
pass


def write_dataset(manifest : DatasetManifest, store, directory, verbose : bool = True) -> Path:
    """manifest.json, frames/proc{P}_frame{F}.ppm and masks/proc{P}_frame{F}.pgm for positives."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents = True, exist_ok = True)
    (directory / "masks" ).mkdir(parents = True, exist_ok = True)
    (directory / "manifest.json").write_text(manifest.to_json())

    refs = [(pid, f) for pid in manifest.procedure_ids for f in range(manifest.procedure(pid).num_frames)]
    for procedure_id, frame_index in ProgressBar(refs, desc = "Raretrip: writing frames", disable = not verbose):
        frame = store.get(procedure_id, frame_index)
        write_ppm(directory / "frames" / _frame_name(procedure_id, frame_index, "ppm"), frame.pixels)
        if frame.mask is not None:
            write_pgm(directory / "masks" / _frame_name(procedure_id, frame_index, "pgm"), frame.mask)
    pass
    return directory
pass


def load_dataset(directory) -> Tuple[DatasetManifest, PixmapFrameStore]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = DatasetManifest.from_json(manifest_path.read_text())
    except OSError as error:
        raise ManifestError(f"Raretrip: could not read {manifest_path}: {error}") from error
    pass
    return manifest, PixmapFrameStore(directory, manifest)
pass
