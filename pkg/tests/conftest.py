import numpy as np
import pytest

from raretrip.models._utils import make_rng
from raretrip.synthdata import (
    GeneratorConfig,
    EventAnnotation,
    ProcedureInfo,
    DatasetManifest,
    Frame,
    generate_dataset,
)
from raretrip.sampler import FramePool, FrameRef


def tiny_generator_config(**overrides) -> GeneratorConfig:
    """10 procedures, one short event each, 16 x 16 frames."""
    values = dict(
        num_procedures                = 10,
        frac_with_events              = 1.0,
        events_per_procedure_dist     = {1 : 1.0},
        frames_per_event_dist         = {"3-4" : 1.0},
        size_morphology_mix           = {"small/sessile" : 0.5, "medium/undefined" : 0.5},
        negative_frames_per_procedure = 40,
        frame_size                    = 16,
        seed                          = 3407,
    )
    values.update(overrides)
    return GeneratorConfig(**values)
pass


def hand_manifest(event_bearing, event_free, frames_per_event = 3, negatives = 5, frame_size = 16):
    """
    Procedures 0 .. event_bearing - 1 carry one event at frames 0 .. frames_per_event - 1,
    the rest carry none. Sizes and morphologies cycle through the classes.
    """
    sizes       = ("small", "medium", "large")
    morphologies = ("sessile", "pedunculated", "undefined")
    procedures, events = [], []
    for pid in range(event_bearing + event_free):
        if pid < event_bearing:
            events.append(EventAnnotation(
                event_id         = pid,
                procedure_id     = pid,
                frame_indices    = tuple(range(frames_per_event)),
                size_class       = sizes[pid % 3],
                morphology_class = morphologies[(pid // 3) % 3],
                frame_size       = frame_size,
                radius           = 2,
                aspect           = 1.0,
                angle            = 0.0,
                centers          = tuple((frame_size // 2, frame_size // 2) for _ in range(frames_per_event)),
            ))
            procedures.append(ProcedureInfo(pid, frames_per_event + negatives, (pid,)))
        else:
            procedures.append(ProcedureInfo(pid, negatives, ()))
        pass
    pass
    return DatasetManifest(tiny_generator_config(), procedures, events)
pass


class BlobStore:
    """Two-blob toy frames: positives near 0.9, negatives near 0.1, small noise."""

    def __init__(self, labels, size = 8, noise = 0.02, seed = 0):
        self.labels = dict(labels)
        self.size   = size
        self.noise  = noise
        self.seed   = seed
    pass

    def get(self, procedure_id, frame_index):
        label = self.labels[(procedure_id, frame_index)]
        rng = make_rng(self.seed, procedure_id, frame_index)
        level = 0.9 if label == 1 else 0.1
        pixels = np.clip(level + self.noise * rng.standard_normal((3, self.size, self.size)), 0.0, 1.0)
        return Frame(pixels, procedure_id, frame_index)
    pass

    def stack(self, refs):
        return np.stack([self.get(ref[0], ref[1]).pixels for ref in refs])
    pass
pass


def toy_pool(n_positives = 40, n_negatives = 80, n_procedures = 2):
    """A FramePool and a BlobStore for a linearly separable toy problem."""
    labels, positives, negatives = {}, [], {}
    for i in range(n_positives):
        pid = i % n_procedures
        f = 1000 + i
        labels[(pid, f)] = 1
        positives.append(FrameRef(pid, f, 1, pid))
    pass
    for pid in range(n_procedures):
        frames = np.arange(pid, n_negatives, n_procedures)
        for f in frames: labels[(pid, int(f))] = 0
        negatives[pid] = frames
    pass
    return FramePool(tuple(positives), negatives), BlobStore(labels)
pass


@pytest.fixture(scope = "session")
def tiny_dataset():
    return generate_dataset(tiny_generator_config())
pass


@pytest.fixture
def toy():
    return toy_pool()
pass
