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

__version__ = "2025.10.1"

__all__ = [
    "__version__",
    "logger",
    "DTYPE",
    "RaretripConfigError",
    "ManifestError",
    "ShapeError",
    "NoValidTripletError",
    "SingletonClassError",
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "EpochEnd",
    "CheckpointError",
    "child_seed",
    "make_rng",
    "make_torch_generator",
    "default_jobs",
]

import os
import warnings
import numpy as np
import torch
import psutil
from transformers.utils import logging as transformers_logging

# =============================================
# Everything in nn-core is float64 on CPU - gradient checks need it
DTYPE = torch.float64

# The transformers logger gives us warning_once and the usual verbosity knobs
logger = transformers_logging.get_logger("raretrip")

# sklearn complains about classes with fewer members than folds - we check it ourselves
warnings.filterwarnings(action = "ignore", category = UserWarning, module = "sklearn.model_selection")
# =============================================


# =============================================
# Exceptions
class RaretripConfigError(ValueError):
    """Invalid configuration. The CLI maps it to exit status 2."""
pass

class ManifestError(ValueError):
    pass
pass

class ShapeError(ValueError):
    pass
pass

class NoValidTripletError(ValueError):
    pass
pass

class SingletonClassError(NoValidTripletError):
    pass
pass

class NonFiniteGradientError(FloatingPointError):
    pass
pass

class TrainingDivergedError(FloatingPointError):
    pass
pass

class EpochEnd(StopIteration):
    pass
pass

class CheckpointError(ValueError):
    pass
pass
# =============================================


# =============================================
# Seeding. Every random stream derives from (seed, *keys) so results never
# depend on the order in which procedures, folds or sweep cells are executed.
def child_seed(seed : int, *keys : int) -> int:
    sequence = np.random.SeedSequence(int(seed), spawn_key = tuple(int(x) for x in keys))
    low, high = sequence.generate_state(2, dtype = np.uint32)
    return (int(high) << 32) | int(low)
pass


def make_rng(seed : int, *keys : int) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key = tuple(int(x) for x in keys))
    return np.random.Generator(np.random.PCG64(sequence))
pass


def make_torch_generator(seed : int, *keys : int) -> torch.Generator:
    generator = torch.Generator(device = "cpu")
    # manual_seed only accepts values below 2**63
    generator.manual_seed(child_seed(seed, *keys) & ((1 << 63) - 1))
    return generator
pass


def default_jobs() -> int:
    n_cpus = psutil.cpu_count(logical = False)
    if n_cpus is None: n_cpus = os.cpu_count() or 1
    return max(1, int(n_cpus))
pass
# =============================================
