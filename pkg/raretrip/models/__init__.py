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

from ._utils import (
    __version__,
    logger,
    DTYPE,
    RaretripConfigError,
    ManifestError,
    ShapeError,
    NoValidTripletError,
    SingletonClassError,
    NonFiniteGradientError,
    TrainingDivergedError,
    EpochEnd,
    CheckpointError,
    child_seed,
    make_rng,
    make_torch_generator,
    default_jobs,
)
from .resnet import (
    LayerSpec,
    ModelState,
    GradientSet,
    ForwardResult,
    default_layer_specs,
    validate_specs,
    infer_shapes,
    init_params,
    forward,
    backward,
    sgd_step,
)
