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

from packaging.version import Version

try:
    import torch
except ModuleNotFoundError:
    raise ImportError(
        "Raretrip: Pytorch is not installed. Go to https://pytorch.org/.\n"\
        "Any CPU build of Pytorch 2 works."
    )
except Exception as exception:
    raise exception
pass

# float64 autograd.Function and torch.nn.grad need Pytorch 2
if Version(torch.__version__.split("+")[0]) < Version("2.0"):
    raise ImportError(
        f"Raretrip: Pytorch {torch.__version__} is too old. Please update to Pytorch 2."
    )
pass

# Models first - every other module imports the shared utilities from it
from .models import *
from .models import __version__, logger
from .kernels import (
    bce_loss,
    mean_bce_loss,
    EmbeddingBatch,
    BatchAllResult,
    BatchHardResult,
    pairwise_squared_distances,
    triplet_term,
    triplet_indices,
    batch_all_loss,
    batch_hard_loss,
)
from .save import save_checkpoint, load_checkpoint
from .synthdata import (
    GeneratorConfig,
    Frame,
    EventAnnotation,
    DatasetManifest,
    FoldAssignment,
    SyntheticFrameStore,
    PixmapFrameStore,
    generate_dataset,
    augment,
    split_by_procedure,
    write_dataset,
    load_dataset,
)
from .sampler import FramePool, BatchPlan, Batch, compose_batch, epoch_batches
from .trainer import TrainConfig, TrainHistory, train, score_frames
from .evaluator import (
    ScoredFrame,
    RocCurve,
    EvalConfig,
    EvalReport,
    roc_and_auc,
    recall_at_specificity,
    threshold_metrics,
    event_detection,
    evaluate_scores,
    aggregate_reports,
    cross_validate,
    imbalance_sweep,
    parameter_sweep,
)
from .cam import (
    ActivationMap,
    compute_cam,
    effective_weights,
    upsample,
    localization_hit,
    export_overlay,
    cam_for_frames,
)
