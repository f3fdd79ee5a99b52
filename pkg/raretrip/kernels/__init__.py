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

from .conv import (
    conv3x3_forward,
    conv3x3_backward,
    fast_conv3x3,
    testing_suite_conv3x3,
)
from .pooling import (
    maxpool2_forward,
    maxpool2_backward,
    global_avg_pool_forward,
    global_avg_pool_backward,
    testing_suite_pooling,
)
from .activations import (
    relu_forward,
    relu_backward,
    sigmoid_forward,
    sigmoid_backward,
    l2_normalize_forward,
    l2_normalize_backward,
    testing_suite_activations,
)
from .dense    import dense_forward, dense_backward, testing_suite_dense
from .residual import residual_forward, residual_backward, testing_suite_residual
from .cross_entropy_loss import bce_loss, mean_bce_loss, testing_suite_bce
from .triplet_loss import (
    EmbeddingBatch,
    TripletIndex,
    BatchAllResult,
    BatchHardResult,
    pairwise_squared_distances,
    triplet_term,
    triplet_indices,
    batch_all_loss,
    batch_hard_loss,
    testing_suite_triplet_loss,
)
