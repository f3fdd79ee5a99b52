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

import torch
import torch.nn.functional as F
from .utils import random_tensor, run_gradcheck


def maxpool2_forward(X : torch.Tensor):
    """
    2x2 window, stride 2. Output is (N, C, H // 2, W // 2).
    Returns the output and the flat argmax indices needed by backward.
    """
    Y, indices = F.max_pool2d(X, kernel_size = 2, stride = 2, return_indices = True)
    return Y, indices
pass


def maxpool2_backward(dY : torch.Tensor, indices : torch.Tensor, input_shape) -> torch.Tensor:
    # Route every upstream gradient to the position that won the max
    N, C, H, W = input_shape
    dX = torch.zeros((N, C, H * W), dtype = dY.dtype, device = dY.device)
    dX.scatter_add_(2, indices.flatten(2), dY.flatten(2))
    return dX.view(N, C, H, W)
pass


def global_avg_pool_forward(X : torch.Tensor) -> torch.Tensor:
    return X.mean(dim = (2, 3))
pass


def global_avg_pool_backward(dY : torch.Tensor, input_shape) -> torch.Tensor:
    N, C, H, W = input_shape
    return (dY / (H * W)).view(N, C, 1, 1).expand(N, C, H, W).contiguous()
pass


class Fast_MaxPool2(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X):
        Y, indices = maxpool2_forward(X)
        ctx.save_for_backward(indices)
        ctx.input_shape = tuple(X.shape)
        return Y
    pass

    @staticmethod
    def backward(ctx, dY):
        indices, = ctx.saved_tensors
        return maxpool2_backward(dY, indices, ctx.input_shape)
    pass
pass


class Fast_GlobalAvgPool(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X):
        ctx.input_shape = tuple(X.shape)
        return global_avg_pool_forward(X)
    pass

    @staticmethod
    def backward(ctx, dY):
        return global_avg_pool_backward(dY, ctx.input_shape)
    pass
pass


def test_maxpool2(bsz = 2, channels = 3, size = 6, random_state = 3407):
    # Distinct values 0.01 apart, so a perturbation of eps never changes the argmax
    generator = torch.Generator(device = "cpu")
    generator.manual_seed(random_state)
    n_elements = bsz * channels * size * size
    X = torch.randperm(n_elements, generator = generator).to(torch.float64) * 0.01
    X = X.view(bsz, channels, size, size).requires_grad_(True)
    assert(run_gradcheck(Fast_MaxPool2.apply, (X,)))
pass


def test_global_avg_pool(bsz = 2, channels = 3, size = 5, random_state = 3407):
    X = random_tensor(bsz, channels, size, size, seed = random_state)
    assert(run_gradcheck(Fast_GlobalAvgPool.apply, (X,)))

    # Mean of a constant map is the constant
    c = 0.375
    constant = torch.full((1, channels, size, size), c, dtype = X.dtype)
    assert(torch.equal(global_avg_pool_forward(constant), torch.full((1, channels), c, dtype = X.dtype)))
pass


def testing_suite_pooling():
    for size in [4, 6, 8]:
        for random_state in [3407, 42]:
            test_maxpool2(size = size, random_state = random_state)
            test_global_avg_pool(size = size, random_state = random_state)
        pass
    pass
pass
