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

# 3x3 kernels with padding = 1 keep H and W, so CAMs stay aligned with the input
PADDING : int = 1


def conv3x3_forward(X : torch.Tensor, W : torch.Tensor, b : torch.Tensor) -> torch.Tensor:
    """
    X: (N, C_in, H, W)   W: (C_out, C_in, 3, 3)   b: (C_out,)
    Y: (N, C_out, H, W)
    """
    return F.conv2d(X, W, b, stride = 1, padding = PADDING)
pass


def conv3x3_backward(dY : torch.Tensor, X : torch.Tensor, W : torch.Tensor):
    """
    Y = X * W + b  (cross-correlation)
    dC/dX = dY *T W   (transposed convolution)
    dC/dW = X  * dY   (correlation summed over the batch)
    dC/db = sum over N, H, W of dY
    """
    dX = torch.nn.grad.conv2d_input (X.shape, W, dY, stride = 1, padding = PADDING)
    dW = torch.nn.grad.conv2d_weight(X, W.shape, dY, stride = 1, padding = PADDING)
    db = dY.sum(dim = (0, 2, 3))
    return dX, dW, db
pass


class Fast_Conv3x3(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X, W, b):
        ctx.save_for_backward(X, W)
        return conv3x3_forward(X, W, b)
    pass

    @staticmethod
    def backward(ctx, dY):
        X, W = ctx.saved_tensors
        dX, dW, db = conv3x3_backward(dY, X, W)
        return dX, dW, db
    pass
pass


def fast_conv3x3(X, W, b):
    return Fast_Conv3x3.apply(X, W, b)
pass


def test_conv3x3(bsz = 2, in_channels = 3, out_channels = 4, size = 6, random_state = 3407):
    X = random_tensor(bsz, in_channels, size, size, seed = random_state)
    W = random_tensor(out_channels, in_channels, 3, 3, seed = random_state + 1)
    b = random_tensor(out_channels, seed = random_state + 2)
    assert(run_gradcheck(fast_conv3x3, (X, W, b)))
pass


def test_conv3x3_identity(size = 7, channels = 3, random_state = 3407):
    # A centred identity kernel with padding = same returns the input
    X = random_tensor(1, channels, size, size, seed = random_state, requires_grad = False)
    W = torch.zeros((channels, channels, 3, 3), dtype = X.dtype)
    for c in range(channels): W[c, c, 1, 1] = 1.0
    b = torch.zeros(channels, dtype = X.dtype)
    assert(torch.equal(conv3x3_forward(X, W, b), X))
pass


def testing_suite_conv3x3():
    for in_channels, out_channels in [(3, 8), (8, 16), (16, 16)]:
        for random_state in [3407, 42]:
            test_conv3x3(
                bsz          = 2,
                in_channels  = in_channels,
                out_channels = out_channels,
                size         = 4,
                random_state = random_state,
            )
        pass
    pass
    test_conv3x3_identity()
pass
