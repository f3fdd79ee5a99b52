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
from .conv import conv3x3_forward, conv3x3_backward
from .activations import relu_forward, relu_backward
from .utils import random_tensor, run_gradcheck


def residual_forward(X, W1, b1, W2, b2):
    """
    y = F(x) + x  with  F(x) = conv2(relu(conv1(x)))
    No activation after the sum, so F = 0 gives the identity map.
    Returns the output and the (Z1, A1) cache used by backward.
    """
    Z1 = conv3x3_forward(X, W1, b1)
    A1 = relu_forward(Z1)
    Y  = conv3x3_forward(A1, W2, b2) + X
    return Y, (Z1, A1)
pass


def residual_backward(dY, X, W1, W2, cache):
    Z1, A1 = cache
    dA1, dW2, db2 = conv3x3_backward(dY, A1, W2)
    dZ1 = relu_backward(dA1, Z1)
    dX, dW1, db1 = conv3x3_backward(dZ1, X, W1)
    # Skip connection
    dX = dX + dY
    return dX, dW1, db1, dW2, db2
pass


class Fast_Residual(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X, W1, b1, W2, b2):
        Y, (Z1, A1) = residual_forward(X, W1, b1, W2, b2)
        ctx.save_for_backward(X, W1, W2, Z1, A1)
        return Y
    pass

    @staticmethod
    def backward(ctx, dY):
        X, W1, W2, Z1, A1 = ctx.saved_tensors
        return residual_backward(dY, X, W1, W2, (Z1, A1))
    pass
pass


def test_residual(bsz = 2, channels = 4, size = 4, random_state = 3407):
    X  = random_tensor(bsz, channels, size, size, seed = random_state)
    W1 = random_tensor(channels, channels, 3, 3, seed = random_state + 1)
    b1 = random_tensor(channels, seed = random_state + 2)
    W2 = random_tensor(channels, channels, 3, 3, seed = random_state + 3)
    b2 = random_tensor(channels, seed = random_state + 4)
    # Push the inner pre-activations far from the ReLU kink, half the channels on each side
    with torch.no_grad():
        b1 += 20.0 * torch.tensor([(-1.0) ** c for c in range(channels)], dtype = b1.dtype)
    pass
    assert(run_gradcheck(Fast_Residual.apply, (X, W1, b1, W2, b2)))
pass


def test_residual_identity(bsz = 2, channels = 4, size = 5, random_state = 3407):
    X  = random_tensor(bsz, channels, size, size, seed = random_state, requires_grad = False)
    W1 = random_tensor(channels, channels, 3, 3, seed = random_state + 1, requires_grad = False)
    b1 = random_tensor(channels, seed = random_state + 2, requires_grad = False)
    # Zeroing the last conv of F is enough for F(x) = 0
    W2 = torch.zeros_like(W1)
    b2 = torch.zeros_like(b1)
    Y, _ = residual_forward(X, W1, b1, W2, b2)
    assert(torch.equal(Y, X))
pass


def testing_suite_residual():
    for random_state in [3407, 42, 0]:
        test_residual(random_state = random_state)
    pass
    test_residual_identity()
pass
