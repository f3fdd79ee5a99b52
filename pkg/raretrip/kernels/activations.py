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
from .utils import random_tensor, run_gradcheck

# Norms below this are treated as zero by l2_normalize
L2_EPSILON : float = 1e-12


def relu_forward(X : torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(X, 0.0)
pass


def relu_backward(dY : torch.Tensor, X : torch.Tensor) -> torch.Tensor:
    # Subgradient 0 at X == 0
    return dY * (X > 0).to(dY.dtype)
pass


def sigmoid_forward(X : torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(X)
pass


def sigmoid_backward(dY : torch.Tensor, Y : torch.Tensor) -> torch.Tensor:
    """
    Y = sigmoid(X)
    dY/dX = Y * (1 - Y)
    Uses the forward output, not the input.
    """
    return dY * Y * (1.0 - Y)
pass


def l2_normalize_forward(X : torch.Tensor):
    norm = torch.linalg.vector_norm(X, dim = 1, keepdim = True).clamp_min(L2_EPSILON)
    return X / norm, norm
pass


def l2_normalize_backward(dY : torch.Tensor, Y : torch.Tensor, norm : torch.Tensor) -> torch.Tensor:
    """
    Y = X / |X|
    dC/dX = (dY - Y * <Y, dY>) / |X|
    """
    return (dY - Y * (Y * dY).sum(dim = 1, keepdim = True)) / norm
pass


class Fast_ReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X):
        ctx.save_for_backward(X)
        return relu_forward(X)
    pass

    @staticmethod
    def backward(ctx, dY):
        X, = ctx.saved_tensors
        return relu_backward(dY, X)
    pass
pass


class Fast_Sigmoid(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X):
        Y = sigmoid_forward(X)
        ctx.save_for_backward(Y)
        return Y
    pass

    @staticmethod
    def backward(ctx, dY):
        Y, = ctx.saved_tensors
        return sigmoid_backward(dY, Y)
    pass
pass


class Fast_L2Normalize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X):
        Y, norm = l2_normalize_forward(X)
        ctx.save_for_backward(Y, norm)
        return Y
    pass

    @staticmethod
    def backward(ctx, dY):
        Y, norm = ctx.saved_tensors
        return l2_normalize_backward(dY, Y, norm)
    pass
pass


def test_relu(bsz = 4, dim = 7, random_state = 3407):
    X = random_tensor(bsz, dim, seed = random_state)
    # Keep every entry away from the kink so the finite difference is valid
    with torch.no_grad():
        X += torch.sign(X) * 0.01
    pass
    assert(run_gradcheck(Fast_ReLU.apply, (X,)))
pass


def test_sigmoid(bsz = 4, dim = 7, random_state = 3407):
    X = random_tensor(bsz, dim, seed = random_state)
    assert(run_gradcheck(Fast_Sigmoid.apply, (X,)))
pass


def test_l2_normalize(bsz = 4, dim = 5, random_state = 3407):
    X = random_tensor(bsz, dim, seed = random_state)
    assert(run_gradcheck(Fast_L2Normalize.apply, (X,)))

    Y, _ = l2_normalize_forward(X.detach())
    assert(torch.allclose(torch.linalg.vector_norm(Y, dim = 1), torch.ones(bsz, dtype = X.dtype)))
pass


def testing_suite_activations():
    for random_state in [3407, 42, 0]:
        test_relu(random_state = random_state)
        test_sigmoid(random_state = random_state)
        test_l2_normalize(random_state = random_state)
    pass
pass
