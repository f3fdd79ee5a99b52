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


def dense_forward(X : torch.Tensor, W : torch.Tensor, b : torch.Tensor) -> torch.Tensor:
    """
    X: (N, in_dim)   W: (out_dim, in_dim)   b: (out_dim,)
    Y = X @ W.T + b
    """
    return torch.addmm(b, X, W.t())
pass


def dense_backward(dY : torch.Tensor, X : torch.Tensor, W : torch.Tensor):
    """
    dC/dX = dY @ W
    dC/dW = dY.T @ X
    dC/db = sum over N of dY
    """
    dX = dY @ W
    dW = dY.t() @ X
    db = dY.sum(dim = 0)
    return dX, dW, db
pass


class Fast_Dense(torch.autograd.Function):
    @staticmethod
    def forward(ctx, X, W, b):
        ctx.save_for_backward(X, W)
        return dense_forward(X, W, b)
    pass

    @staticmethod
    def backward(ctx, dY):
        X, W = ctx.saved_tensors
        return dense_backward(dY, X, W)
    pass
pass


def test_dense(bsz = 3, in_dim = 5, out_dim = 4, random_state = 3407):
    X = random_tensor(bsz, in_dim, seed = random_state)
    W = random_tensor(out_dim, in_dim, seed = random_state + 1)
    b = random_tensor(out_dim, seed = random_state + 2)
    assert(run_gradcheck(Fast_Dense.apply, (X, W, b)))
pass


def test_dense_linear_case(in_dim = 6, random_state = 3407):
    # y = W x with a single output and loss = y, so dC/dW = x^T
    x = random_tensor(1, in_dim, seed = random_state, requires_grad = False)
    W = random_tensor(1, in_dim, seed = random_state + 1, requires_grad = False)
    dY = torch.ones((1, 1), dtype = x.dtype)
    _, dW, db = dense_backward(dY, x, W)
    assert(torch.equal(dW, x))
    assert(torch.equal(db, torch.ones(1, dtype = x.dtype)))
pass


def testing_suite_dense():
    for in_dim, out_dim in [(16, 1), (16, 8), (5, 4)]:
        for random_state in [3407, 42]:
            test_dense(in_dim = in_dim, out_dim = out_dim, random_state = random_state)
        pass
    pass
    test_dense_linear_case()
pass
