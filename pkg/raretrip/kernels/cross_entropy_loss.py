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

import math
import torch
from ..models._utils import DTYPE

# Probabilities are clamped to [PROBABILITY_EPSILON, 1 - PROBABILITY_EPSILON]
PROBABILITY_EPSILON : float = 1e-12


def bce_loss(p, y):
    """
        Binary Cross Entropy = - y log(p) - (1 - y) log(1 - p)
        dBCE/dp = - y / p + (1 - y) / (1 - p)
                = (p - y) / (p (1 - p))
        Both are evaluated on the clamped probability, so p = 0 or p = 1
        never produce infinities.

        Works elementwise on tensors or on plain floats.
        Returns (loss, gradient with respect to p).
    """
    p = torch.as_tensor(p, dtype = DTYPE)
    y = torch.as_tensor(y, dtype = DTYPE)
    p = p.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON)
    # log1p keeps -log(1 - p) accurate when p is tiny
    loss = -y * torch.log(p) - (1.0 - y) * torch.log1p(-p)
    grad = (p - y) / (p * (1.0 - p))
    return loss, grad
pass


def mean_bce_loss(p : torch.Tensor, y : torch.Tensor):
    """
        Mean BCE over the batch, and its gradient with respect to the probabilities.
        The trainer pushes this gradient through the sigmoid with nn-core's backward.
    """
    loss, grad = bce_loss(p, y)
    n = max(1, loss.numel())
    return loss.mean(), grad / n
pass



def test_bce_values():
    loss, _ = bce_loss(0.5, 1.0)
    assert(abs(loss.item() - math.log(2.0)) <= 1e-12)

    loss, _ = bce_loss(1.0 - 1e-12, 1.0)
    assert(abs(loss.item() - 1e-12) <= 1e-15)

    # Endpoints are absorbed by the clamp
    loss, grad = bce_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))
    assert(torch.isfinite(loss).all() and torch.isfinite(grad).all())
pass


def test_bce_gradient(p = 0.3, y = 0.0, eps = 1e-5):
    _, grad = bce_loss(p, y)
    upper, _ = bce_loss(p + eps, y)
    lower, _ = bce_loss(p - eps, y)
    numerical = (upper - lower).item() / (2 * eps)
    assert(abs(grad.item() - numerical) <= 1e-6 * abs(numerical))
pass


def testing_suite_bce():
    test_bce_values()
    for p in [0.3, 0.5, 0.9]:
        for y in [0.0, 1.0]:
            test_bce_gradient(p = p, y = y)
        pass
    pass
pass
