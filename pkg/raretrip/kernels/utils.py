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
from ..models._utils import DTYPE, ShapeError

# Finite difference settings shared by every kernel test
GRADCHECK_EPS  : float = 1e-3
GRADCHECK_RTOL : float = 1e-4
GRADCHECK_ATOL : float = 1e-7


def check_rank(X : torch.Tensor, rank : int, where : str) -> None:
    if X.dim() != rank:
        raise ShapeError(
            f"Raretrip: {where} expects a rank-{rank} tensor, "\
            f"but got shape {tuple(X.shape)}."
        )
    pass
pass


def check_channels(X : torch.Tensor, channels : int, where : str) -> None:
    if X.shape[1] != channels:
        raise ShapeError(
            f"Raretrip: {where} expects {channels} input channels/features, "\
            f"but got shape {tuple(X.shape)}."
        )
    pass
pass


def random_tensor(*shape, seed = 3407, dtype = DTYPE, requires_grad = True) -> torch.Tensor:
    generator = torch.Generator(device = "cpu")
    generator.manual_seed(seed)
    X = torch.randn(shape, generator = generator, dtype = dtype)
    return X.requires_grad_(requires_grad)
pass


def run_gradcheck(function, inputs) -> bool:
    return torch.autograd.gradcheck(
        function,
        inputs,
        eps  = GRADCHECK_EPS,
        atol = GRADCHECK_ATOL,
        rtol = GRADCHECK_RTOL,
    )
pass
