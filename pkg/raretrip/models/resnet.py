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

__all__ = [
    "LAYER_KINDS",
    "LayerSpec",
    "ModelState",
    "GradientSet",
    "ForwardResult",
    "default_layer_specs",
    "validate_specs",
    "infer_shapes",
    "init_params",
    "forward",
    "backward",
    "sgd_step",
]

import math
from dataclasses import dataclass, asdict
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple
import torch

from ._utils import (
    DTYPE,
    RaretripConfigError,
    ShapeError,
    NonFiniteGradientError,
    make_torch_generator,
)
from ..kernels.utils import check_rank, check_channels
from ..kernels.conv import conv3x3_forward, conv3x3_backward
from ..kernels.pooling import (
    maxpool2_forward,
    maxpool2_backward,
    global_avg_pool_forward,
    global_avg_pool_backward,
)
from ..kernels.activations import (
    relu_forward,
    relu_backward,
    sigmoid_forward,
    sigmoid_backward,
)
from ..kernels.dense import dense_forward, dense_backward
from ..kernels.residual import residual_forward, residual_backward

LAYER_KINDS = (
    "conv3x3",
    "relu",
    "maxpool2",
    "residual_block",
    "global_avg_pool",
    "dense",
    "sigmoid",
)
LAYER_ROLES = ("backbone", "embedding", "classifier")
HEAD_ACTIVATIONS = ("relu", "linear")
INPUT_CHANNELS = 3


@dataclass(frozen = True)
class LayerSpec:
    kind         : str
    in_channels  : Optional[int] = None
    out_channels : Optional[int] = None
    in_dim       : Optional[int] = None
    out_dim      : Optional[int] = None
    # backbone layers get triplet gradients, the classifier gets BCE gradients
    role         : str = "backbone"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise RaretripConfigError(f"Raretrip: unknown layer kind '{self.kind}'. Choose from {LAYER_KINDS}.")
        if self.role not in LAYER_ROLES:
            raise RaretripConfigError(f"Raretrip: unknown layer role '{self.role}'. Choose from {LAYER_ROLES}.")
        if self.kind in ("conv3x3", "residual_block"):
            if not (self.in_channels and self.out_channels and self.in_channels > 0 and self.out_channels > 0):
                raise RaretripConfigError(f"Raretrip: {self.kind} needs positive in_channels and out_channels.")
            if self.kind == "residual_block" and self.in_channels != self.out_channels:
                raise RaretripConfigError(
                    f"Raretrip: residual_block adds its input to its output, so in_channels "\
                    f"({self.in_channels}) must equal out_channels ({self.out_channels})."
                )
        elif self.kind == "dense":
            if not (self.in_dim and self.out_dim and self.in_dim > 0 and self.out_dim > 0):
                raise RaretripConfigError("Raretrip: dense needs positive in_dim and out_dim.")
        pass
    pass

    @property
    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind == "conv3x3":
            return {
                "weight" : (self.out_channels, self.in_channels, 3, 3),
                "bias"   : (self.out_channels,),
            }
        elif self.kind == "residual_block":
            C = self.in_channels
            return {
                "conv1.weight" : (C, C, 3, 3),
                "conv1.bias"   : (C,),
                "conv2.weight" : (C, C, 3, 3),
                "conv2.bias"   : (C,),
            }
        elif self.kind == "dense":
            return {
                "weight" : (self.out_dim, self.in_dim),
                "bias"   : (self.out_dim,),
            }
        return {}
    pass

    def to_dict(self) -> Dict[str, Any]:
        return {k : v for k, v in asdict(self).items() if v is not None}
    pass

    @classmethod
    def from_dict(cls, data : Dict[str, Any]) -> "LayerSpec":
        return cls(**data)
    pass
pass


def default_layer_specs(
    embedding_dim       : Optional[int] = None,
    embedding_activation: str = "relu",
    widths              : Tuple[int, int] = (8, 16),
) -> Tuple[LayerSpec, ...]:
    """
    conv3x3(3->8) + ReLU -> maxpool2 -> conv3x3(8->16) + ReLU -> maxpool2
        -> residual_block(16->16) -> GAP -> [dense(16->E) + activation] -> dense(->1) + sigmoid
    """
    if embedding_activation not in HEAD_ACTIVATIONS:
        raise RaretripConfigError(
            f"Raretrip: embedding_activation must be one of {HEAD_ACTIVATIONS}, got '{embedding_activation}'."
        )
    c1, c2 = widths
    layers = [
        LayerSpec("conv3x3", in_channels = INPUT_CHANNELS, out_channels = c1),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("conv3x3", in_channels = c1, out_channels = c2),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("residual_block", in_channels = c2, out_channels = c2),
        LayerSpec("global_avg_pool"),
    ]
    width = c2
    if embedding_dim is not None:
        if embedding_dim <= 0:
            raise RaretripConfigError(f"Raretrip: embedding_dim must be positive, got {embedding_dim}.")
        layers.append(LayerSpec("dense", in_dim = width, out_dim = embedding_dim, role = "embedding"))
        if embedding_activation == "relu":
            layers.append(LayerSpec("relu", role = "embedding"))
        width = embedding_dim
    pass
    layers.append(LayerSpec("dense", in_dim = width, out_dim = 1, role = "classifier"))
    layers.append(LayerSpec("sigmoid", role = "classifier"))
    return tuple(layers)
pass


def infer_shapes(specs : Sequence[LayerSpec], input_shape : Sequence[int]) -> List[Tuple[int, ...]]:
    """Output shape of every layer for an input of the given shape."""
    shape = tuple(int(x) for x in input_shape)
    shapes = []
    for index, spec in enumerate(specs):
        where = f"layer {index} ({spec.kind})"
        if spec.kind in ("conv3x3", "residual_block"):
            if len(shape) != 4 or shape[1] != spec.in_channels:
                raise ShapeError(f"Raretrip: {where} expects (N, {spec.in_channels}, H, W), got {shape}.")
            shape = (shape[0], spec.out_channels, shape[2], shape[3])
        elif spec.kind == "maxpool2":
            if len(shape) != 4 or shape[2] < 2 or shape[3] < 2:
                raise ShapeError(f"Raretrip: {where} expects (N, C, H >= 2, W >= 2), got {shape}.")
            shape = (shape[0], shape[1], shape[2] // 2, shape[3] // 2)
        elif spec.kind == "global_avg_pool":
            if len(shape) != 4:
                raise ShapeError(f"Raretrip: {where} expects a rank-4 input, got {shape}.")
            shape = (shape[0], shape[1])
        elif spec.kind == "dense":
            if len(shape) != 2 or shape[1] != spec.in_dim:
                raise ShapeError(f"Raretrip: {where} expects (N, {spec.in_dim}), got {shape}.")
            shape = (shape[0], spec.out_dim)
        pass
        shapes.append(shape)
    pass
    return shapes
pass


def validate_specs(specs : Sequence[LayerSpec]) -> None:
    if len(specs) < 3:
        raise ShapeError("Raretrip: a model needs at least a global_avg_pool, a classifier dense and a sigmoid.")
    # Any spatial size works for the shape walk as long as it survives the pools
    n_pools = sum(spec.kind == "maxpool2" for spec in specs)
    first = specs[0]
    channels = first.in_channels if first.kind in ("conv3x3", "residual_block") else INPUT_CHANNELS
    shapes = infer_shapes(specs, (1, channels, 2 ** (n_pools + 1), 2 ** (n_pools + 1)))
    if specs[-1].kind != "sigmoid" or specs[-2].kind != "dense" or shapes[-1] != (1, 1):
        raise ShapeError(
            f"Raretrip: the last two layers must be dense(-> 1) and sigmoid, got "\
            f"{specs[-2].kind} and {specs[-1].kind}."
        )
    if not any(spec.kind == "global_avg_pool" for spec in specs):
        raise ShapeError("Raretrip: the model needs a global_avg_pool layer before its dense layers.")
    pass
pass


class GradientSet(dict):
    """One gradient tensor per parameter name, same shapes as the parameters."""

    def check_congruent(self, model : "ModelState") -> None:
        for name, param in model.params.items():
            if name not in self:
                raise ShapeError(f"Raretrip: gradient for parameter {name} is missing.")
            if self[name].shape != param.shape:
                raise ShapeError(
                    f"Raretrip: gradient for {name} has shape {tuple(self[name].shape)}, "\
                    f"parameter has {tuple(param.shape)}."
                )
        pass
    pass
pass


@dataclass(eq = False)
class ModelState:
    layers : Tuple[LayerSpec, ...]
    params : Dict[str, torch.Tensor]
    seed   : int = 0

    def __post_init__(self):
        self.layers = tuple(self.layers)
        validate_specs(self.layers)
        expected = {}
        for index, spec in enumerate(self.layers):
            for suffix, shape in spec.param_shapes.items():
                expected[f"layers.{index}.{suffix}"] = shape
        pass
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra   = sorted(set(self.params) - set(expected))
            raise ShapeError(f"Raretrip: parameters do not match the layer specs (missing {missing}, unexpected {extra}).")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(
                    f"Raretrip: parameter {name} has shape {tuple(self.params[name].shape)}, expected {shape}."
                )
        pass
        # Layer order, so iteration is deterministic
        self.params = {name : self.params[name] for name in expected}
    pass

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 2
    pass

    @property
    def embedding_index(self) -> int:
        """Index of the layer whose output feeds the classifier."""
        return self.classifier_index - 1
    pass

    @property
    def gap_index(self) -> int:
        return max(i for i, spec in enumerate(self.layers) if spec.kind == "global_avg_pool")
    pass

    @property
    def feature_index(self) -> int:
        """Index of the last spatial layer, the one CAM reads."""
        return self.gap_index - 1
    pass

    @property
    def embedding_dim(self) -> int:
        return self.layers[self.classifier_index].in_dim
    pass

    @property
    def embedding_head_index(self) -> Optional[int]:
        heads = [i for i, spec in enumerate(self.layers) if spec.kind == "dense" and spec.role == "embedding"]
        return heads[0] if heads else None
    pass

    @property
    def classifier_weights(self) -> torch.Tensor:
        return self.params[f"layers.{self.classifier_index}.weight"][0]
    pass

    @property
    def classifier_bias(self) -> float:
        return float(self.params[f"layers.{self.classifier_index}.bias"][0])
    pass

    def parameter_names(self, roles : Optional[Iterable[str]] = None) -> List[str]:
        roles = LAYER_ROLES if roles is None else tuple(roles)
        names = []
        for index, spec in enumerate(self.layers):
            if spec.role not in roles: continue
            names += [f"layers.{index}.{suffix}" for suffix in spec.param_shapes]
        pass
        return names
    pass

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.params.values())
    pass

    def clone(self) -> "ModelState":
        return ModelState(self.layers, {k : v.clone() for k, v in self.params.items()}, self.seed)
    pass
pass


def init_params(specs : Sequence[LayerSpec], seed : int) -> ModelState:
    """
    Weights ~ U[-sqrt(6 / fan_in), +sqrt(6 / fan_in)], biases 0.
    fan_in is in_channels * 9 for 3x3 kernels and in_dim for dense layers.
    """
    specs = tuple(specs)
    validate_specs(specs)
    generator = make_torch_generator(seed, 0)
    params = {}
    for index, spec in enumerate(specs):
        for suffix, shape in spec.param_shapes.items():
            name = f"layers.{index}.{suffix}"
            if suffix.endswith("bias"):
                params[name] = torch.zeros(shape, dtype = DTYPE)
                continue
            fan_in = shape[1] * (9 if len(shape) == 4 else 1)
            bound = math.sqrt(6.0 / fan_in)
            params[name] = (torch.rand(shape, generator = generator, dtype = DTYPE) * 2.0 - 1.0) * bound
        pass
    pass
    return ModelState(specs, params, seed)
pass


@dataclass(eq = False)
class ForwardResult:
    inputs            : torch.Tensor
    outputs           : List[torch.Tensor]   # outputs[i] is the output of layer i
    caches            : List[Any]
    feature_maps      : torch.Tensor         # (N, K, h, w)
    embedding         : torch.Tensor         # (N, embedding_dim)
    class_probability : torch.Tensor         # (N,)

    def layer_input(self, index : int) -> torch.Tensor:
        return self.inputs if index == 0 else self.outputs[index - 1]
    pass
pass


def _layer_forward(index : int, spec : LayerSpec, X : torch.Tensor, params):
    where = f"layer {index} ({spec.kind})"
    prefix = f"layers.{index}."
    kind = spec.kind

    if kind == "conv3x3":
        check_rank(X, 4, where)
        check_channels(X, spec.in_channels, where)
        return conv3x3_forward(X, params[prefix + "weight"], params[prefix + "bias"]), None

    elif kind == "residual_block":
        check_rank(X, 4, where)
        check_channels(X, spec.in_channels, where)
        return residual_forward(
            X,
            params[prefix + "conv1.weight"], params[prefix + "conv1.bias"],
            params[prefix + "conv2.weight"], params[prefix + "conv2.bias"],
        )

    elif kind == "maxpool2":
        check_rank(X, 4, where)
        if X.shape[2] < 2 or X.shape[3] < 2:
            raise ShapeError(f"Raretrip: {where} needs H, W >= 2, got shape {tuple(X.shape)}.")
        return maxpool2_forward(X)

    elif kind == "global_avg_pool":
        check_rank(X, 4, where)
        return global_avg_pool_forward(X), None

    elif kind == "dense":
        check_rank(X, 2, where)
        check_channels(X, spec.in_dim, where)
        return dense_forward(X, params[prefix + "weight"], params[prefix + "bias"]), None

    elif kind == "relu":
        return relu_forward(X), None

    elif kind == "sigmoid":
        return sigmoid_forward(X), None
    pass
    raise RaretripConfigError(f"Raretrip: {where} has no forward.")
pass


def _layer_backward(index : int, spec : LayerSpec, dY, X, Y, cache, params):
    prefix = f"layers.{index}."
    kind = spec.kind

    if kind == "conv3x3":
        dX, dW, db = conv3x3_backward(dY, X, params[prefix + "weight"])
        return dX, {prefix + "weight" : dW, prefix + "bias" : db}

    elif kind == "residual_block":
        dX, dW1, db1, dW2, db2 = residual_backward(
            dY, X, params[prefix + "conv1.weight"], params[prefix + "conv2.weight"], cache,
        )
        return dX, {
            prefix + "conv1.weight" : dW1, prefix + "conv1.bias" : db1,
            prefix + "conv2.weight" : dW2, prefix + "conv2.bias" : db2,
        }

    elif kind == "maxpool2":
        return maxpool2_backward(dY, cache, X.shape), {}

    elif kind == "global_avg_pool":
        return global_avg_pool_backward(dY, X.shape), {}

    elif kind == "dense":
        dX, dW, db = dense_backward(dY, X, params[prefix + "weight"])
        return dX, {prefix + "weight" : dW, prefix + "bias" : db}

    elif kind == "relu":
        return relu_backward(dY, X), {}

    elif kind == "sigmoid":
        return sigmoid_backward(dY, Y), {}
    pass
    raise RaretripConfigError(f"Raretrip: layer {index} ({kind}) has no backward.")
pass


def forward(model : ModelState, batch : torch.Tensor) -> ForwardResult:
    batch = torch.as_tensor(batch, dtype = DTYPE)
    check_rank(batch, 4, "layer 0 (model input)")

    outputs, caches = [], []
    X = batch
    for index, spec in enumerate(model.layers):
        X, cache = _layer_forward(index, spec, X, model.params)
        outputs.append(X)
        caches .append(cache)
    pass

    return ForwardResult(
        inputs            = batch,
        outputs           = outputs,
        caches            = caches,
        feature_maps      = outputs[model.feature_index],
        embedding         = outputs[model.embedding_index],
        class_probability = outputs[-1][:, 0],
    )
pass


def backward(
    model            : ModelState,
    activations      : ForwardResult,
    grad_probability : Optional[torch.Tensor] = None,
    grad_embedding   : Optional[torch.Tensor] = None,
    stop_at          : int = 0,
) -> GradientSet:
    """
    Backpropagates dLoss/dprobability (N,) and/or dLoss/dembedding (N, E).
    Layers below stop_at are not visited and get zero gradients, which is how
    the classifier-only stage avoids touching the backbone.
    """
    N = activations.inputs.shape[0]
    if len(activations.outputs) != len(model.layers):
        raise ShapeError(
            f"Raretrip: stale activations: {len(activations.outputs)} layer outputs for a "\
            f"{len(model.layers)}-layer model."
        )
    expected = infer_shapes(model.layers, activations.inputs.shape)
    for index, (shape, output) in enumerate(zip(expected, activations.outputs)):
        if tuple(output.shape) != shape:
            raise ShapeError(
                f"Raretrip: stale activations at layer {index}: shape {tuple(output.shape)}, "\
                f"the model produces {shape}."
            )
    pass
    if grad_probability is not None:
        grad_probability = torch.as_tensor(grad_probability, dtype = DTYPE)
        if tuple(grad_probability.shape) != (N,):
            raise ShapeError(f"Raretrip: probability gradient must have shape ({N},), got {tuple(grad_probability.shape)}.")
    if grad_embedding is not None:
        grad_embedding = torch.as_tensor(grad_embedding, dtype = DTYPE)
        if tuple(grad_embedding.shape) != (N, model.embedding_dim):
            raise ShapeError(
                f"Raretrip: embedding gradient must have shape ({N}, {model.embedding_dim}), "\
                f"got {tuple(grad_embedding.shape)}."
            )
    pass

    grads = GradientSet({name : torch.zeros_like(p) for name, p in model.params.items()})
    dY = None if grad_probability is None else grad_probability.view(N, 1)
    for index in reversed(range(stop_at, len(model.layers))):
        if index == model.embedding_index and grad_embedding is not None:
            dY = grad_embedding if dY is None else dY + grad_embedding
        if dY is None: continue

        dX, layer_grads = _layer_backward(
            index,
            model.layers[index],
            dY,
            activations.layer_input(index),
            activations.outputs[index],
            activations.caches[index],
            model.params,
        )
        grads.update(layer_grads)
        dY = dX
    pass
    return grads
pass


def sgd_step(
    model         : ModelState,
    grads         : GradientSet,
    learning_rate : float,
    weight_decay  : float = 0.0,
    trainable     : Optional[Iterable[str]] = None,
) -> ModelState:
    """
    p <- p - lr * (g + weight_decay * p) for every trainable parameter.
    Parameters outside `trainable` are carried over as the same tensors.
    """
    if not (learning_rate >= 0.0):
        raise RaretripConfigError(f"Raretrip: learning_rate must be >= 0, got {learning_rate}.")
    if not (weight_decay >= 0.0):
        raise RaretripConfigError(f"Raretrip: weight_decay must be >= 0, got {weight_decay}.")
    names = list(model.params) if trainable is None else list(trainable)
    if not isinstance(grads, GradientSet): grads = GradientSet(grads)
    grads.check_congruent(model)

    # Check everything before touching anything
    for name in names:
        if not torch.isfinite(grads[name]).all():
            index = int(name.split(".")[1])
            raise NonFiniteGradientError(
                f"Raretrip: non-finite gradient for {name} "\
                f"(layer {index}, {model.layers[index].kind}). SGD step aborted."
            )
    pass

    params = dict(model.params)
    for name in names:
        p = params[name]
        params[name] = p - learning_rate * (grads[name] + weight_decay * p)
    pass
    return ModelState(model.layers, params, model.seed)
pass
