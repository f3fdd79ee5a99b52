import math

import pytest
import torch

from raretrip.kernels.utils import random_tensor
from raretrip.models import (
    LayerSpec,
    ModelState,
    GradientSet,
    RaretripConfigError,
    ShapeError,
    NonFiniteGradientError,
    CheckpointError,
    default_layer_specs,
    infer_shapes,
    init_params,
    forward,
    backward,
    sgd_step,
)
from raretrip.save import save_checkpoint, load_checkpoint, CHECKPOINT_MAGIC


def _filled(model, value):
    return ModelState(model.layers, {k : torch.full_like(v, value) for k, v in model.params.items()}, model.seed)
pass


def _head(*layers):
    return tuple(layers) + (
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", in_dim = 3, out_dim = 1, role = "classifier"),
        LayerSpec("sigmoid", role = "classifier"),
    )
pass


def test_default_architecture_shapes():
    specs = default_layer_specs(32)
    shapes = infer_shapes(specs, (5, 3, 32, 32))
    assert [spec.kind for spec in specs] == [
        "conv3x3", "relu", "maxpool2", "conv3x3", "relu", "maxpool2",
        "residual_block", "global_avg_pool", "dense", "relu", "dense", "sigmoid",
    ]
    assert shapes[6] == (5, 16, 8, 8)
    assert shapes[-1] == (5, 1)
    model = init_params(specs, seed = 0)
    assert model.feature_index == 6
    assert model.embedding_dim == 32
    assert model.embedding_head_index == 8
    assert init_params(default_layer_specs(), seed = 0).embedding_dim == 16
pass


def test_layer_spec_validation():
    with pytest.raises(RaretripConfigError):
        LayerSpec("attention")
    with pytest.raises(RaretripConfigError):
        LayerSpec("residual_block", in_channels = 4, out_channels = 8)
    with pytest.raises(RaretripConfigError):
        LayerSpec("dense", in_dim = 0, out_dim = 1)
    with pytest.raises(RaretripConfigError):
        default_layer_specs(16, embedding_activation = "tanh")
    with pytest.raises(ShapeError):
        init_params(default_layer_specs()[:-1], seed = 0)
pass


def test_residual_block_with_zero_branch_is_identity():
    model = _filled(init_params(_head(LayerSpec("residual_block", in_channels = 3, out_channels = 3)), seed = 0), 0.0)
    X = random_tensor(2, 3, 6, 6, seed = 1, requires_grad = False)
    assert torch.equal(forward(model, X).outputs[0], X)
pass


def test_identity_kernel_and_constant_pooling():
    model = init_params(_head(LayerSpec("conv3x3", in_channels = 3, out_channels = 3)), seed = 0)
    weight = torch.zeros(3, 3, 3, 3, dtype = torch.float64)
    for c in range(3): weight[c, c, 1, 1] = 1.0
    model.params["layers.0.weight"] = weight
    X = random_tensor(2, 3, 7, 7, seed = 2, requires_grad = False)
    activations = forward(model, X)
    assert torch.allclose(activations.outputs[0], X, rtol = 0, atol = 1e-15)

    constant = torch.full((2, 3, 7, 7), 0.37, dtype = torch.float64)
    pooled = forward(model, constant).outputs[model.gap_index]
    assert torch.allclose(pooled, torch.full((2, 3), 0.37, dtype = torch.float64))
pass


def test_forward_shape_errors_name_the_layer():
    model = init_params(default_layer_specs(), seed = 0)
    with pytest.raises(ShapeError, match = "layer 0"):
        forward(model, torch.zeros(1, 4, 8, 8))
    with pytest.raises(ShapeError, match = "layer 5"):
        forward(model, torch.zeros(1, 3, 2, 2))
    with pytest.raises(ShapeError):
        forward(model, torch.zeros(3, 8, 8))
pass


def test_forward_is_deterministic():
    model = init_params(default_layer_specs(8), seed = 3)
    X = random_tensor(4, 3, 16, 16, seed = 3, requires_grad = False)
    first, second = forward(model, X), forward(model, X)
    assert torch.equal(first.class_probability, second.class_probability)
    assert torch.equal(first.embedding, second.embedding)
    assert first.feature_maps.shape == (4, 16, 4, 4)
pass


def test_zero_upstream_gradient():
    model = init_params(default_layer_specs(8), seed = 0)
    activations = forward(model, random_tensor(3, 3, 8, 8, seed = 0, requires_grad = False))
    grads = backward(model, activations, grad_probability = torch.zeros(3), grad_embedding = torch.zeros(3, 8))
    assert set(grads) == set(model.params)
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())
pass


def test_classifier_weight_gradient_is_its_input():
    # A logit gradient of one makes dW equal to the classifier input
    model = init_params(_head(), seed = 4)
    X = random_tensor(1, 3, 4, 4, seed = 4, requires_grad = False)
    activations = forward(model, X)
    p = activations.class_probability
    grads = backward(model, activations, grad_probability = 1.0 / (p * (1.0 - p)))
    features = activations.outputs[model.gap_index]
    assert torch.allclose(grads["layers.1.weight"], features, rtol = 1e-12)
    assert grads["layers.1.bias"].item() == pytest.approx(1.0, rel = 1e-12)
pass


def test_backward_stop_at_leaves_lower_layers_zero():
    model = init_params(default_layer_specs(), seed = 0)
    activations = forward(model, random_tensor(2, 3, 8, 8, seed = 0, requires_grad = False))
    grads = backward(model, activations, grad_probability = torch.ones(2), stop_at = model.classifier_index)
    for name in model.parameter_names(("backbone",)):
        assert torch.count_nonzero(grads[name]) == 0
    assert torch.count_nonzero(grads[f"layers.{model.classifier_index}.weight"]) > 0
pass


def test_backward_rejects_stale_activations():
    small = init_params(default_layer_specs(), seed = 0)
    X = random_tensor(2, 3, 8, 8, seed = 0, requires_grad = False)
    with pytest.raises(ShapeError, match = "stale"):
        backward(init_params(default_layer_specs(8), seed = 0), forward(small, X), grad_probability = torch.ones(2))
    narrow = init_params(default_layer_specs(widths = (4, 8)), seed = 0)
    with pytest.raises(ShapeError, match = "stale"):
        backward(small, forward(narrow, X), grad_probability = torch.ones(2))
    with pytest.raises(ShapeError):
        backward(small, forward(small, X), grad_probability = torch.ones(3))
pass


def test_sgd_step_arithmetic():
    model = _filled(init_params(default_layer_specs(), seed = 0), 1.0)
    ones  = GradientSet({k : torch.ones_like(v) for k, v in model.params.items()})
    zeros = GradientSet({k : torch.zeros_like(v) for k, v in model.params.items()})

    unchanged = sgd_step(model, ones, learning_rate = 0.0)
    assert all(torch.equal(unchanged.params[k], model.params[k]) for k in model.params)
    stepped = sgd_step(model, ones, learning_rate = 0.1)
    assert all(torch.allclose(p, torch.full_like(p, 0.9)) for p in stepped.params.values())
    decayed = sgd_step(model, zeros, learning_rate = 0.1, weight_decay = 0.1)
    assert all(torch.allclose(p, torch.full_like(p, 0.99)) for p in decayed.params.values())
pass


def test_sgd_step_trainable_subset_and_errors():
    model = init_params(default_layer_specs(), seed = 0)
    grads = GradientSet({k : torch.ones_like(v) for k, v in model.params.items()})
    classifier = model.parameter_names(("classifier",))
    stepped = sgd_step(model, grads, 0.1, trainable = classifier)
    for name in model.parameter_names(("backbone",)):
        assert stepped.params[name] is model.params[name]
    pass

    grads["layers.0.weight"][0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteGradientError, match = "layers.0.weight"):
        sgd_step(model, grads, 0.1)
    with pytest.raises(RaretripConfigError):
        sgd_step(model, grads, -1.0, trainable = classifier)
    del grads["layers.0.bias"]
    with pytest.raises(ShapeError):
        sgd_step(model, grads, 0.1, trainable = classifier)
pass


def test_init_params_bounds_and_determinism():
    specs = default_layer_specs(8)
    first, second = init_params(specs, seed = 3407), init_params(specs, seed = 3407)
    assert all(torch.equal(first.params[k], second.params[k]) for k in first.params)
    assert not torch.equal(first.params["layers.0.weight"], init_params(specs, seed = 1).params["layers.0.weight"])

    head = first.params[f"layers.{first.embedding_head_index}.weight"]
    assert head.shape == (8, 16)
    assert head.abs().max().item() <= math.sqrt(6.0 / 16)
    conv = first.params["layers.3.weight"]
    assert conv.abs().max().item() <= math.sqrt(6.0 / (8 * 9))
    for name, p in first.params.items():
        if name.endswith("bias"): assert torch.count_nonzero(p) == 0
    pass
pass


def test_checkpoint_roundtrip(tmp_path):
    model = init_params(default_layer_specs(8, embedding_activation = "linear"), seed = 12)
    path = save_checkpoint(model, tmp_path / "model.trm", extra = {"method" : "triplet_batch_all"})
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    loaded = load_checkpoint(path)
    assert loaded.layers == model.layers
    assert loaded.seed == 12
    assert all(torch.equal(loaded.params[k], model.params[k]) for k in model.params)
pass


def test_checkpoint_corruption(tmp_path):
    model = init_params(default_layer_specs(), seed = 0)
    data = save_checkpoint(model, tmp_path / "model.trm").read_bytes()

    (tmp_path / "magic.trm").write_bytes(b"XXXX\n" + data[5:])
    (tmp_path / "short.trm").write_bytes(data[:-8])
    (tmp_path / "long.trm") .write_bytes(data + b"\x00" * 8)
    (tmp_path / "stub.trm") .write_bytes(CHECKPOINT_MAGIC + b"\x01")
    for name in ("magic", "short", "long", "stub"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.trm")
    pass
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.trm")
pass
