import numpy as np
import pytest
import torch

from raretrip.models import LayerSpec, RaretripConfigError, ShapeError, default_layer_specs, init_params
from raretrip.models._utils import make_rng
from raretrip.cam import (
    ActivationMap,
    compute_cam,
    effective_weights,
    upsample,
    localization_hit,
    localization_rate,
    export_overlay,
    cam_for_frames,
    gallery,
)
from raretrip.evaluator import ScoredFrame
from raretrip.save import read_ppm
from raretrip.synthdata import Frame


def _symmetrized(model):
    """Averages every 3 x 3 kernel over its four rotations."""
    for name, p in model.params.items():
        if p.dim() == 4:
            model.params[name] = sum(torch.rot90(p, r, dims = (2, 3)) for r in range(4)) / 4
    pass
    return model
pass


def test_compute_cam_examples():
    rng = make_rng(0)
    feature_maps = rng.random((4, 3, 5))
    assert np.array_equal(compute_cam(feature_maps, [0, 1, 0, 0]).grid, feature_maps[1])
    assert np.count_nonzero(compute_cam(feature_maps, np.zeros(4)).grid) == 0

    weights = rng.standard_normal(4)
    expected = np.zeros((3, 5))
    for k in range(4):
        for x in range(3):
            for y in range(5):
                expected[x, y] += weights[k] * feature_maps[k, x, y]
    pass
    assert np.allclose(compute_cam(feature_maps, weights).grid, expected, rtol = 0, atol = 1e-12)
pass


def test_compute_cam_is_linear_in_the_weights():
    rng = make_rng(1)
    feature_maps = rng.random((6, 4, 4))
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    combined = compute_cam(feature_maps, 2 * a - 3 * b).grid
    separate = 2 * compute_cam(feature_maps, a).grid - 3 * compute_cam(feature_maps, b).grid
    assert np.allclose(combined, separate, rtol = 0, atol = 1e-12)
pass


def test_compute_cam_shape_errors():
    with pytest.raises(ShapeError):
        compute_cam(np.zeros((4, 3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        compute_cam(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        ActivationMap(np.zeros(4))
    with pytest.raises(FloatingPointError):
        ActivationMap(np.full((2, 2), np.nan))
pass


def test_effective_weights():
    plain = init_params(default_layer_specs(), seed = 0)
    v = plain.classifier_weights
    assert torch.equal(effective_weights(plain), v)
    assert torch.equal(effective_weights(plain, class_index = 0), -v)

    headed = init_params(default_layer_specs(8), seed = 0)
    W = headed.params[f"layers.{headed.embedding_head_index}.weight"]
    expected = W.t() @ headed.classifier_weights
    assert effective_weights(headed).shape == (16,)
    assert torch.allclose(effective_weights(headed), expected, rtol = 0, atol = 1e-15)
    with pytest.raises(RaretripConfigError):
        effective_weights(plain, class_index = 2)
pass


def test_effective_weights_rejects_deep_heads():
    specs = (
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", in_dim = 3, out_dim = 4, role = "embedding"),
        LayerSpec("dense", in_dim = 4, out_dim = 4, role = "embedding"),
        LayerSpec("dense", in_dim = 4, out_dim = 1, role = "classifier"),
        LayerSpec("sigmoid", role = "classifier"),
    )
    with pytest.raises(RaretripConfigError, match = "dense"):
        effective_weights(init_params(specs, seed = 0))
pass


def test_upsample():
    constant = ActivationMap(np.full((4, 4), 0.3))
    assert np.allclose(upsample(constant, (16, 16)), 0.3, rtol = 0, atol = 1e-15)

    grid = make_rng(2).random((4, 5))
    up = upsample(ActivationMap(grid), (16, 20))
    assert up.shape == (16, 20)
    for r, c in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert up[r, c] == pytest.approx(grid[r, c], abs = 1e-12)
    assert np.allclose(upsample(grid, (4, 5)), grid, rtol = 0, atol = 1e-12)
    with pytest.raises(ShapeError):
        upsample(ActivationMap(grid), (3, 5))
pass


def test_localization_hit():
    mask = np.zeros((16, 16), dtype = bool)
    mask[4:6, 4:6] = True

    def peak_at(r, c):
        cam = np.zeros((16, 16))
        cam[r, c] = 1.0
        return cam
    pass

    assert localization_hit(peak_at(5, 5), mask)
    assert localization_hit(peak_at(5, 7), mask, dilation_px = 2)
    assert not localization_hit(peak_at(5, 7), mask, dilation_px = 1)
    assert not localization_hit(peak_at(12, 12), mask)
    with pytest.raises(ValueError):
        localization_hit(peak_at(5, 5), np.zeros((16, 16), dtype = bool))
    with pytest.raises(ShapeError):
        localization_hit(np.zeros((8, 8)), mask)
pass


def test_localization_rate():
    assert localization_rate([True, False, True, True]) == 0.75
    assert np.isnan(localization_rate([]))
pass


def test_export_overlay(tmp_path):
    frame = Frame(np.full((3, 4, 4), 0.4), 0, 0)
    flat = read_ppm(export_overlay(frame, np.full((4, 4), 7.0), tmp_path / "flat.ppm"))
    assert np.allclose(flat, 0.2, atol = 1 / 255)

    cam = np.zeros((4, 4))
    cam[1, 2] = 5.0
    peaked = read_ppm(export_overlay(frame, cam, tmp_path / "peaked.ppm"))
    assert peaked[0, 1, 2] == pytest.approx(0.7, abs = 1 / 255)
    assert peaked[1, 1, 2] == pytest.approx(0.2, abs = 1 / 255)
    assert peaked[0, 0, 0] == pytest.approx(0.2, abs = 1 / 255)
    with pytest.raises(ShapeError):
        export_overlay(frame, np.zeros((8, 8)), tmp_path / "bad.ppm")
pass


def test_cam_for_frames():
    model = init_params(default_layer_specs(8), seed = 5)
    X = make_rng(5).random((3, 3, 16, 16))
    maps = cam_for_frames(model, X, refs = [(0, 1), (0, 2), (4, 7)])
    assert len(maps) == 3
    assert all(m.shape == (4, 4) for m in maps)
    assert (maps[2].procedure_id, maps[2].frame_index) == (4, 7)

    frames = [Frame(X[i], 0, i) for i in range(3)]
    negated = cam_for_frames(model, frames, class_index = 0)
    for positive, negative in zip(maps, negated):
        assert np.allclose(positive.grid, -negative.grid, rtol = 0, atol = 1e-12)
        assert negative.class_index == 0
    pass
pass


def test_cam_follows_rotations_of_the_frame():
    model = _symmetrized(init_params(default_layer_specs(), seed = 6))
    X = make_rng(6).random((1, 3, 16, 16))
    rotated = np.ascontiguousarray(np.rot90(X, 1, axes = (2, 3)))
    base = cam_for_frames(model, X)[0].grid
    turned = cam_for_frames(model, rotated)[0].grid
    assert np.allclose(turned, np.rot90(base, 1), rtol = 0, atol = 1e-12)
pass


def test_gallery_split_and_order():
    scored = [
        ScoredFrame(0, 0, 1, 0.9, 0),
        ScoredFrame(0, 1, 1, 0.7, 0),
        ScoredFrame(0, 2, 1, 0.2, 0),
        ScoredFrame(0, 3, 1, 0.1, 0),
        ScoredFrame(1, 0, 0, 0.8),
        ScoredFrame(1, 1, 0, 0.6),
        ScoredFrame(1, 2, 0, 0.3),
    ]
    kinds = gallery(scored, 0.5)
    assert [s.score for s in kinds["true_positive"]]  == [0.9, 0.7]
    assert [s.score for s in kinds["false_positive"]] == [0.8, 0.6]
    assert [s.score for s in kinds["false_negative"]] == [0.1, 0.2]
    assert sum(len(v) for v in kinds.values()) == 6
    assert [len(v) for v in gallery(scored, 0.5, per_kind = 1).values()] == [1, 1, 1]
pass
