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
    "ActivationMap",
    "compute_cam",
    "effective_weights",
    "upsample",
    "localization_hit",
    "localization_rate",
    "export_overlay",
    "cam_for_frames",
    "gallery",
    "GALLERY_KINDS",
]

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .models._utils import DTYPE, RaretripConfigError, ShapeError
from .models.resnet import ModelState, forward
from .synthdata import Frame
from .save import write_ppm, write_csv

GALLERY_KINDS = ("true_positive", "false_positive", "false_negative")


@dataclass(eq = False)
class ActivationMap:
    grid         : np.ndarray            # (h, w) at feature-map resolution, signed
    procedure_id : Optional[int] = None
    frame_index  : Optional[int] = None
    class_index  : int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype = np.float64)
        if self.grid.ndim != 2:
            raise ShapeError(f"Raretrip: an activation map is rank 2, got shape {self.grid.shape}.")
        if not np.isfinite(self.grid).all():
            raise FloatingPointError(
                f"Raretrip: activation map of frame ({self.procedure_id}, {self.frame_index}) is not finite."
            )
        pass
    pass

    @property
    def shape(self) -> Tuple[int, int]: return self.grid.shape

    def to_csv(self, path):
        """Raw values, one row per pixel."""
        h, w = self.grid.shape
        return write_csv(
            path, ("row", "col", "value"),
            ([r, c, float(self.grid[r, c])] for r in range(h) for c in range(w)),
        )
    pass
pass


def compute_cam(feature_maps, weights) -> ActivationMap:
    """M(x, y) = sum_k w_k f_k(x, y) for (K, h, w) feature maps and K weights."""
    feature_maps = torch.as_tensor(feature_maps, dtype = DTYPE)
    weights      = torch.as_tensor(weights,      dtype = DTYPE).reshape(-1)
    if feature_maps.dim() != 3:
        raise ShapeError(f"Raretrip: CAM needs (K, h, w) feature maps, got {tuple(feature_maps.shape)}.")
    if weights.shape[0] != feature_maps.shape[0]:
        raise ShapeError(
            f"Raretrip: {weights.shape[0]} CAM weights for {feature_maps.shape[0]} feature maps."
        )
    return ActivationMap(torch.einsum("k,khw->hw", weights, feature_maps).numpy())
pass


def effective_weights(model : ModelState, class_index : int = 1) -> torch.Tensor:
    """
    Per feature-map weights of the class score.
    Without an embedding head these are the classifier weights v. With one,
    the linear parts compose to W^T v and the head activation is ignored.
    The sigmoid has one logit, so class 0 gets -v.
    """
    if class_index not in (0, 1):
        raise RaretripConfigError(f"Raretrip: class index must be 0 or 1, got {class_index}.")
    gap = [i for i, spec in enumerate(model.layers) if spec.kind == "global_avg_pool"]
    if not gap:
        raise RaretripConfigError("Raretrip: CAM is unsupported for a model without global_avg_pool.")
    head = [model.layers[i] for i in range(model.gap_index + 1, model.classifier_index)]
    kinds = [spec.kind for spec in head]
    if kinds not in ([], ["dense"], ["dense", "relu"]):
        raise RaretripConfigError(
            f"Raretrip: CAM supports at most one dense embedding layer after pooling, found {kinds}."
        )
    pass

    v = model.classifier_weights
    if head:
        W = model.params[f"layers.{model.gap_index + 1}.weight"]
        v = W.t() @ v
    pass
    return v if class_index == 1 else -v
pass


def upsample(activation : ActivationMap, target : Tuple[int, int]) -> np.ndarray:
    """Bilinear, corners aligned, so corner values and constant maps are kept."""
    grid = activation.grid if isinstance(activation, ActivationMap) else np.asarray(activation, dtype = np.float64)
    H, W = int(target[0]), int(target[1])
    h, w = grid.shape
    if H < h or W < w:
        raise ShapeError(f"Raretrip: cannot upsample a {h}x{w} map to a smaller {H}x{W}.")
    X = torch.from_numpy(np.ascontiguousarray(grid)).to(DTYPE)[None, None]
    return F.interpolate(X, size = (H, W), mode = "bilinear", align_corners = True)[0, 0].numpy()
pass


def localization_hit(cam_upsampled : np.ndarray, event_mask : np.ndarray, dilation_px : float = 2) -> bool:
    """True iff the CAM argmax is within dilation_px (Euclidean, inclusive) of the mask."""
    cam_upsampled = np.asarray(cam_upsampled)
    event_mask    = np.asarray(event_mask, dtype = bool)
    if cam_upsampled.shape != event_mask.shape:
        raise ShapeError(
            f"Raretrip: CAM shape {cam_upsampled.shape} does not match mask shape {event_mask.shape}."
        )
    if not event_mask.any():
        raise ValueError("Raretrip: localization needs a nonempty event mask.")
    pass
    distance = ndimage.distance_transform_edt(~event_mask)
    peak = np.unravel_index(int(np.argmax(cam_upsampled)), cam_upsampled.shape)
    return bool(distance[peak] <= dilation_px)
pass


def localization_rate(hits : Sequence[bool]) -> float:
    return float(np.mean(hits)) if len(hits) else float("nan")
pass


def export_overlay(frame, cam_upsampled : np.ndarray, path):
    """
    Half the frame plus half a red layer holding the min-max normalised CAM.
    A constant CAM renders as no red.
    """
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype = np.float64)
    cam_upsampled = np.asarray(cam_upsampled, dtype = np.float64)
    if pixels.shape[1:] != cam_upsampled.shape:
        raise ShapeError(
            f"Raretrip: frame {pixels.shape} and CAM {cam_upsampled.shape} differ in size."
        )
    low, high = cam_upsampled.min(), cam_upsampled.max()
    if high > low:
        normalized = (cam_upsampled - low) / (high - low)
    else:
        normalized = np.zeros_like(cam_upsampled)
    pass
    red = np.zeros_like(pixels)
    red[0] = normalized
    return write_ppm(path, 0.5 * pixels + 0.5 * red)
pass


def cam_for_frames(
    model       : ModelState,
    frames,
    class_index : int = 1,
    refs        : Optional[Sequence[Tuple[int, int]]] = None,
) -> List[ActivationMap]:
    """One activation map per frame, at the resolution of the last spatial layer."""
    if isinstance(frames, (list, tuple)):
        frames = np.stack([f.pixels if isinstance(f, Frame) else f for f in frames])
    weights = effective_weights(model, class_index)
    with torch.no_grad():
        feature_maps = forward(model, torch.as_tensor(frames, dtype = DTYPE)).feature_maps
    maps = []
    for i in range(feature_maps.shape[0]):
        activation = compute_cam(feature_maps[i], weights)
        if refs is not None:
            activation.procedure_id, activation.frame_index = int(refs[i][0]), int(refs[i][1])
        activation.class_index = class_index
        maps.append(activation)
    pass
    return maps
pass


def gallery(scored, threshold : float, per_kind : Optional[int] = None) -> Dict[str, list]:
    """
    Scored frames split into true positives, false positives and false
    negatives at a threshold (positive when score > threshold), most
    confident first. Ties keep the (procedure, frame) order.
    """
    kinds = {kind : [] for kind in GALLERY_KINDS}
    for frame in scored:
        predicted = frame.score > threshold
        if predicted and frame.label == 1:   kinds["true_positive"] .append(frame)
        elif predicted:                      kinds["false_positive"].append(frame)
        elif frame.label == 1:               kinds["false_negative"].append(frame)
    pass
    kinds["true_positive"] .sort(key = lambda s: -s.score)
    kinds["false_positive"].sort(key = lambda s: -s.score)
    kinds["false_negative"].sort(key = lambda s:  s.score)
    if per_kind is not None:
        kinds = {k : v[:per_kind] for k, v in kinds.items()}
    return kinds
pass
