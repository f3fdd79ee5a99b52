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
    "CHECKPOINT_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "write_csv",
    "write_json",
    "write_ppm",
    "write_pgm",
    "read_ppm",
    "read_pgm",
]

import os
import csv
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union
import numpy as np
import torch
from PIL import Image

from .models._utils import DTYPE, CheckpointError
from .models.resnet import LayerSpec, ModelState

PathLike = Union[str, os.PathLike]

# Checkpoint layout:
#   b"TRM1\n" | uint64 LE header length | JSON header | float64 LE parameter blocks in header order
CHECKPOINT_MAGIC   = b"TRM1\n"
CHECKPOINT_VERSION = 1
_HEADER_LENGTH     = struct.Struct("<Q")


def save_checkpoint(model : ModelState, path : PathLike, extra : Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    header = {
        "format"        : "TRM1",
        "version"       : CHECKPOINT_VERSION,
        "seed"          : int(model.seed),
        "embedding_dim" : int(model.embedding_dim),
        "layers"        : [spec.to_dict() for spec in model.layers],
        "params"        : [{"name" : name, "shape" : list(p.shape)} for name, p in model.params.items()],
        "extra"         : extra or {},
    }
    header = json.dumps(header, sort_keys = True, separators = (",", ":")).encode("utf-8")

    try:
        with open(path, "wb") as file:
            file.write(CHECKPOINT_MAGIC)
            file.write(_HEADER_LENGTH.pack(len(header)))
            file.write(header)
            for p in model.params.values():
                file.write(p.detach().cpu().numpy().astype("<f8", copy = False).tobytes())
        pass
    except OSError as error:
        raise OSError(f"Raretrip: could not write checkpoint to {path}: {error}") from error
    pass
    return path
pass


def load_checkpoint(path : PathLike) -> ModelState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as error:
        raise OSError(f"Raretrip: could not read checkpoint {path}: {error}") from error
    pass

    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"Raretrip: {path} is not a TRM1 checkpoint (bad magic).")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + _HEADER_LENGTH.size:
        raise CheckpointError(f"Raretrip: checkpoint {path} is truncated.")
    header_length, = _HEADER_LENGTH.unpack_from(data, offset)
    offset += _HEADER_LENGTH.size
    try:
        header = json.loads(data[offset : offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"Raretrip: checkpoint {path} has a corrupt header: {error}") from error
    offset += header_length

    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Raretrip: checkpoint {path} has version {header.get('version')}, "\
            f"this build reads version {CHECKPOINT_VERSION}."
        )
    pass

    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n_bytes = 8 * int(np.prod(shape, dtype = np.int64))
        if offset + n_bytes > len(data):
            raise CheckpointError(f"Raretrip: checkpoint {path} is truncated inside {entry['name']}.")
        block = np.frombuffer(data, dtype = "<f8", count = n_bytes // 8, offset = offset)
        params[entry["name"]] = torch.from_numpy(block.astype(np.float64).reshape(shape)).to(DTYPE)
        offset += n_bytes
    pass
    if offset != len(data):
        raise CheckpointError(f"Raretrip: checkpoint {path} has {len(data) - offset} trailing bytes.")

    layers = tuple(LayerSpec.from_dict(spec) for spec in header["layers"])
    return ModelState(layers, params, header["seed"])
pass


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)): return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "" if value != value else repr(value)
    if value is None: return ""
    return str(value)
pass


def write_csv(path : PathLike, header : Sequence[str], rows : Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline = "", encoding = "utf-8") as file:
            writer = csv.writer(file, lineterminator = "\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format_cell(x) for x in row])
        pass
    except OSError as error:
        raise OSError(f"Raretrip: could not write {path}: {error}") from error
    pass
    return path
pass


def write_json(path : PathLike, data : Any) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(data, indent = 2, sort_keys = True) + "\n", encoding = "utf-8")
    except OSError as error:
        raise OSError(f"Raretrip: could not write {path}: {error}") from error
    pass
    return path
pass


def _to_uint8(pixels : np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
pass


def write_ppm(path : PathLike, pixels : np.ndarray) -> Path:
    """Writes a (3, H, W) array in [0, 1] as a binary P6 pixmap."""
    path = Path(path)
    image = Image.fromarray(np.ascontiguousarray(_to_uint8(pixels).transpose(1, 2, 0)))
    try:
        image.save(path, format = "PPM")
    except OSError as error:
        raise OSError(f"Raretrip: could not write pixmap {path}: {error}") from error
    pass
    return path
pass


def write_pgm(path : PathLike, mask : np.ndarray) -> Path:
    """Writes a binary (H, W) mask as a P5 graymap with values 0 and 255."""
    path = Path(path)
    image = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8))
    try:
        image.save(path, format = "PPM")
    except OSError as error:
        raise OSError(f"Raretrip: could not write graymap {path}: {error}") from error
    pass
    return path
pass


def read_ppm(path : PathLike) -> np.ndarray:
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype = np.float64)
    return array.transpose(2, 0, 1) / 255.0
pass


def read_pgm(path : PathLike) -> np.ndarray:
    with Image.open(path) as image:
        array = np.asarray(image.convert("L"))
    return array > 127
pass
