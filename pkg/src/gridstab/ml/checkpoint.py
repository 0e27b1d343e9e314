"""モデルのチェックポイント

形式: [ヘッダ長 (uint64, little-endian)] [JSONヘッダ] [float64 little-endian のパラメータ列]
パラメータは W0, b0, W1, b1, ... の順に C 順で並べる。
"""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .models import PredictorModel, ShapeMismatchError

CHECKPOINT_FORMAT = 1
_LENGTH = struct.Struct("<Q")


class CheckpointError(ValueError):
    """チェックポイントが壊れている・形式が違う"""


def save_model(model: PredictorModel, path: str | Path, config: dict[str, Any] | None = None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "target": model.target,
        "sizes": model.sizes,
        "activations": model.activations,
        "head": model.head,
        "shapes": {name: list(model.params[name].shape) for name in model.param_names},
        "meta": model.meta,
        "config": config or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = model.flat_params().astype("<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_LENGTH.pack(len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _LENGTH.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (length,) = _LENGTH.unpack_from(data)
    end = _LENGTH.size + length
    if end > len(data):
        raise CheckpointError(f"{path}: header length {length} exceeds file size")
    try:
        header = json.loads(data[_LENGTH.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: invalid header: {e}") from e
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    return header, data[end:]


def load_model(path: str | Path) -> tuple[PredictorModel, dict[str, Any]]:
    """チェックポイントからモデルと学習時の設定を復元する"""
    header, payload = read_header(path)
    if len(payload) % 8 != 0:
        raise CheckpointError(f"{path}: payload is not a whole number of float64 values")
    flat = np.frombuffer(payload, dtype="<f8").astype(float)
    try:
        shapes = header["shapes"]
        params = {}
        offset = 0
        for i in range(len(header["sizes"]) - 1):
            for name in (f"W{i}", f"b{i}"):
                shape = tuple(shapes[name])
                size = int(np.prod(shape))
                if offset + size > flat.size:
                    raise CheckpointError(f"{path}: payload too short for {name}")
                params[name] = flat[offset : offset + size].reshape(shape).copy()
                offset += size
        if offset != flat.size:
            raise CheckpointError(
                f"{path}: {flat.size - offset} unexpected trailing parameters"
            )
        model = PredictorModel(
            kind=header["kind"],
            sizes=list(header["sizes"]),
            activations=list(header["activations"]),
            head=header["head"],
            target=header["target"],
            params=params,
            meta=header.get("meta", {}),
        )
    except (KeyError, TypeError, ShapeMismatchError) as e:
        raise CheckpointError(f"{path}: inconsistent checkpoint: {e}") from e
    return model, header.get("config", {})
