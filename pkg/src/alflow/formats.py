"""Binary file formats for shapes (ALFD), velocity fields (ALFV) and models (ALFM).

All integers and floats are little-endian.

ALFD: b"ALFD", u32 version, u32 N, N*3 f32 positions, N u8 role codes,
      N*9 f32 features, UTF-8 JSON trailer to end of file.
ALFV: b"ALFV", u32 version, u32 N, N*3 f32 velocities, UTF-8 JSON trailer.
ALFM: b"ALFM", u32 version, u32 J, J bytes of UTF-8 JSON (model config and
      training log), u64 P, P f64 parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .geometry import Segment, Shape
from .oracle import VelocityField
from .surrogate import ModelConfig, SurrogateModel

VERSION = 1
SHAPE_MAGIC = b"ALFD"
FIELD_MAGIC = b"ALFV"
MODEL_MAGIC = b"ALFM"
N_FEATURES = 9


class FormatError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _header(data: bytes, magic: bytes) -> tuple[int, int]:
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"not an {magic.decode()} file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version, n


def _take(data: bytes, offset: int, dtype: str, count: int) -> tuple[np.ndarray, int]:
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(data):
        raise FormatError("file is truncated")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr, offset + size


def _trailer(data: bytes, offset: int) -> dict:
    try:
        return json.loads(data[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad JSON trailer: {exc}") from None


def shape_to_bytes(shape: Shape) -> bytes:
    n = len(shape)
    if shape.features.shape != (n, N_FEATURES):
        raise FormatError("ALFD stores 9 offset features per point")
    params = shape.meta.get("params")
    trailer = {"id": shape.id, "params": params,
               "seed": None if params is None else params.get("seed"),
               "centerline": [s.to_json() for s in shape.centerline]}
    return b"".join([
        SHAPE_MAGIC, struct.pack("<II", VERSION, n),
        shape.points.astype("<f4").tobytes(),
        shape.roles.astype("u1").tobytes(),
        shape.features.astype("<f4").tobytes(),
        _dumps(trailer),
    ])


def shape_from_bytes(data: bytes) -> Shape:
    _, n = _header(data, SHAPE_MAGIC)
    pts, off = _take(data, 12, "<f4", 3 * n)
    roles, off = _take(data, off, "u1", n)
    feats, off = _take(data, off, "<f4", N_FEATURES * n)
    meta = _trailer(data, off)
    if roles.size and roles.max() > 3:
        raise FormatError("invalid role code")
    segs = tuple(Segment.from_json(s) for s in meta.get("centerline", []))
    extra = {"params": meta["params"]} if meta.get("params") is not None else {}
    return Shape(meta["id"], pts.astype(np.float64).reshape(n, 3), roles.copy(),
                 feats.astype(np.float64).reshape(n, N_FEATURES), segs, extra)


def field_to_bytes(field: VelocityField) -> bytes:
    trailer = {"shape_id": field.shape_id, **{k: v for k, v in field.meta.items() if k != "shape_id"}}
    return b"".join([FIELD_MAGIC, struct.pack("<II", VERSION, len(field)),
                     field.values.astype("<f4").tobytes(), _dumps(trailer)])


def field_from_bytes(data: bytes) -> VelocityField:
    _, n = _header(data, FIELD_MAGIC)
    vals, off = _take(data, 12, "<f4", 3 * n)
    meta = _trailer(data, off)
    return VelocityField(vals.astype(np.float64).reshape(n, 3), meta.get("shape_id", ""), meta)


def model_to_bytes(model: SurrogateModel) -> bytes:
    header = _dumps({"config": model.config.to_json(), "train_log": list(model.train_log)})
    return b"".join([MODEL_MAGIC, struct.pack("<II", VERSION, len(header)), header,
                     struct.pack("<Q", len(model.params)), model.params.astype("<f8").tobytes()])


def model_from_bytes(data: bytes) -> SurrogateModel:
    _, jlen = _header(data, MODEL_MAGIC)
    if 12 + jlen + 8 > len(data):
        raise FormatError("file is truncated")
    meta = json.loads(data[12:12 + jlen].decode("utf-8"))
    (p,) = struct.unpack_from("<Q", data, 12 + jlen)
    params, end = _take(data, 20 + jlen, "<f8", p)
    if end != len(data):
        raise FormatError("trailing bytes after parameter block")
    cfg = ModelConfig.from_json(meta["config"])
    return SurrogateModel(params.astype(np.float64), cfg, tuple(meta.get("train_log", ())))


def _write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def write_shape(path, shape: Shape) -> Path:
    return _write(path, shape_to_bytes(shape))


def read_shape(path) -> Shape:
    return shape_from_bytes(Path(path).read_bytes())


def write_field(path, field: VelocityField) -> Path:
    return _write(path, field_to_bytes(field))


def read_field(path) -> VelocityField:
    return field_from_bytes(Path(path).read_bytes())


def write_model(path, model: SurrogateModel) -> Path:
    return _write(path, model_to_bytes(model))


def read_model(path) -> SurrogateModel:
    return model_from_bytes(Path(path).read_bytes())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())
