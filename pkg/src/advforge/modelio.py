"""
Single-file model format.

Layout (little-endian)::

    b"ADVF" | version u32 | rng_seed i64 | config_len u32 | config JSON (utf-8)
    | n_params u32 | n_params x (count u64 | count x f64)

Parameters follow the config's declaration order; the JSON is canonical
(sorted keys, no whitespace), so equal models give equal bytes.
"""

import io
import json
import os
import struct

import numpy as np

from .nn import Model, ModelConfig

MAGIC = b"ADVF"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def model_to_bytes(model):
    buf = io.BytesIO()
    cfg = model.config.to_json().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<Iq", VERSION, model.rng_seed))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, _ in model.config.param_specs():
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes())
    return buf.getvalue()


def model_from_bytes(raw):
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ModelFormatError("model file is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, seed = struct.unpack("<Iq", take(12))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        config = ModelConfig.from_dict(json.loads(bytes(take(cfg_len)).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad config header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    specs = config.param_specs()
    if count != len(specs):
        raise ModelFormatError(f"file holds {count} parameters, config declares {len(specs)}")
    params = {}
    for name, shape in specs:
        (size,) = struct.unpack("<Q", take(8))
        if size != int(np.prod(shape)):
            raise ModelFormatError(f"parameter {name}: {size} values, expected shape {shape}")
        params[name] = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise ModelFormatError("trailing bytes after last parameter")
    return Model(config, params, seed)


def save_model(model, path):
    """Write atomically (temp file + rename)."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(model_to_bytes(model))
    os.replace(tmp, path)


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
