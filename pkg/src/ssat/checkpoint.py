"""Binary checkpoint format with a JSON config sidecar.

Layout (all integers little-endian u32)::

    b"SSAT" | version=1 | tensor_count
    per tensor: name_len | name (UTF-8) | ndim | dims... | float32 LE data

The sidecar ``<path>.json`` holds the ModelConfig; loading rebuilds the
expected parameter shapes from it and rejects any mismatch.
"""

import json
import os
import struct

import numpy as np

from ._io import write_bytes_atomic, write_text_atomic
from .nets import Model, ModelConfig, param_shapes
from .tensor import Tensor

MAGIC = b"SSAT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def sidecar_path(path):
    return os.fspath(path) + ".json"


def encode_params(params):
    """Serialize an ordered ``name -> Tensor`` map to checkpoint bytes."""
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(np.ascontiguousarray(data).tobytes())
    return b"".join(out)


def decode_params(buf):
    """Parse checkpoint bytes into an ordered ``name -> float32 array`` map."""
    buf = memoryview(bytes(buf))
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint reading {what}: need {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        start = pos
        try:
            name = bytes(take(name_len, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name is not valid UTF-8", start) from None
        if name in params:
            raise CheckpointError(f"duplicate tensor name {name!r}", start)
        (ndim,) = struct.unpack("<I", take(4, f"ndim of {name!r}"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = take(4 * n, f"data of {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return params


def save_checkpoint(model, path):
    """Atomically write the binary checkpoint and its JSON sidecar."""
    write_bytes_atomic(path, encode_params(model.params))
    write_text_atomic(sidecar_path(path), json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, frozen=False):
    path = os.fspath(path)
    try:
        with open(sidecar_path(path)) as f:
            config = ModelConfig.from_dict(json.load(f))
    except FileNotFoundError:
        raise CheckpointError(f"missing config sidecar {sidecar_path(path)}") from None
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad config sidecar {sidecar_path(path)}: {e}") from e
    with open(path, "rb") as f:
        arrays = decode_params(f.read())
    expected = param_shapes(config)
    if list(arrays) != list(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"{path}: tensors do not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, config expects {tuple(shape)}")
    params = {k: Tensor(v, requires_grad=not frozen, name=k) for k, v in arrays.items()}
    return Model(config, params, frozen)
