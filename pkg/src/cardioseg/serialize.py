"""Binary checkpoint container.

Layout (all integers little-endian):
  magic "SEGCKPT1" | u32 version | u32 config_len | config JSON (UTF-8)
  | u32 n_params | per parameter: u16 name_len, name, u8 ndim, u32*ndim
  extents, float64 payload (little-endian, row-major).

The embedded JSON is the full NetworkConfig, so loading rebuilds the model
and verifies that every stored tensor matches the architecture it claims.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "peek_config"]

MAGIC = b"SEGCKPT1"
VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint or checkpoint/architecture disagreement."""


def checkpoint_bytes(model) -> bytes:
    config_json = json.dumps(
        model.config.to_dict(), sort_keys=True, separators=(",", ":")
    ).encode()
    params = list(model.named_params())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(config_json)))
    buf.write(config_json)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def _read_exact(buf, n, what):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def peek_config(raw: bytes) -> dict:
    """The embedded config dict, without loading parameters."""
    buf = io.BytesIO(raw)
    if _read_exact(buf, 8, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, config_len = struct.unpack("<II", _read_exact(buf, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return json.loads(_read_exact(buf, config_len, "config"))


def load_checkpoint(raw: bytes):
    """Rebuild the model a checkpoint describes and load its parameters.

    Every stored parameter must match the rebuilt architecture in name,
    order, and shape.
    """
    from .model import EdgeAttentionUNet, NetworkConfig

    buf = io.BytesIO(raw)
    if _read_exact(buf, 8, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, config_len = struct.unpack("<II", _read_exact(buf, 8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = NetworkConfig.from_dict(
            json.loads(_read_exact(buf, config_len, "config"))
        )
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad embedded config: {exc}") from exc

    model = EdgeAttentionUNet(config, np.random.default_rng(0))
    expected = list(model.named_params())
    (n_params,) = struct.unpack("<I", _read_exact(buf, 4, "parameter count"))
    if n_params != len(expected):
        raise CheckpointError(
            f"checkpoint stores {n_params} parameters, architecture has "
            f"{len(expected)}"
        )
    for name, tensor in expected:
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2, "name length"))
        stored_name = _read_exact(buf, name_len, "name").decode()
        if stored_name != name:
            raise CheckpointError(
                f"parameter order mismatch: expected {name!r}, found "
                f"{stored_name!r}"
            )
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim, "shape"))
        if tuple(shape) != tensor.shape:
            raise CheckpointError(
                f"{name}: stored shape {tuple(shape)} != architecture shape "
                f"{tensor.shape}"
            )
        count = int(np.prod(shape)) if ndim else 1
        payload = _read_exact(buf, 8 * count, f"{name} payload")
        tensor.data = np.frombuffer(payload, dtype="<f8").astype(
            np.float64).reshape(shape)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last parameter")
    return model


def load_checkpoint_file(path):
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
