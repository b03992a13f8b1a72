"""Binary "FLRA" tensor containers for model weights and adapters.

Layout is fixed little-endian so files are byte-identical across
platforms. Adapter files: magic, u16 version, subject id string, u32 rank,
f32 alpha, u32 tensor count, then named f32 tensors. Weight files share
the same framing with a JSON config string in place of the adapter header.
Strings are u16-length-prefixed UTF-8; tensors are name, u32 rows, u32
cols, then row-major f32 data.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"FLRA"
VERSION = 1


class ContainerError(ValueError):
    pass


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ContainerError("string too long for container")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def _read_str(f) -> str:
    (n,) = struct.unpack("<H", _read_exact(f, 2))
    return _read_exact(f, n).decode("utf-8")


def _read_exact(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise ContainerError("truncated container file")
    return raw


def _write_tensor(f, name: str, data: np.ndarray) -> None:
    if data.ndim != 2:
        raise ContainerError(f"tensor {name!r} is not 2-D")
    _write_str(f, name)
    f.write(struct.pack("<II", data.shape[0], data.shape[1]))
    f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_tensor(f):
    name = _read_str(f)
    rows, cols = struct.unpack("<II", _read_exact(f, 8))
    data = np.frombuffer(_read_exact(f, rows * cols * 4), dtype="<f4")
    return name, data.reshape(rows, cols).astype(np.float32)


def _check_header(f, path) -> None:
    magic = _read_exact(f, 4)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", _read_exact(f, 2))
    if version != VERSION:
        raise ContainerError(
            f"{path}: container version {version} not supported (expected {VERSION})"
        )


def write_adapter_file(path, subject_id: str, rank: int, alpha: float, tensors) -> None:
    """tensors: ordered (name, array) pairs, e.g. ('layer0.K.A', A)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        _write_str(f, subject_id)
        f.write(struct.pack("<If", rank, alpha))
        f.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            _write_tensor(f, name, data)


def read_adapter_file(path):
    """Returns (subject_id, rank, alpha, {name: array})."""
    with open(path, "rb") as f:
        _check_header(f, path)
        subject_id = _read_str(f)
        rank, alpha = struct.unpack("<If", _read_exact(f, 8))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name, data = _read_tensor(f)
            tensors[name] = data
    return subject_id, int(rank), float(alpha), tensors


def write_weights_file(path, config_doc: dict, tensors) -> None:
    """tensors: ordered (name, array) pairs named 'base.<component>...'."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        _write_str(f, json.dumps(config_doc, sort_keys=True))
        f.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            _write_tensor(f, name, data)


def read_weights_file(path):
    """Returns (config_doc, {name: array})."""
    with open(path, "rb") as f:
        _check_header(f, path)
        header = _read_str(f)
        try:
            config_doc = json.loads(header)
        except json.JSONDecodeError:
            raise ContainerError(
                f"{path}: header is not a config document; is this an adapter file?"
            ) from None
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name, data = _read_tensor(f)
            tensors[name] = data
    return config_doc, tensors
