"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"FSRFCKPT"
    version      uint32
    header_len   uint32
    header       UTF-8 text, one ``key=<json value>`` per line
    n_tensors    uint32
    repeated n_tensors times:
        name_len uint16, name (UTF-8)
        dtype    uint8   (see DTYPES)
        ndim     uint8
        shape    ndim x uint64
        data     raw little-endian bytes, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"FSRFCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
_CODES = {dt: code for code, dt in DTYPES.items()}


class CheckpointError(ValueError):
    pass


def flatten(meta: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in meta.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(flat: Mapping) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray],
                    meta: Mapping) -> None:
    lines = []
    for k, v in flatten(meta).items():
        if "\n" in k or "=" in k:
            raise CheckpointError(f"invalid header key {k!r}")
        lines.append(f"{k}={json.dumps(v, sort_keys=True)}\n")
    header = "".join(lines).encode("utf-8")

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(header))
    buf += header
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        arr = np.asarray(arr, dtype=dt, order="C")
        raw_name = name.encode("utf-8")
        buf += struct.pack("<H", len(raw_name)) + raw_name
        buf += struct.pack("<BB", _CODES[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(meta, tensors)``; ``meta`` is the nested header mapping."""
    data = Path(path).read_bytes()
    try:
        return _parse(data, path)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(data: bytes, path) -> tuple[dict, dict[str, torch.Tensor]]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    flat = {}
    for line in data[pos:pos + hlen].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        flat[key] = json.loads(value)
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return unflatten(flat), tensors
