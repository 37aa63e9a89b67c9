"""Binary checkpoints: header, JSON metadata, then named little-endian array blobs.

Layout::

    magic b"GCCK" | version u32 | meta_len u32 | meta (UTF-8 JSON)
    n_blobs u32
    per blob: name_len u32 | name | dtype u8 (4 or 8 byte float) | rank u32 | dims u64 * rank | payload

Payloads keep the parameters' own width, so float32 and float64 runs both
round-trip bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .encoder import EncoderConfig, EncoderParams
from .errors import ParseError, SchemaError

MAGIC = b"GCCK"
VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}


def save_arrays(path, meta, arrays):
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            width = arr.dtype.itemsize
            if width not in _DTYPES or arr.dtype.kind != "f":
                raise SchemaError(f"cannot serialise {name} with dtype {arr.dtype}")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<BI", width, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes())


def load_arrays(path):
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != MAGIC:
            raise ParseError(f"bad magic {raw[:4]!r}", path)
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path)
        off = 12
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            width, rank = struct.unpack_from("<BI", raw, off)
            off += 5
            dims = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            nbytes = width * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(raw):
                raise ParseError(f"blob {name!r} truncated", path)
            arrays[name] = np.frombuffer(raw[off:off + nbytes], dtype=_DTYPES[width]).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint ({exc})", path) from None
    return meta, arrays


def save_checkpoint(path, params, step=0, optimizer=None, extra=None):
    meta = {"encoder": params.config.to_dict(), "step": int(step),
            "n_features": len(params.features)}
    arrays = {n: p.data for n, p in params.tensors.items()}
    for i, f in enumerate(params.features):
        arrays[f"favor.features.{i}"] = f
    if optimizer is not None:
        meta["adam_t"] = optimizer.t
        meta["adam_params"] = [p.name for p in optimizer.params]
        arrays.update(optimizer.state_arrays())
    if extra:
        meta.update(extra)
    save_arrays(path, meta, arrays)


def load_checkpoint(path):
    """Return ``(params, meta, arrays)``; ``arrays`` still holds optimizer blobs."""
    meta, arrays = load_arrays(path)
    try:
        config = EncoderConfig.from_dict(meta["encoder"])
    except KeyError:
        raise ParseError("checkpoint has no encoder config", path) from None
    tensors = {}
    for name, arr in arrays.items():
        if name.startswith(("favor.", "adam.")):
            continue
        tensors[name] = Parameter(arr, name=name)
    features = [arrays[f"favor.features.{i}"] for i in range(meta.get("n_features", 0))]
    return EncoderParams(config, tensors, features), meta, arrays
