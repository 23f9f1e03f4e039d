"""Self-describing binary checkpoints.

Layout::

    b"ATMC" | u16 version | u32 header length | header JSON | matrix payloads | u32 CRC32

Each matrix payload is either raw floats (unquantized) or a codebook of
levels followed by per-entry codebook indices packed at
``ceil(log2(2**b + 1))`` bits, index 0 meaning zero.  Biases are stored raw.
Floats are written in the model's own dtype so that loading a saved model
gives back identical bits.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from ..model import ArchitectureSpec, ModelParams, ParamTriple, count_distinct_nonzero
from ..tensor import Tensor

MAGIC = b"ATMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def index_width(b):
    return max(1, math.ceil(math.log2(2 ** b + 1)))


def _pack(indices, width):
    idx = indices.astype(np.uint64).ravel()
    bits = ((idx[:, None] >> np.arange(width - 1, -1, -1, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack(raw, count, width):
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: count * width].reshape(count, width)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def _encode_matrix(data, b):
    if b >= 32:
        return {"b": 32, "n_levels": 0}, data.tobytes()
    levels, inverse = np.unique(data, return_inverse=True)
    nonzero = levels != 0
    values = levels[nonzero]
    if values.size > 2 ** b:
        raise CheckpointError(f"matrix has {values.size} distinct nonzeros, more than 2**{b}")
    # index 0 is zero, 1.. are the sorted nonzero levels
    slot = np.zeros(levels.size, dtype=np.int64)
    slot[nonzero] = np.arange(1, values.size + 1)
    indices = slot[inverse.ravel()]
    return {"b": b, "n_levels": int(values.size)}, values.tobytes() + _pack(indices, index_width(b))


def save_checkpoint(model: ModelParams, path, bits=32):
    """Write ``model``; matrices are codebook-encoded when ``bits < 32``."""
    dtype = model.layers[0].V.dtype
    entries, payloads = [], []
    for li, t in enumerate(model.layers):
        entry = {"transposed": t.transposed, "matrices": {}, "bias": t.bias is not None}
        for name, m in t.matrices():
            meta, blob = _encode_matrix(np.ascontiguousarray(m.data), bits)
            meta["shape"] = list(m.shape)
            meta["nbytes"] = len(blob)
            entry["matrices"][name] = meta
            payloads.append(blob)
        if t.bias is not None:
            blob = np.ascontiguousarray(t.bias.data).tobytes()
            entry["bias_nbytes"] = len(blob)
            payloads.append(blob)
        entries.append(entry)
    header = json.dumps(
        {"arch": model.arch.to_dict(), "dtype": np.dtype(dtype).str, "layers": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = MAGIC + struct.pack(">HI", VERSION, len(header)) + header + b"".join(payloads)
    blob = body + struct.pack(">I", zlib.crc32(body))
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise CheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from(">HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from(">I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    pos = 10
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    dtype = np.dtype(header["dtype"])
    arch = ArchitectureSpec.from_dict(header["arch"])

    def take(n):
        nonlocal pos
        if pos + n > len(raw) - 4:
            raise CheckpointError(f"{path}: payload ends early at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    layers = []
    for entry in header["layers"]:
        mats = {}
        for name in ("U", "V", "C"):
            meta = entry["matrices"].get(name)
            if meta is None:
                continue
            blob = take(meta["nbytes"])
            shape = tuple(meta["shape"])
            count = int(np.prod(shape))
            if meta["b"] >= 32:
                data = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
            else:
                nv = meta["n_levels"]
                values = np.frombuffer(blob[: nv * dtype.itemsize], dtype=dtype)
                idx = _unpack(blob[nv * dtype.itemsize:], count, index_width(meta["b"]))
                levels = np.concatenate([np.zeros(1, dtype=dtype), values])
                data = levels[idx].reshape(shape)
            mats[name] = Tensor(data, requires_grad=True)
        bias = None
        if entry["bias"]:
            bias = Tensor(np.frombuffer(take(entry["bias_nbytes"]), dtype=dtype).copy(), requires_grad=True)
        layers.append(ParamTriple(V=mats["V"], U=mats.get("U"), C=mats.get("C"), bias=bias,
                                  transposed=entry["transposed"]))
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - pos} unexpected bytes at offset {pos}")
    return ModelParams(arch, layers)


def max_bits_needed(model: ModelParams):
    """Smallest b with every matrix within 2**b distinct nonzeros (32 if none fits below)."""
    worst = max((count_distinct_nonzero(m) for _, _, m in model.matrices()), default=0)
    for b in range(1, 32):
        if worst <= 2 ** b:
            return b
    return 32
