"""Binary model checkpoints.

Layout, all integers little-endian:

    magic    4 bytes  b"CLKW"
    version  u32      format major version (currently 1)
    kind     str      model-kind tag ("vae", "ldm", "contrastive", ...)
    meta     str      canonical JSON (tool version, schedule params, etc.)
    params   u32 count, then per entry:
               name str, ndim u32, dims u32 each, raw float32 data
    opt      u8 flag; if 1: kind str, step u64, lr/beta1/beta2/eps/wd f64,
               then first and second moments in parameter-table order
    crc      u32      CRC32 of every preceding byte

Strings are u32-length-prefixed UTF-8. Writes are atomic and byte-identical
for identical inputs, so a file's SHA-256 is a usable content digest.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from . import TOOL_VERSION
from .errors import DataFormatError, SchemaError
from .ioutil import Reader, atomic_write, file_digest, pack_f32, pack_str
from .nncore import OptimizerState

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "expect_kind",
           "file_digest", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"CLKW"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    meta: dict
    opt_state: OptimizerState | None
    digest: str


def save_checkpoint(path: str | os.PathLike, kind: str,
                    params: dict[str, np.ndarray],
                    meta: dict | None = None,
                    opt_state: OptimizerState | None = None) -> str:
    """Write a checkpoint; returns the file's SHA-256 digest."""
    meta = dict(meta or {})
    meta.setdefault("tool_version", TOOL_VERSION)

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), pack_str(kind)]
    parts.append(pack_str(json.dumps(meta, sort_keys=True,
                                     separators=(",", ":"))))
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        parts.append(pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(pack_f32(arr))

    if opt_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        parts.append(pack_str(opt_state.kind))
        parts.append(struct.pack("<Q", opt_state.step))
        parts.append(struct.pack("<5d", opt_state.lr, opt_state.beta1,
                                 opt_state.beta2, opt_state.eps,
                                 opt_state.weight_decay))
        for name in params:
            parts.append(pack_f32(opt_state.m[name]))
            parts.append(pack_f32(opt_state.v[name]))

    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return atomic_write(path, blob)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Read and validate a checkpoint (magic, version, CRC)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise DataFormatError(f"{path}: CRC mismatch, file is corrupt")

    r = Reader(body, name=str(path))
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    kind = r.string()
    meta = json.loads(r.string())

    params: dict[str, np.ndarray] = {}
    n_params = r.u32()
    for _ in range(n_params):
        name = r.string()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        params[name] = r.f32_array(shape)

    opt_state = None
    if r.u8() == 1:
        okind = r.string()
        step = r.u64()
        lr, b1, b2, eps, wd = (r.f64() for _ in range(5))
        opt_state = OptimizerState(kind=okind, lr=lr, beta1=b1, beta2=b2,
                                   eps=eps, weight_decay=wd, step=step)
        for name, arr in params.items():
            opt_state.m[name] = r.f32_array(arr.shape)
            opt_state.v[name] = r.f32_array(arr.shape)

    r.expect_end()
    return Checkpoint(kind=kind, params=params, meta=meta,
                      opt_state=opt_state, digest=sha256(blob).hexdigest())


def expect_kind(ckpt: Checkpoint, kind: str) -> Checkpoint:
    if ckpt.kind != kind:
        raise SchemaError(f"expected a {kind!r} checkpoint, got {ckpt.kind!r}")
    return ckpt
