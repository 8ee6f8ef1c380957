"""Binary weights file.

Layout: ``b"PLWT"``, u32 version, u32 header length, JSON header (dims,
seed, parameter names and shapes), the parameters as little-endian float32
blocks in header order, then a sha256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import VERSION, ModelWeights

MAGIC = b"PLWT"


class WeightsError(Exception):
    pass


class VersionMismatch(WeightsError):
    pass


class CorruptFile(WeightsError):
    pass


def weights_bytes(w: ModelWeights) -> bytes:
    names = sorted(w.params)
    header = json.dumps({
        "dims": w.dims, "seed": w.seed,
        "params": [[k, list(w.params[k].shape)] for k in names],
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", w.version, len(header)) + header
    body += b"".join(np.ascontiguousarray(w.params[k], dtype="<f4").tobytes() for k in names)
    return body + hashlib.sha256(body).digest()


def save_weights(w: ModelWeights, path) -> None:
    with open(path, "wb") as f:
        f.write(weights_bytes(w))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 + 32 or raw[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a weights file or truncated")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise VersionMismatch(f"{path}: file version {version}, expected version {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified)")
    try:
        header = json.loads(body[12: 12 + hlen])
    except (ValueError, UnicodeDecodeError):
        raise CorruptFile(f"{path}: unreadable header") from None
    pos = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = body[pos: pos + 4 * n]
        if len(chunk) != 4 * n:
            raise CorruptFile(f"{path}: parameter block {name} is truncated")
        params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        pos += 4 * n
    if pos != len(body):
        raise CorruptFile(f"{path}: trailing bytes after parameter blocks")
    for k, v in params.items():
        if not np.isfinite(v).all():
            raise CorruptFile(f"{path}: non-finite values in {k}")
    return ModelWeights(header["dims"], params, int(header["seed"]), version)
