"""Model checkpoints: JSON header followed by a flat float64 parameter payload.

Layout::

    magic b"PKTM" | u32 header length | header JSON (UTF-8) | float64 LE payload

The header records the model kind, its config, and the name and shape of
every parameter in payload order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import IntegrityError, MalformedHeaderError, TruncatedPayloadError

MAGIC = b"PKTM"
_LEN = struct.Struct("<I")


def params_checksum(arrays):
    """SHA-256 over parameter names, shapes and float64 bytes, in sorted order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def encode_checkpoint(kind, config, arrays, extra=None):
    names = sorted(arrays)
    header = {
        "kind": kind,
        "config": config,
        "params": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
        "checksum": params_checksum(arrays),
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + _LEN.pack(len(head)) + head + payload


def decode_checkpoint(buf):
    """Returns ``(header, arrays)``."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise MalformedHeaderError("not a checkpoint file", 0)
    (n,) = _LEN.unpack(buf[4:8])
    if len(buf) < 8 + n:
        raise TruncatedPayloadError("truncated checkpoint header", 8, n, len(buf) - 8)
    try:
        header = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"unreadable checkpoint header: {exc}", 8) from None
    pos = 8 + n
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(buf):
            raise TruncatedPayloadError(f"truncated parameter {entry['name']}", pos, size, len(buf) - pos)
        arrays[entry["name"]] = np.frombuffer(buf[pos:pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    if pos != len(buf):
        raise MalformedHeaderError(f"{len(buf) - pos} trailing bytes", pos)
    if params_checksum(arrays) != header.get("checksum"):
        raise IntegrityError("checkpoint checksum mismatch")
    return header, arrays


def save_checkpoint(path, kind, config, arrays, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(kind, config, arrays, extra))
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
