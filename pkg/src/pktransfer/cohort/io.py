"""Bag files: a small binary container for instance features plus a JSON sidecar.

Binary layout (little endian)::

    magic   b"PKTB"
    version u16
    n_bags  u32
    d       u32
    n_bags records of:
        bag_id, patient_id, cancer_code   each u32 byte-length + UTF-8
        M u32, d u32
        M*d float32, row-major

Features are stored as float32 and widened to float64 on load, so a round
trip is lossless for float32-representable features (the synthetic
generator emits only such values). Labels and registry metadata live in
``<stem>.json`` next to the ``.pktb`` file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import BagDimensionError, MalformedHeaderError, TruncatedPayloadError
from ..validation import make_labels
from .data import Cohort, InstanceBag

MAGIC = b"PKTB"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_U32 = struct.Struct("<I")


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def _pack_str(s):
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_bags(cohort):
    d = cohort.d or 0
    parts = [_HEADER.pack(MAGIC, VERSION, len(cohort.bags), d)]
    for bag in cohort.bags:
        m, bd = bag.features.shape
        parts += [_pack_str(bag.bag_id), _pack_str(bag.patient_id), _pack_str(bag.cancer_code),
                  _U32.pack(m), _U32.pack(bd),
                  np.ascontiguousarray(bag.features, dtype="<f4").tobytes()]
    return b"".join(parts)


def save_bags(cohort, path, registry=None):
    """Write ``cohort`` to ``path`` (``.pktb``) and its JSON label sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_bags(cohort))
    sidecar = {
        "format": "PKTB",
        "version": VERSION,
        "cancer": cohort.cancer_code,
        "n_bins": int(cohort.n_bins),
        "d": cohort.d,
        "registry": registry if registry is not None else {"d": cohort.d},
        "metadata": cohort.metadata,
        "labels": [
            {"bag_id": b.bag_id, "patient_id": b.patient_id, "cancer": b.cancer_code,
             "time_bin": int(t), "event": bool(e)}
            for b, t, e in zip(cohort.bags, cohort.time_bin, cohort.event)
        ],
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"truncated {what}", self.pos, n, len(self.buf) - self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def string(self, what):
        n = self.u32(f"{what} length")
        start = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedHeaderError(f"{what} is not valid UTF-8", start) from None


def decode_bags(buf, expected_d=None):
    """Parse the binary container; returns ``(d, bags)`` as raw tuples."""
    r = _Reader(buf)
    head = r.take(_HEADER.size, "header")
    magic, version, n_bags, d = _HEADER.unpack(head)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported version {version}", 4)
    if expected_d is not None and d != expected_d:
        raise BagDimensionError(f"file has d={d}, registry expects d={expected_d}", 10)
    bags = []
    for _ in range(n_bags):
        bag_id = r.string("bag_id")
        patient_id = r.string("patient_id")
        cancer = r.string("cancer_code")
        m = r.u32("instance count")
        dim_at = r.pos
        bd = r.u32("feature dimension")
        if bd != d:
            raise BagDimensionError(f"bag {bag_id!r} has d={bd}, header says d={d}", dim_at)
        payload = r.take(4 * m * bd, f"features of bag {bag_id!r}")
        feats = np.frombuffer(payload, dtype="<f4").reshape(m, bd).astype(np.float64)
        bags.append((bag_id, patient_id, cancer, feats))
    if r.pos != len(buf):
        raise MalformedHeaderError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return d, bags


def load_bags(path, registry=None):
    """Read a bag file and its sidecar back into a :class:`Cohort`.

    ``registry`` may carry an expected feature dimension ``{"d": ...}``;
    otherwise the sidecar's registry entry is used.
    """
    path = Path(path)
    side = json.loads(sidecar_path(path).read_text())
    reg = registry if registry is not None else side.get("registry") or {}
    d, raw = decode_bags(path.read_bytes(), reg.get("d"))
    labels = side["labels"]
    if len(labels) != len(raw):
        raise MalformedHeaderError(f"sidecar has {len(labels)} labels for {len(raw)} bags", 6)
    bags, time, event = [], [], []
    for (bag_id, patient_id, cancer, feats), lab in zip(raw, labels):
        if lab["bag_id"] != bag_id:
            raise MalformedHeaderError(f"sidecar order mismatch at bag {bag_id!r}", 0)
        bags.append(InstanceBag(bag_id, patient_id, cancer, feats))
        time.append(lab["time_bin"])
        event.append(lab["event"])
    return Cohort(side["cancer"], bags, make_labels(np.array(time, dtype=np.int64), np.array(event)),
                  side["n_bins"], side.get("metadata", {}))
