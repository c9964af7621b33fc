"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"RGBDSAL\\x00"
    offset 8   uint32    format version (currently 1)
    offset 12  uint32    header length N in bytes
    offset 16  N bytes   UTF-8 JSON header
    offset 16+N          payload: float64 little-endian, row-major, tensors
                         concatenated in header order

The JSON header is written with sorted keys and no whitespace::

    {"config_hash": "<sha256 of the network config>",
     "kind": "teacher" | "student" | "fusion" | ...,
     "meta": {...},
     "tensors": [{"name": str, "shape": [int, ...], "offset": int, "count": int}, ...]}

``offset`` and ``count`` are in elements from the start of the payload.
Identical parameters and header always give identical bytes.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"RGBDSAL\x00"
VERSION = 1


def to_bytes(arrays, config_hash, kind, meta=None):
    entries, chunks, offset = [], [], 0
    for name in arrays:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    header = {"config_hash": config_hash, "kind": kind, "meta": meta or {}, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def save(path, params, config_hash, kind, meta=None):
    """Write ``params`` (name -> Parameter or array) and return the file's sha256."""
    arrays = {name: getattr(p, "data", p) for name, p in params.items()}
    blob = to_bytes(arrays, config_hash, kind, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def from_bytes(blob, source="<bytes>"):
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise DataError(f"{source}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(blob, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for e in header["tensors"]:
        a = payload[e["offset"]:e["offset"] + e["count"]]
        if a.size != e["count"]:
            raise DataError(f"{source}: truncated payload for {e['name']}")
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, header


def load(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, str(path))


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def assign(params, arrays, names=None, rename=None, source="checkpoint"):
    """Copy ``arrays`` into ``params`` in place.

    ``rename`` maps a target parameter name to its name in ``arrays``.
    Missing names or shape mismatches raise a ConfigError listing the diff.
    """
    names = list(params) if names is None else list(names)
    rename = rename or (lambda n: n)
    missing, mismatched = [], []
    for name in names:
        src = rename(name)
        if src not in arrays:
            missing.append(src)
        elif arrays[src].shape != params[name].data.shape:
            mismatched.append(f"{src}: {arrays[src].shape} vs {params[name].data.shape}")
    if missing or mismatched:
        detail = "; ".join(
            ([f"missing {', '.join(missing[:6])}{' ...' if len(missing) > 6 else ''}"] if missing else [])
            + ([f"shape mismatch {', '.join(mismatched[:6])}"] if mismatched else [])
        )
        raise ConfigError(f"{source} does not match the network architecture: {detail}")
    for name in names:
        params[name].data = np.array(arrays[rename(name)], dtype=np.float64)
        params[name].momentum_buffer = np.zeros_like(params[name].data)
