"""Versioned checkpoint container, JSON-lines datasets and deterministic JSON reports.

Checkpoint layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u64 LE) | header JSON | payload

The header lists every array (name, shape, byte offset) plus the SHA-256 of
the payload; the payload is the arrays' little-endian f64 bytes back to back.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CAPCMPK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(IOError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


def dumps_checkpoint(state, meta: dict | None = None) -> bytes:
    arrays = [(name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in state.items()]
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    payload = b"".join(arr.tobytes() for _, arr in arrays)
    header = json.dumps({"meta": meta or {}, "tensors": entries, "payload_bytes": len(payload),
                         "payload_sha256": hashlib.sha256(payload).hexdigest()},
                        sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def loads_checkpoint(blob: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns (OrderedDict of arrays, meta)."""
    if len(blob) < _PREFIX.size:
        raise TruncatedFileError(f"file holds {len(blob)} bytes; the fixed prefix needs {_PREFIX.size}")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedFileError("file ends inside the header")
    try:
        header = json.loads(blob[_PREFIX.size:start])
    except ValueError as e:
        raise CorruptFileError(f"unreadable header: {e}") from None
    payload = blob[start:]
    if len(payload) < header["payload_bytes"]:
        raise TruncatedFileError(f"payload has {len(payload)} of {header['payload_bytes']} bytes")
    if len(payload) > header["payload_bytes"]:
        raise CorruptFileError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFileError("payload checksum mismatch")
    out = OrderedDict()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]


def save_checkpoint(path, state, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(state, meta))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())


def save_models(path, models, meta: dict | None = None) -> None:
    state = OrderedDict()
    for prefix, mod in (("lvlm", models.lvlm), ("captioner", models.captioner),
                        ("selector", models.selector)):
        for name, arr in mod.state_dict().items():
            state[f"{prefix}.{name}"] = arr
    save_checkpoint(path, state, meta)


def load_models_into(path, models) -> dict:
    """Fill ``models`` in place from a container written by :func:`save_models`; returns meta."""
    state, meta = load_checkpoint(path)
    for prefix, mod in (("lvlm", models.lvlm), ("captioner", models.captioner),
                        ("selector", models.selector)):
        p = prefix + "."
        mod.load_state_dict({k[len(p):]: v for k, v in state.items() if k.startswith(p)})
    return meta


# ---------------------------------------------------------------------------
# JSON / JSONL
# ---------------------------------------------------------------------------


def dumps_json(obj) -> str:
    """Canonical JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def _plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def save_jsonl(path, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(_plain(r), sort_keys=True, separators=(",", ":")) + "\n")


def load_jsonl(path) -> list:
    rows = []
    with open(path) as f:
        for i, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as e:
                # every record is newline-terminated, so a broken final line was cut short
                err = TruncatedFileError if not line.endswith("\n") else CorruptFileError
                raise err(f"{path}:{i}: {e}") from None
    return rows


def save_dataset(path, samples) -> None:
    save_jsonl(path, [s.to_json() for s in samples])


def load_dataset(path) -> list:
    from .data import SyntheticSample

    return [SyntheticSample.from_json(r) for r in load_jsonl(path)]


def save_preferences(path, records) -> None:
    save_jsonl(path, [r.to_json() for r in records])


def load_preferences(path) -> list:
    from ..preference import PreferenceRecord

    return [PreferenceRecord.from_json(r) for r in load_jsonl(path)]
