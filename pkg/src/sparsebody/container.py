"""Binary container shared by motion, sparse-input and checkpoint files.

Layout::

    b"ATMO" | version: u32 LE | header length: u32 LE | header (UTF-8 JSON) | data

The header is a JSON object with a ``kind`` string and a ``fields`` list;
each field records ``name``, ``dtype`` (numpy little-endian string),
``shape`` and ``offset``/``nbytes`` relative to the start of the data
section. Arrays are stored C-contiguous in the declared order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError

MAGIC = b"ATMO"
VERSION = 1
_PREAMBLE = struct.Struct("<4sII")


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    fields, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        fields.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({**header, "fields": fields}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise FileFormatError(f"{path}: truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    start = _PREAMBLE.size + hlen
    if len(raw) < start:
        raise FileFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREAMBLE.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable header") from exc
    if kind is not None and header.get("kind") != kind:
        raise FileFormatError(f"{path}: expected a {kind} file, found {header.get('kind')!r}")
    arrays = {}
    try:
        for f in header["fields"]:
            lo = start + int(f["offset"])
            hi = lo + int(f["nbytes"])
            if hi > len(raw):
                raise FileFormatError(f"{path}: field {f['name']!r} runs past end of file")
            arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(f["dtype"]))
            arrays[f["name"]] = arr.reshape(f["shape"]).copy()
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"{path}: malformed field table ({exc})") from exc
    return header, arrays
