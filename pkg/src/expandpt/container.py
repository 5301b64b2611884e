"""Byte-stable tensor container used for checkpoints and embedding files.

Layout::

    EXPANDPT\\n
    <one line of JSON: {"format_version", "kind", "meta", "tensors": [...]}>\\n
    <raw little-endian C-order bytes of every tensor, in header order>

Each tensor entry has ``name``, ``dtype``, ``shape``, ``offset`` and
``nbytes``; offsets are relative to the first byte after the header line.
Nothing time-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EXPANDPT\n"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "tensors": entries}
    line = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + line + b"\n" + b"".join(blobs)


def loads(payload: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if not payload.startswith(MAGIC):
        raise ContainerError("not an expandpt container (bad magic)")
    end = payload.index(b"\n", len(MAGIC))
    header = json.loads(payload[len(MAGIC):end].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {header.get('format_version')}")
    body = memoryview(payload)[end + 1:]
    tensors = {}
    for ent in header["tensors"]:
        dt = np.dtype("<" + ent["dtype"]) if ent["dtype"][0] in "fiu" else np.dtype(ent["dtype"])
        chunk = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(chunk) != ent["nbytes"]:
            raise ContainerError(f"truncated tensor {ent['name']!r}")
        tensors[ent["name"]] = np.frombuffer(chunk, dtype=dt).reshape(ent["shape"]).astype(dt.newbyteorder("="))
    return header["kind"], header["meta"], tensors


def save(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(kind, meta, tensors))


def load(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
