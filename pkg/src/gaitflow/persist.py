"""Versioned on-disk container for datasets and checkpoints.

Layout: a single JSON header line (sorted keys) followed by the raw bytes
of each array, concatenated in header order. The header carries a format
name, a version, arbitrary metadata, an array index, and a sha256 content
hash over the array payload plus the canonical metadata. Writing is fully
deterministic, so identical content yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = ["write_container", "read_container", "content_digest"]


def content_digest(meta: dict, arrays: dict) -> str:
    """sha256 over canonical metadata plus raw array bytes, by sorted name."""
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_container(path, kind: str, version: int, meta: dict, arrays: dict) -> str:
    """Write the container; returns the embedded content hash."""
    path = Path(path)
    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    digest = content_digest(meta, arrays)
    header = {
        "format": kind,
        "version": version,
        "meta": meta,
        "arrays": index,
        "content_hash": digest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)
    return digest


def read_container(path, kind: str, version: int, verify: bool = True):
    """Read a container back; returns ``(meta, arrays, content_hash)``.

    Rejects files of the wrong format or an unknown version with a
    descriptive error, and (by default) re-checks the embedded hash.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not a {kind} container") from exc
        if header.get("format") != kind:
            raise ValueError(
                f"{path}: expected format {kind!r}, found {header.get('format')!r}"
            )
        if header.get("version") != version:
            raise ValueError(
                f"{path}: unsupported {kind} version {header.get('version')!r} "
                f"(this build reads version {version})"
            )
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if verify:
        digest = content_digest(header["meta"], arrays)
        if digest != header["content_hash"]:
            raise ValueError(f"{path}: content hash mismatch, file corrupted")
    return header["meta"], arrays, header["content_hash"]
