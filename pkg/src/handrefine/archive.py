"""Single-file tensor archive.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"HRARCHV\\0"
    bytes 8..15   uint64 manifest length M
    bytes 16..    M bytes of UTF-8 JSON manifest
    then          the blob: every tensor's raw little-endian bytes, back to back

Manifest fields: ``version`` (int, currently 1), ``blob_size`` (bytes),
``meta`` (free-form JSON object) and ``tensors``, a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` where ``offset`` is
relative to the start of the blob and ``dtype`` is one of
``float64 float32 int64 int32 uint8 bool``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HRARCHV\0"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "u1", "bool": "?"}


class ArchiveError(ValueError):
    pass


class CorruptManifestError(ArchiveError):
    pass


class ShapeBlobMismatchError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class UnsupportedDtypeError(ArchiveError):
    pass


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise UnsupportedDtypeError(f"{name}: dtype {dname} cannot be archived")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[dname])).tobytes()
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": VERSION, "blob_size": offset, "meta": meta or {}, "tensors": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptManifestError(f"{path}: not a tensor archive (bad magic)")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if 16 + mlen > len(data):
        raise CorruptManifestError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
        version = manifest["version"]
        entries = manifest["tensors"]
        blob_size = int(manifest["blob_size"])
        meta = manifest.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptManifestError(f"{path}: unreadable manifest ({exc})") from None
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: archive version {version} is not supported (expected {VERSION})")
    blob = data[16 + mlen:]
    if len(blob) != blob_size:
        raise ShapeBlobMismatchError(f"{path}: blob has {len(blob)} bytes, manifest declares {blob_size}")

    tensors = {}
    for e in entries:
        try:
            name, dname, shape, off, nbytes = e["name"], e["dtype"], tuple(e["shape"]), e["offset"], e["nbytes"]
        except (KeyError, TypeError) as exc:
            raise CorruptManifestError(f"{path}: malformed tensor entry {e!r}") from exc
        if dname not in _DTYPES:
            raise UnsupportedDtypeError(f"{path}: tensor {name!r} has unsupported dtype {dname!r}")
        dt = np.dtype(_DTYPES[dname])
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected or off < 0 or off + nbytes > len(blob):
            raise ShapeBlobMismatchError(f"{path}: tensor {name!r} shape {list(shape)} does not fit the blob")
        if expected == 0:
            tensors[name] = np.zeros(shape, dtype=dt.newbyteorder("="))
            continue
        arr = np.frombuffer(blob, dtype=dt, count=expected // dt.itemsize, offset=off).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, meta
