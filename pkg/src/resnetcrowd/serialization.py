"""Directory bundles of named float arrays: a JSON manifest plus a raw blob.

The blob holds little-endian 32-bit reals concatenated in manifest order.
The manifest records each array's name, shape, byte offset and length, a
CRC32 of the blob, and a CRC32 over its own canonical content so that
edits to the manifest are detected as well.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = "resnetcrowd-bundle"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class BundleError(Exception):
    """Base class for unreadable bundles."""


class BundleFormatError(BundleError):
    """Manifest missing, unparsable, or with the wrong magic/version."""


class BundleTruncatedError(BundleError):
    """Blob shorter or longer than the manifest says."""


class BundleChecksumError(BundleError):
    """Blob or manifest content does not match its recorded CRC32."""


class BundleShapeError(BundleError):
    """Manifest entries are inconsistent with their shapes or the expected layout."""


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_bundle(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any],
                 manifest_name: str = "manifest.json", blob_name: str = "weights.bin") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    body = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "meta": meta,
        "tensors": entries,
        "blob_crc32": zlib.crc32(blob),
    }
    body["manifest_crc32"] = zlib.crc32(_canonical(body))
    (directory / blob_name).write_bytes(blob)
    (directory / manifest_name).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    return directory


def read_bundle(directory: str | Path, manifest_name: str = "manifest.json",
                blob_name: str = "weights.bin") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    manifest_path = directory / manifest_name
    blob_path = directory / blob_name
    if not manifest_path.is_file():
        raise BundleFormatError(f"{manifest_path}: manifest not found")
    if not blob_path.is_file():
        raise BundleFormatError(f"{blob_path}: weight blob not found")
    try:
        body = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{manifest_path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(body, dict) or body.get("magic") != MAGIC:
        raise BundleFormatError(f"{manifest_path}: bad magic {body.get('magic') if isinstance(body, dict) else None!r}")
    if body.get("format_version") != FORMAT_VERSION:
        raise BundleFormatError(
            f"{manifest_path}: format version {body.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    recorded = body.pop("manifest_crc32", None)
    if recorded != zlib.crc32(_canonical(body)):
        raise BundleChecksumError(f"{manifest_path}: manifest checksum mismatch")

    entries = body["tensors"]
    expected_offset = 0
    for i, entry in enumerate(entries):
        shape = entry["shape"]
        if any((not isinstance(s, int)) or s < 0 for s in shape):
            raise BundleShapeError(f"{manifest_path}: tensor {i} ({entry['name']}) has invalid shape {shape}")
        if int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize != entry["byte_length"]:
            raise BundleShapeError(
                f"{manifest_path}: tensor {entry['name']} shape {shape} disagrees with byte_length {entry['byte_length']}"
            )
        if entry["offset"] != expected_offset:
            raise BundleShapeError(f"{manifest_path}: tensor {entry['name']} offset {entry['offset']} is not contiguous")
        expected_offset += entry["byte_length"]

    blob = blob_path.read_bytes()
    if len(blob) != expected_offset:
        raise BundleTruncatedError(f"{blob_path}: {len(blob)} bytes on disk, manifest describes {expected_offset}")
    if zlib.crc32(blob) != body["blob_crc32"]:
        raise BundleChecksumError(f"{blob_path}: blob checksum mismatch")

    arrays = {}
    for entry in entries:
        start = entry["offset"]
        raw = blob[start : start + entry["byte_length"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float32).reshape(entry["shape"])
    return arrays, body["meta"]
