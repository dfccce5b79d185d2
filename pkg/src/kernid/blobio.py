"""Binary artifact format: one JSON header line followed by float32 blobs.

All model, database, parameter and tensor files share this layout.  The
header is a single UTF-8 JSON object terminated by LF; the blobs follow as
raw little-endian 32-bit floats in the order the header declares them.
"""

from __future__ import annotations

import json
from typing import BinaryIO, Sequence

import numpy as np

from kernid.errors import DataError

_F32LE = np.dtype("<f4")


def dumps_header(header: dict) -> bytes:
    """Serialize a header deterministically (sorted keys, compact)."""
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_blob_file(path: str, header: dict, blobs: Sequence[np.ndarray]) -> None:
    """Write header plus float32 blobs; blob order must match the header."""
    with open(path, "wb") as fh:
        fh.write(dumps_header(header))
        for blob in blobs:
            arr = np.ascontiguousarray(blob, dtype=_F32LE)
            fh.write(arr.tobytes())


def read_header(fh: BinaryIO, path: str) -> dict:
    line = fh.readline()
    if not line:
        raise DataError(f"{path}: empty file, expected JSON header line")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise DataError(f"{path}: header must be a JSON object")
    return header


def read_blob(fh: BinaryIO, shape: Sequence[int], path: str) -> np.ndarray:
    """Read one float32 blob of the given shape from the current offset."""
    count = int(np.prod(shape)) if len(shape) else 1
    raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise DataError(f"{path}: truncated blob, wanted {count * 4} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=_F32LE).reshape(tuple(shape)).copy()


def read_blob_file(path: str, blob_shapes_key: str = "shapes") -> tuple[dict, list[np.ndarray]]:
    """Read a header and the blobs listed under ``header[blob_shapes_key]``."""
    with open(path, "rb") as fh:
        header = read_header(fh, path)
        shapes = header.get(blob_shapes_key)
        if shapes is None:
            raise DataError(f"{path}: header lacks '{blob_shapes_key}'")
        blobs = [read_blob(fh, shape, path) for shape in shapes]
    return header, blobs
