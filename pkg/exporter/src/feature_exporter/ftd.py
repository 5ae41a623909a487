"""Writer for the FTD feature-dump interchange format.

Layout (little endian): magic "FTDK", version u16, reserved u16, d u32,
n u64, task_id u32, tag length u8, the UTF-8 model tag, zero padding to an
8-byte boundary, then n i32 labels and n*d f32 feature values, row major.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

FTD_MAGIC = b"FTDK"
FTD_VERSION = 1
_MAX_TAG_BYTES = 64


def header_size(model_tag: str) -> int:
    raw = 4 + 2 + 2 + 4 + 8 + 4 + 1 + len(model_tag.encode("utf-8"))
    return (raw + 7) // 8 * 8


def write_dump(values: np.ndarray, labels: np.ndarray, path,
               task_id: int = 0, model_tag: str = "") -> None:
    """Write one feature matrix as an FTD dump."""
    values = np.ascontiguousarray(np.asarray(values, dtype=np.float32))
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int32))
    if values.ndim != 2 or labels.shape != (values.shape[0],):
        raise DataError(
            f"inconsistent dump shapes {values.shape} / {labels.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("feature values contain non-finite entries")
    if labels.size and labels.min() < 0:
        raise DataError("labels must be non-negative")
    tag = model_tag.encode("utf-8")
    if len(tag) > _MAX_TAG_BYTES:
        raise DataError(f"model_tag exceeds {_MAX_TAG_BYTES} UTF-8 bytes")
    n, d = values.shape
    raw_header = struct.pack("<4sHHIQIB", FTD_MAGIC, FTD_VERSION, 0,
                             d, n, task_id, len(tag)) + tag
    pad = header_size(model_tag) - len(raw_header)
    try:
        with open(path, "wb") as fh:
            fh.write(raw_header)
            fh.write(b"\x00" * pad)
            fh.write(labels.astype("<i4").tobytes())
            fh.write(values.astype("<f4").tobytes())
    except OSError as exc:
        raise DataError(f"cannot write feature dump {path}: {exc}") from exc
