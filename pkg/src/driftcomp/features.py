"""In-memory feature matrices and the FTD binary dump format.

A FeatureMatrix holds one extractor's view of a sample set: an n x d array
of feature vectors plus per-row class labels. On disk the values are 32-bit
floats; in memory everything is promoted to float64 because the downstream
ridge solves and covariance work are ill-conditioned in 32-bit.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, DataError, FormatError, ShapeError

FTD_MAGIC = b"FTDK"
FTD_VERSION = 1
_MAX_TAG_BYTES = 64


@dataclass(frozen=True)
class FeatureMatrix:
    """n samples of d-dimensional features with integer class labels.

    Immutable after construction; safe to share across threads.
    """

    values: np.ndarray  # (n, d) float64, row = one sample
    labels: np.ndarray  # (n,) int32, every label >= 0
    task_id: int = 0
    model_tag: str = ""

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        if values.ndim != 2:
            raise ShapeError(f"values must be 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise ShapeError("feature dimension d must be positive")
        if labels.ndim != 1 or labels.shape[0] != values.shape[0]:
            raise ShapeError(
                f"labels length {labels.shape} does not match n={values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("feature values contain non-finite entries")
        if labels.size and labels.min() < 0:
            raise DataError("labels must be non-negative")
        if len(self.model_tag.encode("utf-8")) > _MAX_TAG_BYTES:
            raise DataError(f"model_tag exceeds {_MAX_TAG_BYTES} UTF-8 bytes")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def restrict(self, class_id: int) -> "FeatureMatrix":
        """Rows belonging to one class, order preserved."""
        mask = self.labels == class_id
        return FeatureMatrix(
            self.values[mask], self.labels[mask], self.task_id, self.model_tag
        )

    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


def header_size(model_tag: str) -> int:
    """Byte length of the FTD header for a given tag (8-byte aligned)."""
    raw = 4 + 2 + 2 + 4 + 8 + 4 + 1 + len(model_tag.encode("utf-8"))
    return (raw + 7) // 8 * 8


def write_dump(m: FeatureMatrix, path) -> None:
    """Write an FTD dump. Byte-for-byte deterministic for identical inputs."""
    tag = m.model_tag.encode("utf-8")
    raw_header = struct.pack(
        "<4sHHIQIB", FTD_MAGIC, FTD_VERSION, 0, m.d, m.n, m.task_id, len(tag)
    ) + tag
    pad = header_size(m.model_tag) - len(raw_header)
    try:
        with open(path, "wb") as fh:
            fh.write(raw_header)
            fh.write(b"\x00" * pad)
            fh.write(m.labels.astype("<i4").tobytes())
            fh.write(m.values.astype("<f4").tobytes())
    except OSError as exc:
        raise DataError(f"cannot write feature dump {path}: {exc}") from exc


def load_dump(path) -> FeatureMatrix:
    """Read an FTD dump, validating magic, version, and payload integrity."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read feature dump {path}: {exc}") from exc

    fixed = struct.calcsize("<4sHHIQIB")
    if len(blob) < fixed:
        raise FormatError(f"{path}: file too short for an FTD header")
    magic, version, _reserved, d, n, task_id, tag_len = struct.unpack_from(
        "<4sHHIQIB", blob
    )
    if magic != FTD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FTD_MAGIC!r}")
    if version != FTD_VERSION:
        raise FormatError(f"{path}: unsupported FTD version {version}")
    if tag_len > _MAX_TAG_BYTES:
        raise FormatError(f"{path}: model_tag length {tag_len} exceeds limit")
    tag = blob[fixed : fixed + tag_len].decode("utf-8")

    head = header_size(tag)
    expected = head + 4 * n + 4 * n * d
    if len(blob) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes, found {len(blob)}"
        )
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=head)
    values = np.frombuffer(
        blob, dtype="<f4", count=n * d, offset=head + 4 * n
    ).reshape(n, d)
    if not np.all(np.isfinite(values)):
        raise CorruptionError(f"{path}: payload contains non-finite values")
    if labels.size and labels.min() < 0:
        raise CorruptionError(f"{path}: payload contains negative labels")
    return FeatureMatrix(values.astype(np.float64), labels.astype(np.int32),
                         int(task_id), tag)


def l2_normalize(m: FeatureMatrix) -> FeatureMatrix:
    """Scale every row to unit Euclidean norm.

    Zero rows pass through unchanged (with a warning); they never occur for
    real deep features but must not crash.
    """
    norms = np.linalg.norm(m.values, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if np.any(zero):
        warnings.warn(
            f"l2_normalize: {int(zero.sum())} zero-norm row(s) left unchanged",
            stacklevel=2,
        )
        norms = np.where(norms == 0.0, 1.0, norms)
    return FeatureMatrix(m.values / norms, m.labels, m.task_id, m.model_tag)
