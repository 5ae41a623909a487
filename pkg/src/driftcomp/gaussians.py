"""Per-class Gaussian feature distributions and the bank of all of them.

Covariances use the population (1/n) normalization. Every operation that
produces a covariance symmetrizes it, since floating-point asymmetry
otherwise breaks Cholesky factorizations downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptionError,
    DataError,
    EmptyClassError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .features import FeatureMatrix

GBNK_MAGIC = b"GBNK"
GBNK_VERSION = 1

_SYM_TOL = 1e-9
_PSD_TOL = 1e-8  # relative to trace/d


@dataclass(frozen=True)
class ClassGaussian:
    """Mean and covariance of one class's feature distribution."""

    class_id: int
    mu: np.ndarray      # (d,)
    sigma: np.ndarray   # (d, d) symmetric PSD
    n_source: int       # samples the estimate came from

    def __post_init__(self):
        mu = np.ascontiguousarray(np.asarray(self.mu, dtype=np.float64))
        sigma = np.ascontiguousarray(np.asarray(self.sigma, dtype=np.float64))
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise ShapeError(
                f"inconsistent Gaussian shapes mu={mu.shape} sigma={sigma.shape}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DataError("Gaussian parameters contain non-finite entries")
        asym = np.abs(sigma - sigma.T).max(initial=0.0)
        if asym > _SYM_TOL:
            raise DataError(f"sigma asymmetric by {asym:.3e}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return self.mu.size

    def validate_psd(self) -> None:
        """Check positive semidefiniteness up to the documented slack."""
        w = np.linalg.eigvalsh(self.sigma)
        floor = -_PSD_TOL * max(np.trace(self.sigma), 0.0) / self.d
        if w.min() < floor:
            raise NumericalError(
                f"class {self.class_id}: covariance indefinite, "
                f"min eigenvalue {w.min():.3e}"
            )


def _symmetrize(s: np.ndarray) -> np.ndarray:
    return (s + s.T) / 2.0


def estimate_gaussian(features: FeatureMatrix, class_id: int | None = None) -> ClassGaussian:
    """Sample mean and population (1/n) covariance of a single-class matrix."""
    if features.n == 0:
        raise EmptyClassError("cannot estimate a Gaussian from zero samples")
    ids = features.class_ids()
    if class_id is None:
        if len(ids) != 1:
            raise DataError(f"expected a single-class matrix, got classes {ids}")
        class_id = ids[0]
    x = features.values
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = _symmetrize(centered.T @ centered / features.n)
    return ClassGaussian(class_id, mu, sigma, features.n)


def reestimate(g_samples: FeatureMatrix, class_id: int) -> ClassGaussian:
    """Re-fit a Gaussian to transformed Monte Carlo samples.

    Same contract as estimate_gaussian; named separately so the compensation
    loop reads one step at a time.
    """
    return estimate_gaussian(g_samples, class_id)


def linear_pushforward(g: ClassGaussian, a) -> ClassGaussian:
    """Map a Gaussian through a linear operator: mu' = A mu, sigma' = A sigma A^T.

    `a` may be a d x d array or anything with an `.a` array attribute.
    Exact (no sampling), per the closed form for linear maps of Gaussians.
    """
    mat = np.asarray(getattr(a, "a", a), dtype=np.float64)
    if mat.shape != (g.d, g.d):
        raise ShapeError(f"operator shape {mat.shape} does not match d={g.d}")
    mu = mat @ g.mu
    sigma = _symmetrize(mat @ g.sigma @ mat.T)
    return ClassGaussian(g.class_id, mu, sigma, g.n_source)


def sample(g: ClassGaussian, count: int, seed: int,
           task_id: int = -1, model_tag: str = "synthetic") -> FeatureMatrix:
    """Draw `count` i.i.d. samples from the Gaussian, deterministically per seed.

    Uses a Cholesky factor of sigma; on factorization failure a jitter of
    eps = 1e-6 * trace(sigma)/d is added once (absolute 1e-6 when the trace
    is zero, so degenerate point masses still sample).
    """
    if count < 1:
        raise DataError("sample count must be >= 1")
    chol = cholesky_factor(g)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, g.d))
    values = g.mu + z @ chol.T
    labels = np.full(count, g.class_id, dtype=np.int32)
    return FeatureMatrix(values, labels, task_id, model_tag)


def cholesky_factor(g: ClassGaussian) -> np.ndarray:
    """Lower Cholesky factor of sigma, applying the jitter policy on failure."""
    try:
        return np.linalg.cholesky(g.sigma)
    except np.linalg.LinAlgError:
        pass
    trace = float(np.trace(g.sigma))
    eps = 1e-6 * trace / g.d if trace > 0 else 1e-6
    try:
        return np.linalg.cholesky(g.sigma + eps * np.eye(g.d))
    except np.linalg.LinAlgError:
        w_min = float(np.linalg.eigvalsh(g.sigma).min())
        raise NumericalError(
            f"class {g.class_id}: covariance indefinite beyond jitter, "
            f"min eigenvalue {w_min:.3e}"
        ) from None


class GaussianBank:
    """The set of per-class Gaussians accumulated over all tasks so far."""

    def __init__(self, gaussians: dict[int, ClassGaussian] | None = None):
        self._bank: dict[int, ClassGaussian] = dict(gaussians or {})

    def __len__(self) -> int:
        return len(self._bank)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._bank

    def __getitem__(self, class_id: int) -> ClassGaussian:
        return self._bank[class_id]

    def class_ids(self) -> list[int]:
        return sorted(self._bank)

    def add(self, g: ClassGaussian, replace: bool = False) -> None:
        if g.class_id in self._bank and not replace:
            raise DataError(f"class {g.class_id} already in bank")
        self._bank[g.class_id] = g

    def replace_all(self, gaussians: dict[int, ClassGaussian]) -> "GaussianBank":
        """New bank with the given classes swapped in (compensation step)."""
        merged = dict(self._bank)
        merged.update(gaussians)
        return GaussianBank(merged)

    def map(self, fn) -> "GaussianBank":
        """New bank with fn applied to every Gaussian."""
        return GaussianBank({cid: fn(g) for cid, g in self._bank.items()})

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sHI", GBNK_MAGIC, GBNK_VERSION, len(self._bank)))
            for cid in self.class_ids():
                g = self._bank[cid]
                fh.write(struct.pack("<iQI", g.class_id, g.n_source, g.d))
                fh.write(g.mu.astype("<f8").tobytes())
                fh.write(g.sigma.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GaussianBank":
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<4sHI")
        if len(blob) < head:
            raise FormatError(f"{path}: too short for a bank header")
        magic, version, count = struct.unpack_from("<4sHI", blob)
        if magic != GBNK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != GBNK_VERSION:
            raise FormatError(f"{path}: unsupported bank version {version}")
        off = head
        bank: dict[int, ClassGaussian] = {}
        rec = struct.calcsize("<iQI")
        for _ in range(count):
            if off + rec > len(blob):
                raise CorruptionError(f"{path}: truncated bank record")
            cid, n_source, d = struct.unpack_from("<iQI", blob, off)
            off += rec
            need = 8 * d + 8 * d * d
            if off + need > len(blob):
                raise CorruptionError(f"{path}: truncated Gaussian payload")
            mu = np.frombuffer(blob, dtype="<f8", count=d, offset=off)
            off += 8 * d
            sigma = np.frombuffer(blob, dtype="<f8", count=d * d, offset=off)
            off += 8 * d * d
            bank[cid] = ClassGaussian(cid, mu.copy(), sigma.reshape(d, d).copy(),
                                      int(n_source))
        return cls(bank)
