"""Closed-form linear transition operators between consecutive feature spaces.

The operator A maps normalized features of the previous extractor onto
normalized features of the current one. It is the ridge solution

    A = Y X^T (X X^T + gamma I)^(-1)

with X, Y the d x n feature matrices (columns = samples), solved through a
Cholesky factorization of the d x d Gram matrix, never an explicit inverse
and never an n x n system.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    ConfigError,
    DataError,
    EmptyFitError,
    FormatError,
    NumericalError,
    ShapeError,
)
from .features import FeatureMatrix

LOP_MAGIC = b"LOP1"

DEFAULT_GAMMA = 1e-4
DEFAULT_ALPHA_TEMP = 1.0


@dataclass(frozen=True)
class LinearOperator:
    """A fitted d x d transition matrix plus the knobs that produced it."""

    a: np.ndarray          # (d, d)
    gamma: float           # ridge coefficient, > 0
    alpha_temp: float      # re-weighting temperature, > 0
    n_fit: int             # feature pairs used in the fit
    w_applied: float = 0.0  # identity-blend weight actually applied, in [0, 1]
    residual_mse: float = float("nan")  # mean squared residual on the fit set

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.a, dtype=np.float64))
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"operator must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DataError("operator matrix contains non-finite entries")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not 0.0 <= self.w_applied <= 1.0:
            raise ConfigError("w_applied must lie in [0, 1]")
        object.__setattr__(self, "a", a)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Apply to row-major samples: rows map through A."""
        return values @ self.a.T

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIdddQd", LOP_MAGIC, self.d, self.gamma,
                                 self.alpha_temp, self.residual_mse,
                                 self.n_fit, self.w_applied))
            fh.write(self.a.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LinearOperator":
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<4sIdddQd")
        if len(blob) < head:
            raise FormatError(f"{path}: too short for an operator header")
        magic, d, gamma, alpha_temp, residual_mse, n_fit, w_applied = (
            struct.unpack_from("<4sIdddQd", blob)
        )
        if magic != LOP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if len(blob) != head + 8 * d * d:
            raise FormatError(f"{path}: payload size mismatch")
        a = np.frombuffer(blob, dtype="<f8", offset=head).reshape(d, d).copy()
        return cls(a, gamma, alpha_temp, int(n_fit), w_applied, residual_mse)


def _paired_values(x_prev: FeatureMatrix, x_curr: FeatureMatrix):
    if x_prev.d != x_curr.d:
        raise ShapeError(
            f"feature dimensions differ: {x_prev.d} vs {x_curr.d}"
        )
    if x_prev.n != x_curr.n:
        raise ShapeError(
            f"pair counts differ: {x_prev.n} vs {x_curr.n}"
        )
    return x_prev.values, x_curr.values


def fit_ridge(x_prev: FeatureMatrix, x_curr: FeatureMatrix,
              gamma: float = DEFAULT_GAMMA,
              alpha_temp: float = DEFAULT_ALPHA_TEMP) -> LinearOperator:
    """Fit the ridge operator on row-aligned (previous, current) feature pairs.

    Inputs are expected to be L2-normalized; the fit itself does not
    normalize. The returned operator carries the fit-set residual MSE so
    linear under-fitting stays observable.
    """
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    vp, vc = _paired_values(x_prev, x_curr)
    n, d = vp.shape
    if n == 0:
        raise EmptyFitError("cannot fit an operator on zero pairs")
    # Row-major samples: X = vp.T, Y = vc.T in the d x n convention.
    gram = vp.T @ vp + gamma * np.eye(d)
    cross = vc.T @ vp  # Y X^T
    try:
        factor = cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:  # unreachable for gamma > 0
        raise NumericalError(f"Gram factorization failed: {exc}") from exc
    a = cho_solve(factor, cross.T, check_finite=False).T
    residual = vp @ a.T - vc
    mse = float(np.mean(residual**2)) if n else float("nan")
    return LinearOperator(a, gamma, alpha_temp, n, 0.0, mse)


def reweight_identity(op: LinearOperator, n_t: int,
                      alpha_temp: float | None = None,
                      d: int | None = None) -> LinearOperator:
    """Blend the operator toward the identity by sample complexity.

    w = exp(-n_t / (alpha_temp * d)), A' = (1 - w) A + w I. Few pairs pull
    the operator to a safe identity; many pairs leave the fit untouched.
    """
    if n_t < 0:
        raise ConfigError("n_t must be non-negative")
    if alpha_temp is None:
        alpha_temp = op.alpha_temp
    if alpha_temp <= 0:
        raise ConfigError("alpha_temp must be positive")
    if d is None:
        d = op.d
    w = float(np.exp(-n_t / (alpha_temp * d)))
    blended = (1.0 - w) * op.a + w * np.eye(op.d)
    return replace(op, a=blended, alpha_temp=alpha_temp, w_applied=w)


def fit_with_ade(x_prev: FeatureMatrix, x_curr: FeatureMatrix,
                 aux_prev: FeatureMatrix, aux_curr: FeatureMatrix,
                 gamma: float = DEFAULT_GAMMA,
                 alpha_temp: float = DEFAULT_ALPHA_TEMP) -> LinearOperator:
    """Ridge fit on task pairs enriched with unlabeled auxiliary pairs.

    Identical to fit_ridge on the row-wise concatenation; n_fit counts both
    sets, so subsequent re-weighting sees the combined sample complexity.
    """
    ap, ac = _paired_values(aux_prev, aux_curr)
    vp, vc = _paired_values(x_prev, x_curr)
    if ap.shape[0] and ap.shape[1] != vp.shape[1]:
        raise ShapeError(
            f"aux dimension {ap.shape[1]} does not match task dimension {vp.shape[1]}"
        )
    merged_prev = FeatureMatrix(
        np.vstack([vp, ap]) if ap.shape[0] else vp,
        np.concatenate([x_prev.labels,
                        np.zeros(ap.shape[0], dtype=np.int32)]),
        x_prev.task_id, x_prev.model_tag,
    )
    merged_curr = FeatureMatrix(
        np.vstack([vc, ac]) if ac.shape[0] else vc,
        np.concatenate([x_curr.labels,
                        np.zeros(ac.shape[0], dtype=np.int32)]),
        x_curr.task_id, x_curr.model_tag,
    )
    return fit_ridge(merged_prev, merged_curr, gamma, alpha_temp)
