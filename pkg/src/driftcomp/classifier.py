"""Incrementally expanded linear classifier: task-local cross-entropy
training on real features and post-hoc refinement on synthetic Gaussian
samples.

Refinement draws a fresh synthetic batch every step (class uniform over the
bank, feature from that class's Gaussian) and takes plain gradient-descent
steps with a linearly decayed rate; the problem is convex, so adaptive
moments are unnecessary.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    ConflictError,
    CoverageError,
    DataError,
    FormatError,
    ShapeError,
)
from .features import FeatureMatrix
from .gaussians import GaussianBank, cholesky_factor

LCLF_MAGIC = b"LCLF"


@dataclass(frozen=True)
class LinearClassifier:
    weight: np.ndarray       # (k, d)
    bias: np.ndarray         # (k,)
    class_ids: tuple         # row -> class id

    def __post_init__(self):
        weight = np.ascontiguousarray(np.asarray(self.weight, dtype=np.float64))
        bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
        ids = tuple(int(c) for c in self.class_ids)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError("inconsistent classifier shapes")
        if len(ids) != weight.shape[0]:
            raise ShapeError("class_ids length does not match weight rows")
        if len(set(ids)) != len(ids):
            raise ConflictError("duplicate class ids")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise DataError("classifier parameters contain non-finite entries")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "class_ids", ids)

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def empty(cls, d: int) -> "LinearClassifier":
        return cls(np.zeros((0, d)), np.zeros(0), ())

    def row_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise CoverageError(f"class {class_id} unknown to classifier") from None

    def logits(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weight.T + self.bias

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", LCLF_MAGIC, self.d, self.k))
            fh.write(np.asarray(self.class_ids, dtype="<i4").tobytes())
            fh.write(self.bias.astype("<f8").tobytes())
            fh.write(self.weight.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LinearClassifier":
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<4sII")
        if len(blob) < head:
            raise FormatError(f"{path}: too short for a classifier header")
        magic, d, k = struct.unpack_from("<4sII", blob)
        if magic != LCLF_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if len(blob) != head + 4 * k + 8 * k + 8 * k * d:
            raise FormatError(f"{path}: payload size mismatch")
        off = head
        ids = np.frombuffer(blob, dtype="<i4", count=k, offset=off)
        off += 4 * k
        bias = np.frombuffer(blob, dtype="<f8", count=k, offset=off).copy()
        off += 8 * k
        weight = np.frombuffer(blob, dtype="<f8", offset=off).reshape(k, d).copy()
        return cls(weight, bias, tuple(int(c) for c in ids))


@dataclass(frozen=True)
class RefineConfig:
    """Synthetic-rehearsal settings; also reused for cross-entropy training."""

    steps: int = 2000
    batch_size: int = 128
    lr_start: float = 1e-1  # high enough to rebalance a task-biased warm start
    lr_end: float | None = None  # defaults to lr_start / 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        lr_end = self.lr_start / 10 if self.lr_end is None else self.lr_end
        if not self.lr_start >= lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        object.__setattr__(self, "lr_end", lr_end)


def expand(clf: LinearClassifier, new_class_ids) -> LinearClassifier:
    """Append zero-initialized rows for new classes; old rows untouched."""
    new_ids = [int(c) for c in new_class_ids]
    overlap = set(new_ids) & set(clf.class_ids)
    if overlap:
        raise ConflictError(f"classes already present: {sorted(overlap)}")
    if len(set(new_ids)) != len(new_ids):
        raise ConflictError("duplicate ids in expansion set")
    weight = np.vstack([clf.weight, np.zeros((len(new_ids), clf.d))])
    bias = np.concatenate([clf.bias, np.zeros(len(new_ids))])
    return LinearClassifier(weight, bias, clf.class_ids + tuple(new_ids))


def softmax_probs(clf: LinearClassifier, f: np.ndarray, subset) -> np.ndarray:
    """Softmax over the logits of a class subset, in the subset's order."""
    rows = [clf.row_of(c) for c in subset]
    logits = clf.logits(np.asarray(f, dtype=np.float64))
    sub = logits[..., rows]
    sub = sub - sub.max(axis=-1, keepdims=True)
    e = np.exp(sub)
    return e / e.sum(axis=-1, keepdims=True)


def _sgd_ce(weight: np.ndarray, bias: np.ndarray,
            cfg: RefineConfig, sampler) -> None:
    """In-place mini-batch gradient descent on softmax cross-entropy.

    `sampler(step)` yields a (batch_features, batch_target_rows) pair.
    """
    probs = grad_w = rows = None  # step-shaped scratch, allocated once
    for step in range(cfg.steps):
        bx, bt = sampler(step)
        if probs is None or probs.shape[0] != bt.size:
            probs = np.empty((bt.size, weight.shape[0]), dtype=weight.dtype)
            grad_w = np.empty_like(weight)
            rows = np.arange(bt.size)
        np.dot(bx, weight.T, out=probs)
        probs += bias
        probs -= probs.max(axis=1, keepdims=True)
        np.exp(probs, out=probs)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[rows, bt] -= 1.0
        probs /= bt.size
        frac = step / (cfg.steps - 1) if cfg.steps > 1 else 0.0
        lr = cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)
        np.dot(probs.T, bx, out=grad_w)
        grad_w *= lr
        weight -= grad_w
        bias -= lr * probs.sum(axis=0)


def train_ce(clf: LinearClassifier, feats: FeatureMatrix, subset=None,
             cfg: RefineConfig = RefineConfig()) -> LinearClassifier:
    """Cross-entropy training with the softmax restricted to `subset`.

    Only the subset's rows are updated; used on current-task features where
    the loss is deliberately task-local.
    """
    if subset is None:
        subset = feats.class_ids()
    subset = [int(c) for c in subset]
    rows = [clf.row_of(c) for c in subset]
    row_of_class = {c: i for i, c in enumerate(subset)}
    bad = set(int(l) for l in feats.labels) - set(subset)
    if bad:
        raise DataError(f"labels outside training subset: {sorted(bad)}")
    if feats.n == 0:
        raise DataError("cannot train on an empty feature matrix")

    sub_w = clf.weight[rows].copy()
    sub_b = clf.bias[rows].copy()
    x = feats.values
    targets = np.array([row_of_class[int(l)] for l in feats.labels])
    rng = np.random.default_rng(cfg.seed)
    n = feats.n

    def sampler(_step):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        return x[idx], targets[idx]

    _sgd_ce(sub_w, sub_b, cfg, sampler)
    weight = clf.weight.copy()
    bias = clf.bias.copy()
    weight[rows] = sub_w
    bias[rows] = sub_b
    return LinearClassifier(weight, bias, clf.class_ids)


def refine(clf: LinearClassifier, bank: GaussianBank,
           cfg: RefineConfig = RefineConfig()) -> LinearClassifier:
    """Post-hoc refinement on synthetic features from the Gaussian bank.

    Every step samples a fresh batch: class uniform over the bank's classes,
    feature from that class's Gaussian. Full-softmax cross-entropy over all
    classifier classes; only classifier parameters change.
    """
    missing = set(clf.class_ids) - set(bank.class_ids())
    if missing:
        raise CoverageError(f"bank missing classes: {sorted(missing)}")
    if clf.k == 0:
        raise CoverageError("cannot refine an empty classifier")

    ids = list(clf.class_ids)
    mus = np.stack([bank[c].mu for c in ids]).astype(np.float32)
    chols = [cholesky_factor(bank[c]).astype(np.float32) for c in ids]
    # single precision throughout: sampling noise dwarfs rounding here
    weight = clf.weight.astype(np.float32)
    bias = clf.bias.astype(np.float32)
    rng = np.random.default_rng(cfg.seed)

    # Draw every step's batch up front: multinomial class counts let each
    # class's Cholesky factor be applied in one matmul over a contiguous
    # block, and a final permutation restores iid class order per slot.
    total = cfg.steps * cfg.batch_size
    counts = rng.multinomial(total, np.full(len(ids), 1.0 / len(ids)))
    sorted_rows = np.repeat(np.arange(len(ids)), counts)
    synth = rng.standard_normal((total, clf.d), dtype=np.float32)
    start = 0
    for i, count in enumerate(counts):
        block = slice(start, start + count)
        synth[block] = mus[i] + synth[block] @ chols[i].T
        start += count
    perm = rng.permutation(total)
    synth = synth[perm]
    targets = sorted_rows[perm]

    def sampler(step):
        block = slice(step * cfg.batch_size, (step + 1) * cfg.batch_size)
        return synth[block], targets[block]

    _sgd_ce(weight, bias, cfg, sampler)
    return LinearClassifier(weight, bias, clf.class_ids)


def evaluate(clf: LinearClassifier, feats: FeatureMatrix) -> float:
    """Top-1 accuracy with argmax over all classes; ties go to the lowest id."""
    if feats.n == 0:
        warnings.warn("evaluate: empty test set, reporting accuracy 0",
                      stacklevel=2)
        return 0.0
    order = np.argsort(clf.class_ids)  # lowest class id wins ties
    logits = clf.logits(feats.values)[:, order]
    ids = np.asarray(clf.class_ids)[order]
    pred = ids[np.argmax(logits, axis=1)]
    return float(np.mean(pred == feats.labels))
