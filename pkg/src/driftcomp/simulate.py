"""Synthetic class-incremental feature streams with known ground-truth drift.

Every stream provides, per task, row-aligned (previous-space, current-space)
training pairs, a cumulative test set in the current space, optional
unlabeled auxiliary pairs, and the exact drift operator that produced the
transition. The exact operator is what makes independent oracles possible:
compensation quality can be compared against the true map instead of
against another estimate.

Geometry: class means sit on a sphere of radius separation * sqrt(d) with
unit within-class covariance; all features are L2-normalized at emission.
Drift acts globally on the raw (pre-normalization) latent space, one
operator per task transition:

  rotation        orthogonal matrix on the geodesic from I, arc length
                  proportional to the effective magnitude (exact
                  orthogonality is what the Gram-invariance oracle needs)
  affine          rotation plus a small bias
  weak_nonlinear  affine plus eps * tanh-mixed displacement, eps capped at
                  0.3 * magnitude so the linear part stays dominant

kd_damping scales the effective magnitude down, emulating
distillation-constrained backbones without training one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.linalg.blas import ssyrk

from .errors import ConfigError, DataError, FormatError
from .features import FeatureMatrix, l2_normalize, load_dump, write_dump
from .gaussians import (
    ClassGaussian,
    GaussianBank,
    cholesky_factor,
    linear_pushforward,
)

ROTATION_ARC = 2.0  # radians of maximum plane rotation at magnitude 1
DRIFT_KINDS = ("none", "rotation", "affine", "weak_nonlinear")


@dataclass(frozen=True)
class SimConfig:
    d: int = 32
    tasks: int = 5
    classes_per_task: int = 10
    train_per_class: int = 20
    test_per_class: int = 20
    class_separation: float = 2.0
    drift_kind: str = "rotation"
    drift_magnitude: float = 0.5
    kd_damping: float = 0.0
    aux_pool_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.tasks, self.classes_per_task,
               self.train_per_class, self.test_per_class) < 1:
            raise ConfigError("all counts must be >= 1")
        if self.aux_pool_size < 0:
            raise ConfigError("aux_pool_size must be >= 0")
        if self.drift_kind not in DRIFT_KINDS:
            raise ConfigError(f"unknown drift_kind {self.drift_kind!r}")
        if not 0.0 <= self.drift_magnitude <= 1.0:
            raise ConfigError("drift_magnitude must lie in [0, 1]")
        if not 0.0 <= self.kd_damping <= 1.0:
            raise ConfigError("kd_damping must lie in [0, 1]")

    @property
    def effective_magnitude(self) -> float:
        return self.drift_magnitude * (1.0 - self.kd_damping)

    @property
    def raw_scale(self) -> float:
        """Expected raw feature norm: sqrt(d * (1 + separation^2))."""
        return float(np.sqrt(self.d * (1.0 + self.class_separation**2)))


@dataclass(frozen=True)
class DriftOperator:
    """Exact map applied to the raw latent space at one task transition."""

    rotation: np.ndarray          # (d, d) orthogonal
    bias: np.ndarray              # (d,)
    eps: float                    # tanh displacement coefficient
    mix: np.ndarray | None        # (d, d) tanh input mixing, None when eps = 0
    scale: float                  # typical raw feature norm

    @property
    def d(self) -> int:
        return self.rotation.shape[0]

    @property
    def is_identity(self) -> bool:
        return (self.eps == 0.0 and not self.bias.any()
                and np.array_equal(self.rotation, np.eye(self.d)))

    @property
    def is_linear(self) -> bool:
        return self.eps == 0.0

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Map raw (pre-normalization) feature rows into the next space."""
        out = raw @ self.rotation.T + self.bias
        if self.eps:
            unit_arg = raw @ self.mix.T * (np.sqrt(self.d) / self.scale)
            out = out + self.eps * (self.scale / np.sqrt(self.d)) * np.tanh(unit_arg)
        return out

    def apply_normalized(self, unit_rows: np.ndarray) -> np.ndarray:
        """Induced map on L2-normalized features (rescale, map, renormalize)."""
        mapped = self.apply(unit_rows * self.scale)
        norms = np.linalg.norm(mapped, axis=-1, keepdims=True)
        return mapped / np.where(norms == 0.0, 1.0, norms)

    @classmethod
    def identity(cls, d: int, scale: float) -> "DriftOperator":
        return cls(np.eye(d), np.zeros(d), 0.0, None, scale)


@dataclass(frozen=True)
class TaskRecord:
    task_id: int
    train_prev: FeatureMatrix   # current task features under the previous model
    train_curr: FeatureMatrix   # same samples under the current model
    test: FeatureMatrix         # all classes seen so far, current space
    gtruth: DriftOperator | None
    aux_prev: FeatureMatrix
    aux_curr: FeatureMatrix


@dataclass(frozen=True)
class Stream:
    records: tuple
    final_train: FeatureMatrix  # all classes' training features, final space
    config: SimConfig | None

    @property
    def d(self) -> int:
        return self.records[0].train_curr.d

    @property
    def final_test(self) -> FeatureMatrix:
        return self.records[-1].test


def _draw_drift(cfg: SimConfig, rng: np.random.Generator) -> DriftOperator:
    mag = cfg.effective_magnitude
    s = cfg.raw_scale
    if cfg.drift_kind == "none" or mag == 0.0:
        return DriftOperator.identity(cfg.d, s)
    raw = rng.standard_normal((cfg.d, cfg.d))
    skew = (raw - raw.T) / 2.0
    skew *= 1.0 / np.linalg.norm(skew, 2)
    rotation = expm(mag * ROTATION_ARC * skew)
    if cfg.drift_kind == "rotation":
        return DriftOperator(rotation, np.zeros(cfg.d), 0.0, None, s)
    bias = 0.1 * mag * (s / np.sqrt(cfg.d)) * rng.standard_normal(cfg.d)
    if cfg.drift_kind == "affine":
        return DriftOperator(rotation, bias, 0.0, None, s)
    mix = rng.standard_normal((cfg.d, cfg.d)) / np.sqrt(cfg.d)
    return DriftOperator(rotation, bias, 0.3 * mag, mix, s)


def _emit(values: np.ndarray, labels: np.ndarray, task_id: int,
          tag: str) -> FeatureMatrix:
    return l2_normalize(FeatureMatrix(values, labels, task_id, tag))


def gen_stream(cfg: SimConfig) -> Stream:
    """Generate a fully deterministic task stream for the given config."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    d, cpt = cfg.d, cfg.classes_per_task
    n_classes = cfg.tasks * cpt

    directions = rng.standard_normal((n_classes, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * cfg.class_separation * np.sqrt(d)

    train_pools = [means[c] + rng.standard_normal((cfg.train_per_class, d))
                   for c in range(n_classes)]
    test_pools = [means[c] + rng.standard_normal((cfg.test_per_class, d))
                  for c in range(n_classes)]

    if cfg.aux_pool_size:
        n_aux_means = max(16, cpt)
        aux_dirs = rng.standard_normal((n_aux_means, d))
        aux_dirs /= np.linalg.norm(aux_dirs, axis=1, keepdims=True)
        aux_means = aux_dirs * cfg.class_separation * np.sqrt(d)
        pick = rng.integers(0, n_aux_means, size=cfg.aux_pool_size)
        aux_pool = aux_means[pick] + rng.standard_normal((cfg.aux_pool_size, d))
    else:
        aux_pool = np.zeros((0, d))
    aux_labels = np.zeros(aux_pool.shape[0], dtype=np.int32)

    records = []
    for t in range(1, cfg.tasks + 1):
        task_classes = list(range((t - 1) * cpt, t * cpt))
        drift = (DriftOperator.identity(d, cfg.raw_scale) if t == 1
                 else _draw_drift(cfg, rng))

        pre_train = np.vstack([train_pools[c] for c in task_classes])
        train_labels = np.repeat(task_classes, cfg.train_per_class).astype(np.int32)
        pre_aux = aux_pool.copy()

        if not drift.is_identity:
            for c in range(n_classes):
                train_pools[c] = drift.apply(train_pools[c])
                test_pools[c] = drift.apply(test_pools[c])
            aux_pool = drift.apply(aux_pool) if aux_pool.size else aux_pool

        post_train = np.vstack([train_pools[c] for c in task_classes])
        seen = list(range(t * cpt))
        test_values = np.vstack([test_pools[c] for c in seen])
        test_labels = np.repeat(seen, cfg.test_per_class).astype(np.int32)

        records.append(TaskRecord(
            task_id=t,
            train_prev=_emit(pre_train, train_labels, t, "prev"),
            train_curr=_emit(post_train, train_labels, t, "curr"),
            test=_emit(test_values, test_labels, t, "test"),
            gtruth=drift,
            aux_prev=_emit(pre_aux, aux_labels, t, "aux_prev"),
            aux_curr=_emit(aux_pool.copy() if aux_pool.size else aux_pool,
                           aux_labels, t, "aux_curr"),
        ))

    final_values = np.vstack(train_pools)
    final_labels = np.repeat(np.arange(n_classes), cfg.train_per_class).astype(np.int32)
    final_train = _emit(final_values, final_labels, cfg.tasks, "final")
    return Stream(tuple(records), final_train, cfg)


def oracle_compensate(bank: GaussianBank, drift: DriftOperator,
                      seed: int = 0) -> GaussianBank:
    """Push every stored Gaussian through the exact drift operator.

    Linear drift uses the closed-form pushforward (bias enters in normalized
    units); a tanh component falls back to 1000 * d Monte Carlo samples per
    class through the induced normalized-space map.
    """
    if drift.is_identity:
        return bank.map(lambda g: g)
    if drift.is_linear:
        shift = drift.bias / drift.scale

        def push(g: ClassGaussian) -> ClassGaussian:
            moved = linear_pushforward(g, drift.rotation)
            return ClassGaussian(moved.class_id, moved.mu + shift,
                                 moved.sigma, moved.n_source)

        return bank.map(push)

    # Tanh branch: Monte Carlo through the induced normalized-space map.
    # One standard-normal block is shared by every class (each class's
    # moment estimate stays unbiased), the Cholesky factor is folded into
    # the drift matrices so raw samples are never materialized, and the
    # large matmuls run in single precision. This keeps 1000 * d samples
    # per class affordable on one core.
    d = drift.d
    count = 1000 * d
    z = np.random.default_rng(seed).standard_normal((count, d),
                                                    dtype=np.float32)
    s = drift.scale
    mix_scaled = drift.mix * np.sqrt(d)  # tanh argument in normalized units
    amp = np.float32(drift.eps * s / np.sqrt(d))

    chunk = 2048  # keep per-chunk work resident in cache
    # a constant 1-column folds the per-class offsets into the main matmul
    z_aug = np.hstack([z, np.ones((count, 1), dtype=np.float32)])

    def push_mc(g: ClassGaussian) -> ClassGaussian:
        chol = cholesky_factor(g)
        const_lin = (s * (drift.rotation @ g.mu)
                     + drift.bias).astype(np.float32)
        const_arg = (mix_scaled @ g.mu).astype(np.float32)
        f_lin = np.vstack([(s * (drift.rotation @ chol)).T,
                           const_lin]).astype(np.float32)  # (d + 1, d)
        f_arg = np.vstack([(mix_scaled @ chol).T,
                           const_arg]).astype(np.float32)
        # center accumulation around the mapped mean direction so the
        # single-precision outer products stay well conditioned
        center = const_lin / max(np.linalg.norm(const_lin), 1e-30)
        mean_acc = np.zeros(d)
        outer_acc = np.zeros((d, d), dtype=np.float32, order="F")
        for start in range(0, count, chunk):
            blk = z_aug[start:start + chunk]
            linear = blk @ f_lin
            arg = blk @ f_arg
            np.tanh(arg, out=arg)
            arg *= amp
            linear += arg
            norms = np.sqrt(np.einsum("ij,ij->i", linear, linear))
            linear /= np.maximum(norms, 1e-30)[:, None]
            linear -= center
            mean_acc += linear.sum(axis=0)
            outer_acc = ssyrk(1.0, linear.T, c=outer_acc, beta=1.0,
                              overwrite_c=1)
        shifted_mu = mean_acc / count
        upper = outer_acc.astype(np.float64) / count
        outer = np.triu(upper) + np.triu(upper, 1).T
        sigma = outer - np.outer(shifted_mu, shifted_mu)
        return ClassGaussian(g.class_id, shifted_mu + center,
                             (sigma + sigma.T) / 2.0, count)

    return bank.map(push_mc)


PRESETS = {
    # Drift-free control stream.
    "zero_drift": SimConfig(d=32, tasks=10, classes_per_task=10,
                            train_per_class=20, test_per_class=20,
                            drift_kind="none", drift_magnitude=0.0),
    # Pure rotation, 10d pairs per task: linear operator fully identifiable.
    "rotation": SimConfig(d=16, tasks=8, classes_per_task=10,
                          train_per_class=16, test_per_class=20,
                          drift_kind="rotation", drift_magnitude=0.5),
    # Rotation with tiny tasks (2d pairs): the overfitting regime.
    "rotation_small": SimConfig(d=16, tasks=8, classes_per_task=8,
                                train_per_class=4, test_per_class=20,
                                drift_kind="rotation", drift_magnitude=0.5),
    # The main comparison stream: weakly nonlinear drift, 10d pairs per task.
    "weak_nonlinear": SimConfig(d=64, tasks=10, classes_per_task=20,
                                train_per_class=32, test_per_class=25,
                                drift_kind="weak_nonlinear",
                                drift_magnitude=0.8, aux_pool_size=2048),
    # Starved operator fits (d pairs per task) for the auxiliary-data trend.
    "weak_nonlinear_small": SimConfig(d=32, tasks=8, classes_per_task=8,
                                      train_per_class=4, test_per_class=20,
                                      drift_kind="weak_nonlinear",
                                      drift_magnitude=0.6, aux_pool_size=2048),
    # Distillation-damped drift for the joint-training gap check.
    "kd_damped": SimConfig(d=64, tasks=10, classes_per_task=20,
                           train_per_class=32, test_per_class=25,
                           drift_kind="weak_nonlinear",
                           drift_magnitude=0.8, kd_damping=0.7),
}


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def export_stream(stream: Stream, out_dir) -> Path:
    """Write a stream as FTD dumps plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["ftd-manifest v1"]
    for rec in stream.records:
        parts = [f"task {rec.task_id}"]
        views = {"train_prev": rec.train_prev, "train_curr": rec.train_curr,
                 "test": rec.test}
        if rec.aux_prev.n:
            views["aux_prev"] = rec.aux_prev
            views["aux_curr"] = rec.aux_curr
        for view, fm in views.items():
            name = f"t{rec.task_id:03d}_{view}.ftd"
            write_dump(fm, out / name)
            parts.append(f"{view}={name}")
        lines.append(" ".join(parts))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_stream(manifest_path) -> Stream:
    """Load a dumped stream. Ground-truth operators are not recoverable."""
    manifest = Path(manifest_path)
    try:
        lines = manifest.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from exc
    if not lines or lines[0].strip() != "ftd-manifest v1":
        raise FormatError(f"{manifest}: not a v1 FTD manifest")
    records = []
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "task" or len(fields) < 2:
            raise FormatError(f"{manifest}: bad manifest line {line!r}")
        task_id = int(fields[1])
        paths = dict(f.split("=", 1) for f in fields[2:])
        for required in ("train_prev", "train_curr", "test"):
            if required not in paths:
                raise FormatError(f"{manifest}: task {task_id} missing {required}")

        def view(key):
            if key not in paths:
                return None
            return load_dump(manifest.parent / paths[key])

        train_prev = view("train_prev")
        empty = FeatureMatrix(np.zeros((0, train_prev.d)),
                              np.zeros(0, dtype=np.int32), task_id, "aux")
        records.append(TaskRecord(
            task_id=task_id,
            train_prev=train_prev,
            train_curr=view("train_curr"),
            test=view("test"),
            gtruth=None,
            aux_prev=view("aux_prev") or empty,
            aux_curr=view("aux_curr") or empty,
        ))
    if not records:
        raise FormatError(f"{manifest}: no tasks listed")
    records.sort(key=lambda r: r.task_id)
    # Final-space training features are not part of the dump contract.
    last = records[-1]
    return Stream(tuple(records), last.train_curr, None)
