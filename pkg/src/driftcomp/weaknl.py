"""Weak-nonlinear transition operators and the pure-MLP baseline.

The weak-nonlinear map is T(f) = c1 * A f + c2 * psi(f) with a learnable
matrix A, a one-hidden-layer rectified MLP psi, and simplex-constrained
coefficients (c1, c2) parameterized through a 2-way softmax over free
logits, so the constraint c1 + c2 = 1, c >= 0 holds structurally at every
step. Training minimizes mean-squared prediction error on normalized
feature pairs plus gamma2 * (c1 - 1)^2, which pulls the operator toward
its linear part.

Gradients are written out by hand (the training loop doubles as the
reference for the finite-difference checks), optimized with adaptive
moments (0.9 / 0.999, eps 1e-8) and a linearly decayed learning rate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericalError, ShapeError
from .features import FeatureMatrix
from .gaussians import ClassGaussian, reestimate, sample
from .linear_op import _paired_values

WNL_MAGIC = b"WNL1"

DEFAULT_GAMMA2 = 0.5
INIT_C = (0.9, 0.1)


@dataclass
class Mlp:
    """d -> h -> d network, rectified hidden layer, linear output."""

    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (d, h)
    b2: np.ndarray  # (d,)

    def __post_init__(self):
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (d, h) or self.b2.shape != (d,):
            raise ShapeError("inconsistent MLP parameter shapes")
        for p in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(p)):
                raise DataError("MLP parameters contain non-finite entries")

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def h(self) -> int:
        return self.w1.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.w1.T + self.b1, 0.0)
        return hidden @ self.w2.T + self.b2

    def copy(self) -> "Mlp":
        return Mlp(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator) -> "Mlp":
        # Zero-mean uniform fan-in init, zero biases.
        w1 = rng.uniform(-1.0, 1.0, size=(h, d)) / np.sqrt(d)
        w2 = rng.uniform(-1.0, 1.0, size=(d, h)) / np.sqrt(h)
        return cls(w1, np.zeros(h), w2, np.zeros(d))


@dataclass(frozen=True)
class OperatorTrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 5e-4
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


MLPDC_TRAIN = OperatorTrainConfig(weight_decay=1e-6)


def softmax2(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class WeakNonlinearOperator:
    a: np.ndarray            # (d, d)
    psi: Mlp
    logits: np.ndarray       # (2,), (c1, c2) = softmax(logits)
    gamma2: float = DEFAULT_GAMMA2
    train_log: list = field(default_factory=list)  # per-step losses
    final_mse: float = float("nan")                # train-set MSE after training

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def c(self) -> np.ndarray:
        return softmax2(self.logits)

    @property
    def c1(self) -> float:
        return float(self.c[0])

    @property
    def c2(self) -> float:
        return float(self.c[1])

    def copy(self) -> "WeakNonlinearOperator":
        return WeakNonlinearOperator(self.a.copy(), self.psi.copy(),
                                     self.logits.copy(), self.gamma2,
                                     list(self.train_log), self.final_mse)

    def forward(self, f: np.ndarray) -> np.ndarray:
        """T(f) = c1 A f + c2 psi(f); accepts a d-vector or an (n, d) batch."""
        x = np.asarray(f, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.d:
            raise ShapeError(f"input dimension {x.shape[1]} != operator d={self.d}")
        c1, c2 = self.c
        out = c1 * (x @ self.a.T) + c2 * self.psi.forward(x)
        return out[0] if single else out

    def save(self, path) -> None:
        c1, c2 = self.c
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIIddd", WNL_MAGIC, self.d, self.psi.h,
                                 self.gamma2, c1, c2))
            fh.write(self.a.astype("<f8").tobytes())
            for p in (self.psi.w1, self.psi.b1, self.psi.w2, self.psi.b2):
                fh.write(p.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "WeakNonlinearOperator":
        with open(path, "rb") as fh:
            blob = fh.read()
        head = struct.calcsize("<4sIIddd")
        if len(blob) < head:
            raise FormatError(f"{path}: too short for an operator header")
        magic, d, h, gamma2, c1, c2 = struct.unpack_from("<4sIIddd", blob)
        if magic != WNL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        sizes = [d * d, h * d, h, d * h, d]
        if len(blob) != head + 8 * sum(sizes):
            raise FormatError(f"{path}: payload size mismatch")
        off = head
        parts = []
        for count in sizes:
            parts.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy())
            off += 8 * count
        a = parts[0].reshape(d, d)
        psi = Mlp(parts[1].reshape(h, d), parts[2], parts[3].reshape(d, h), parts[4])
        logits = np.log(np.array([max(c1, 1e-300), max(c2, 1e-300)]))
        return cls(a, psi, logits, gamma2)


def init_weaknl(d: int, hidden: int, seed: int,
                gamma2: float = DEFAULT_GAMMA2) -> WeakNonlinearOperator:
    """Fresh operator: A = I, (c1, c2) = (0.9, 0.1), seeded MLP init."""
    if d < 1 or hidden < 1:
        raise ConfigError("d and hidden must be >= 1")
    rng = np.random.default_rng(seed)
    psi = Mlp.init(d, hidden, rng)
    logits = np.log(np.array(INIT_C))
    return WeakNonlinearOperator(np.eye(d), psi, logits, gamma2)


def forward(op, f: np.ndarray) -> np.ndarray:
    """Apply a trained operator (weak-nonlinear or bare Mlp) to features."""
    if isinstance(op, Mlp):
        x = np.asarray(f, dtype=np.float64)
        single = x.ndim == 1
        out = op.forward(x[None, :] if single else x)
        return out[0] if single else out
    return op.forward(f)


def weaknl_loss_and_grads(op: WeakNonlinearOperator, x: np.ndarray, y: np.ndarray):
    """Objective value and analytic gradients on one batch.

    loss = mean over all B*d elements of (T(x) - y)^2 + gamma2 (c1 - 1)^2.
    Returns (loss, grads) with grads keyed a, w1, b1, w2, b2, logits.
    """
    b, d = x.shape
    c = softmax2(op.logits)
    c1, c2 = float(c[0]), float(c[1])
    lin = x @ op.a.T
    z = x @ op.psi.w1.T + op.psi.b1
    hidden = np.maximum(z, 0.0)
    psi_out = hidden @ op.psi.w2.T + op.psi.b2
    out = c1 * lin + c2 * psi_out
    resid = out - y
    mse = float(np.mean(resid**2))
    loss = mse + op.gamma2 * (c1 - 1.0) ** 2

    dout = 2.0 * resid / resid.size
    grads = {
        "a": c1 * (dout.T @ x),
        "w2": (c2 * dout).T @ hidden,
        "b2": c2 * dout.sum(axis=0),
    }
    dhidden = (c2 * dout) @ op.psi.w2
    dz = dhidden * (z > 0)
    grads["w1"] = dz.T @ x
    grads["b1"] = dz.sum(axis=0)
    dc = np.array([
        float(np.sum(dout * lin)) + 2.0 * op.gamma2 * (c1 - 1.0),
        float(np.sum(dout * psi_out)),
    ])
    grads["logits"] = c * (dc - float(c @ dc))
    return loss, grads, mse


def mlp_loss_and_grads(mlp: Mlp, x: np.ndarray, y: np.ndarray):
    """MSE objective and gradients for the pure-MLP map T(f) = psi(f)."""
    z = x @ mlp.w1.T + mlp.b1
    hidden = np.maximum(z, 0.0)
    out = hidden @ mlp.w2.T + mlp.b2
    resid = out - y
    mse = float(np.mean(resid**2))
    dout = 2.0 * resid / resid.size
    grads = {"w2": dout.T @ hidden, "b2": dout.sum(axis=0)}
    dz = (dout @ mlp.w2) * (z > 0)
    grads["w1"] = dz.T @ x
    grads["b1"] = dz.sum(axis=0)
    return mse, grads


class _Adam:
    """Adaptive-moment optimizer over one flat parameter vector.

    Working on a single vector keeps the per-step numpy call count constant
    instead of proportional to the number of parameter arrays.
    """

    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self._scratch = np.empty(size)

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float,
             weight_decay: float = 0.0,
             decay_mask: np.ndarray | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        buf = self._scratch
        self.m *= b1
        np.multiply(grad, 1 - b1, out=buf)
        self.m += buf
        self.v *= b2
        np.multiply(grad, grad, out=buf)
        buf *= 1 - b2
        self.v += buf
        np.divide(self.v, 1 - b2**self.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= lr / (1 - b1**self.t)
        flat -= buf
        if weight_decay:  # decoupled decay on the masked entries
            decayed = flat if decay_mask is None else flat * decay_mask
            flat -= lr * weight_decay * decayed


def _flat_views(arrays: list[np.ndarray]):
    """Concatenate arrays into one vector; return it plus shaped views."""
    flat = np.concatenate([np.ravel(a) for a in arrays])
    views, offset = [], 0
    for a in arrays:
        views.append(flat[offset:offset + a.size].reshape(a.shape))
        offset += a.size
    return flat, views


def _segment_mask(arrays: list[np.ndarray], selected: set[int]) -> np.ndarray:
    mask = np.concatenate([np.full(a.size, float(i in selected))
                           for i, a in enumerate(arrays)])
    return mask


def _lr_at(cfg: OperatorTrainConfig, step: int) -> float:
    if cfg.steps == 1:
        return cfg.lr_start
    frac = step / (cfg.steps - 1)
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)


def _batches(n: int, cfg: OperatorTrainConfig):
    rng = np.random.default_rng(cfg.seed)
    all_idx = rng.integers(0, n, size=(cfg.steps, min(cfg.batch_size, n)))
    yield from all_idx


def train_weaknl(op: WeakNonlinearOperator, x_prev: FeatureMatrix,
                 x_curr: FeatureMatrix,
                 cfg: OperatorTrainConfig = OperatorTrainConfig()
                 ) -> WeakNonlinearOperator:
    """Fit T to row-aligned normalized pairs; returns a trained copy."""
    vp, vc = _paired_values(x_prev, x_curr)
    if vp.shape[0] == 0:
        raise DataError("cannot train an operator on zero pairs")
    if vp.shape[1] != op.d:
        raise ShapeError(f"pair dimension {vp.shape[1]} != operator d={op.d}")
    out = op.copy()
    out.train_log = []
    order = ("a", "w1", "b1", "w2", "b2", "logits")
    arrays = [out.a, out.psi.w1, out.psi.b1, out.psi.w2, out.psi.b2,
              out.logits]
    flat, views = _flat_views(arrays)
    out.a, out.psi.w1, out.psi.b1, out.psi.w2, out.psi.b2, out.logits = views
    decay_mask = _segment_mask(arrays, {1, 3}) if cfg.weight_decay else None
    opt = _Adam(flat.size)
    gflat, gviews = _flat_views(arrays)
    for step, idx in enumerate(_batches(vp.shape[0], cfg)):
        loss, grads, _ = weaknl_loss_and_grads(out, vp[idx], vc[idx])
        if not np.isfinite(loss):
            raise NumericalError(f"weak-nonlinear training diverged at step {step}")
        for key, view in zip(order, gviews):
            view[...] = grads[key]
        opt.step(flat, gflat, _lr_at(cfg, step), cfg.weight_decay, decay_mask)
        out.train_log.append(loss)
    out.final_mse = float(np.mean((out.forward(vp) - vc) ** 2))
    return out


def train_mlpdc(x_prev: FeatureMatrix, x_curr: FeatureMatrix,
                cfg: OperatorTrainConfig = MLPDC_TRAIN) -> Mlp:
    """Train the pure-MLP compensation baseline with decoupled weight decay."""
    vp, vc = _paired_values(x_prev, x_curr)
    if vp.shape[0] == 0:
        raise DataError("cannot train an operator on zero pairs")
    rng = np.random.default_rng(cfg.seed)
    mlp = Mlp.init(vp.shape[1], vp.shape[1], rng)
    order = ("w1", "b1", "w2", "b2")
    flat, views = _flat_views([mlp.w1, mlp.b1, mlp.w2, mlp.b2])
    mlp.w1, mlp.b1, mlp.w2, mlp.b2 = views
    opt = _Adam(flat.size)
    gflat, gviews = _flat_views([mlp.w1, mlp.b1, mlp.w2, mlp.b2])
    for step, idx in enumerate(_batches(vp.shape[0], cfg)):
        loss, grads = mlp_loss_and_grads(mlp, vp[idx], vc[idx])
        if not np.isfinite(loss):
            raise NumericalError(f"MLP training diverged at step {step}")
        for key, view in zip(order, gviews):
            view[...] = grads[key]
        opt.step(flat, gflat, _lr_at(cfg, step), cfg.weight_decay)
    return mlp


def mc_compensate(op, g: ClassGaussian, n_samples: int | None = None,
                  seed: int = 0) -> ClassGaussian:
    """Push a Gaussian through a learned operator by Monte Carlo.

    Draws n_samples (default 10 d) from g, maps them through the operator,
    and re-estimates mean and covariance from the transformed samples.
    """
    if n_samples is None:
        n_samples = 10 * g.d
    if n_samples < g.d + 1:
        raise ConfigError(
            f"n_samples={n_samples} below covariance identifiability (d+1={g.d + 1})"
        )
    draws = sample(g, n_samples, seed)
    mapped = forward(op, draws.values)
    transformed = FeatureMatrix(mapped, draws.labels, draws.task_id, draws.model_tag)
    return reestimate(transformed, g.class_id)
