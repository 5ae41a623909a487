"""Per-task feature export with sequential adapter fine-tuning.

For every task the current backbone state is checkpointed as the
"previous" model, the adapters are fine-tuned on the task's images
(cross-entropy through a task-local head, optionally plus the
distillation penalties), and the same rows are dumped under both models:
the pre/post views are row-aligned by construction, and a per-row
checksum side file lets consumers verify that alignment independently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import check_dataset, make_split
from .errors import ConfigError
from .ftd import write_dump
from .losses import GAMMA_KD, GAMMA_NORM, kd_losses
from .model import TinyViT, adapter_parameters, attach_adapters

BACKBONES = ("tiny-vit-random",)


@dataclass(frozen=True)
class ExportConfig:
    dataset: str = "synthetic"
    tasks: int = 2
    classes_per_task: int = 10
    train_per_class: int = 16
    test_per_class: int = 8
    order_seed: int = 0
    backbone: str = "tiny-vit-random"
    rank: int = 4
    epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-4            # final epoch runs at lr / 3
    kd: bool = False
    gamma_kd: float = GAMMA_KD
    gamma_norm: float = GAMMA_NORM
    out: str = "export"
    seed: int = 0

    def __post_init__(self):
        if min(self.tasks, self.classes_per_task, self.train_per_class,
               self.test_per_class, self.epochs, self.batch_size) < 1:
            raise ConfigError("all counts must be >= 1")
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.lr <= 0 or self.gamma_kd < 0 or self.gamma_norm < 0:
            raise ConfigError("lr must be > 0 and penalty weights >= 0")
        if self.backbone not in BACKBONES:
            raise ConfigError(
                f"unknown backbone {self.backbone!r}; known: {BACKBONES}")


def _features(model: TinyViT, images: np.ndarray,
              batch: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            blk = torch.from_numpy(images[start:start + batch])
            out.append(model(blk).numpy())
    return np.concatenate(out)


def _row_checksums(images: np.ndarray) -> list[str]:
    return [hashlib.sha256(img.tobytes()).hexdigest() for img in images]


def _train_task(model: TinyViT, images: np.ndarray, local_labels: np.ndarray,
                f_prev: np.ndarray, cfg: ExportConfig, task_seed: int) -> None:
    head = nn.Linear(model.feature_dim, int(local_labels.max()) + 1)
    params = adapter_parameters(model) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(task_seed)
    x_all = torch.from_numpy(images)
    y_all = torch.from_numpy(local_labels.astype(np.int64))
    prev_all = torch.from_numpy(f_prev)

    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr / 3 if epoch == cfg.epochs - 1 else cfg.lr
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            feats = model(x_all[idx])
            loss = nn.functional.cross_entropy(head(feats), y_all[idx])
            if cfg.kd:
                l_kd, l_norm = kd_losses(prev_all[idx], feats)
                loss = loss + cfg.gamma_kd * l_kd + cfg.gamma_norm * l_norm
            opt.zero_grad()
            loss.backward()
            opt.step()


def export_stream(cfg: ExportConfig) -> Path:
    """Run the sequential export and return the manifest path."""
    check_dataset(cfg.dataset)
    torch.manual_seed(cfg.seed)
    model = attach_adapters(TinyViT(seed=cfg.seed), cfg.rank)

    n_classes = cfg.tasks * cfg.classes_per_task
    order = np.random.default_rng(cfg.order_seed).permutation(n_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["ftd-manifest v1"]
    for t in range(1, cfg.tasks + 1):
        classes = order[(t - 1) * cfg.classes_per_task:
                        t * cfg.classes_per_task]
        images, labels = make_split(classes, cfg.train_per_class, cfg.seed)
        test_images, test_labels = make_split(classes, cfg.test_per_class,
                                              cfg.seed + 1)
        local = np.searchsorted(np.sort(classes), labels)

        f_prev = _features(model, images)
        _train_task(model, images, local, f_prev, cfg,
                    task_seed=cfg.seed * 1000 + t)
        f_curr = _features(model, images)
        f_test = _features(model, test_images)

        names = {}
        views = {
            "train_prev": (f_prev, labels, f"{cfg.backbone}-t{t - 1}"),
            "train_curr": (f_curr, labels, f"{cfg.backbone}-t{t}"),
            "test": (f_test, test_labels, f"{cfg.backbone}-t{t}"),
        }
        for view, (values, view_labels, tag) in views.items():
            name = f"t{t:03d}_{view}.ftd"
            write_dump(values, view_labels, out / name,
                       task_id=t, model_tag=tag)
            names[view] = name
        (out / f"t{t:03d}_rows.sha256").write_text(
            "\n".join(_row_checksums(images)) + "\n")
        lines.append(f"task {t} " + " ".join(f"{v}={n}"
                                             for v, n in names.items()))

    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
