"""Local synthetic image dataset.

Each class is a deterministic procedural texture (a class-seeded mixture of
2-D sinusoids) and samples are noisy draws of it. Everything derives from
the dataset seed, so exports are reproducible and nothing is downloaded.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError

DATASETS = ("synthetic",)
IMG_SIZE = 32
CHANNELS = 3
_WAVES = 4


def _class_texture(class_id: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, class_id]))
    yy, xx = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE] / IMG_SIZE
    img = np.zeros((CHANNELS, IMG_SIZE, IMG_SIZE))
    for _ in range(_WAVES):
        freq = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        weight = rng.standard_normal(CHANNELS)[:, None, None]
        img += weight * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy)
                               + phase)
    return img / _WAVES


def make_split(class_ids, per_class: int, seed: int,
               noise: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Images (n, c, h, w) float32 and labels (n,) for the given classes."""
    images, labels = [], []
    for c in class_ids:
        base = _class_texture(int(c), seed)
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, int(c), per_class]))
        draws = base + noise * rng.standard_normal(
            (per_class, CHANNELS, IMG_SIZE, IMG_SIZE))
        images.append(draws)
        labels.extend([int(c)] * per_class)
    return (np.concatenate(images).astype(np.float32),
            np.asarray(labels, dtype=np.int32))


def check_dataset(name: str) -> None:
    if name not in DATASETS:
        raise DataError(
            f"dataset {name!r} not available locally; known: {DATASETS}")
