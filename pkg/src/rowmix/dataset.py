"""Deterministic synthetic token-classification data."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import qvt


@dataclass
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    prototypes: np.ndarray
    seed: int
    sigma: float

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def generate(cls, seed: int, num_samples: int = 1000, tokens: int = 8, token_dim: int = 16,
                 num_classes: int = 4, sigma: float = 1.0, min_sep: float = 4.0) -> "SyntheticDataset":
        """Gaussian clouds around one random token-sequence prototype per class.

        Prototypes are redrawn until every pair is at least ``min_sep * sigma``
        apart. Classes are balanced and the 80/20 split is fixed by ``seed``.
        """
        if num_samples % num_classes:
            raise ValueError("num_samples must be a multiple of num_classes for balanced classes")
        rng = np.random.default_rng(seed)
        while True:
            protos = rng.normal(0.0, 1.0, size=(num_classes, tokens, token_dim))
            flat = protos.reshape(num_classes, -1)
            dist = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
            if np.min(dist[~np.eye(num_classes, dtype=bool)]) >= min_sep * sigma:
                break
        labels = np.arange(num_samples) % num_classes
        labels = labels[rng.permutation(num_samples)]
        x = protos[labels] + sigma * rng.normal(size=(num_samples, tokens, token_dim))
        # keep the split balanced: first 80% (floored) of each class in draw order
        train_idx, val_idx = [], []
        for c in range(num_classes):
            idx = np.flatnonzero(labels == c)
            k = int(0.8 * len(idx))
            train_idx.append(idx[:k])
            val_idx.append(idx[k:])
        tr = np.sort(np.concatenate(train_idx))
        va = np.sort(np.concatenate(val_idx))
        return cls(x[tr], labels[tr], x[va], labels[va], protos, seed, sigma)

    def save(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "x_train": qvt.save(out / "x_train.qvt", self.x_train, "f64"),
            "y_train": qvt.save(out / "y_train.qvt", self.y_train, "i64"),
            "x_val": qvt.save(out / "x_val.qvt", self.x_val, "f64"),
            "y_val": qvt.save(out / "y_val.qvt", self.y_val, "i64"),
            "prototypes": qvt.save(out / "prototypes.qvt", self.prototypes, "f64"),
        }
        return paths

    @classmethod
    def load(cls, data_dir, seed: int = -1, sigma: float = float("nan")) -> "SyntheticDataset":
        d = Path(data_dir)
        return cls(qvt.load(d / "x_train.qvt").data, qvt.load(d / "y_train.qvt").data,
                   qvt.load(d / "x_val.qvt").data, qvt.load(d / "y_val.qvt").data,
                   qvt.load(d / "prototypes.qvt").data, seed, sigma)


def minibatches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * step / (total - 1)))
