"""Pairwise comparison meta-learning and the alternative pairwise losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .numcore import Tensor

PAIRWISE_LOSSES = ("relation", "siamese", "triplet", "none")


@dataclass
class MetaTask:
    anchor: int
    train_indices: List[int]
    targets: np.ndarray  # 1 where the partner shares the anchor's class

    @property
    def P(self) -> int:
        return len(self.train_indices)


def build_meta_task(batch_labels: Sequence[int], P: int, rng: np.random.Generator) -> MetaTask:
    """Random anchor plus P distinct partners drawn from the rest of the batch."""
    labels = np.asarray(batch_labels)
    if P < 1:
        raise ValueError(f"task size P must be >= 1, got {P}")
    if len(labels) < P + 1:
        raise ValueError(f"batch of {len(labels)} too small for a task with P={P}")
    anchor = int(rng.integers(len(labels)))
    rest = np.delete(np.arange(len(labels)), anchor)
    partners = [int(i) for i in rng.choice(rest, size=P, replace=False)]
    targets = (labels[partners] == labels[anchor]).astype(np.float64)
    return MetaTask(anchor, partners, targets)


def pair_concat(fa: Tensor, fj: Tensor) -> Tensor:
    """Depth-wise concatenation C(f(x_a), f(x_j)) of (N, C, h, w) maps."""
    if fa.shape != fj.shape:
        raise nc.ShapeError(f"pair maps differ: {fa.shape} vs {fj.shape}")
    return nc.concat([fa, fj], axis=1)


class ComparisonNet(nc.Module):
    """g: two conv3x3+BN+ReLU blocks, FC(8), FC(2), softmax; r is the 'same class' probability."""

    def __init__(self, in_channels: int, map_hw: int, rng: np.random.Generator,
                 channels: Tuple[int, int] = (512, 128), hidden: int = 8, init_std: float = 0.01,
                 dtype="float64", init: str = "gaussian"):
        super().__init__()
        dt = np.dtype(dtype)
        c1, c2 = channels
        self.in_channels = in_channels
        self.blocks = nc.Sequential([
            nc.Conv2d(in_channels, c1, rng, init=init, std=init_std, dtype=dt), nc.BatchNorm(c1, dtype=dt), nc.ReLU(),
            nc.Conv2d(c1, c2, rng, init=init, std=init_std, dtype=dt), nc.BatchNorm(c2, dtype=dt), nc.ReLU(),
            nc.Flatten(),
        ])
        self.fc1 = nc.Linear(c2 * map_hw * map_hw, hidden, rng, init=init, std=init_std, dtype=dt)
        self.fc2 = nc.Linear(hidden, 2, rng, init=init, std=init_std, dtype=dt)

    def forward(self, pair: Tensor) -> Tensor:
        logits = self.fc2(self.fc1(self.blocks(pair)).relu())
        return nc.softmax(logits, axis=-1)[:, 1]


def compare(g: ComparisonNet, pair: Tensor) -> Tensor:
    return g(pair)


def task_pairs(feature_maps: Tensor, task: MetaTask) -> Tensor:
    """Stack C(f(x_a), f(x_j)) for every partner j of the task: (P, 2*depth, h, w)."""
    anchor = feature_maps[[task.anchor] * task.P]
    partners = feature_maps[task.train_indices]
    return pair_concat(anchor, partners)


def loss_ml(task: MetaTask, scores: Tensor, eps: float = 1e-7) -> Tensor:
    """Per-pair binary cross-entropy averaged over the P pairs."""
    if scores.shape != (task.P,):
        raise nc.ShapeError(f"expected {task.P} scores, got shape {scores.shape}")
    return nc.binary_cross_entropy(scores, task.targets, eps)


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).sum(axis=-1)


def _dist(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    return (_sq_dist(a, b) + eps).sqrt()


def loss_contrastive(fa: Tensor, fj: Tensor, y, margin: float = 1.0) -> Tensor:
    """y d^2 + (1-y) max(0, margin - d)^2, averaged over rows."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    y = np.asarray(y, dtype=fa.dtype)
    d2 = _sq_dist(fa, fj)
    d = (d2 + 1e-12).sqrt()
    hinge = (margin - d).relu()
    return (d2 * y + hinge * hinge * (1.0 - y)).mean()


def loss_triplet(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """max(0, d(a,p) - d(a,n) + margin), averaged over rows."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    return (_dist(anchor, positive) - _dist(anchor, negative) + margin).relu().mean()


def pairwise_loss(kind: str, g: Optional[ComparisonNet], feature_maps: Tensor, features: Tensor,
                  task: MetaTask, margin: float = 1.0) -> Optional[Tensor]:
    """Loss of the configured pairwise variant; ``None`` when it is undefined for this task."""
    if kind == "relation":
        return loss_ml(task, g(task_pairs(feature_maps, task)))
    if kind == "siamese":
        fa = features[[task.anchor] * task.P]
        return loss_contrastive(fa, features[task.train_indices], task.targets, margin)
    if kind == "triplet":
        pos = [j for j, y in zip(task.train_indices, task.targets) if y == 1]
        neg = [j for j, y in zip(task.train_indices, task.targets) if y == 0]
        if not pos or not neg:
            return None
        n = min(len(pos), len(neg))
        a = features[[task.anchor] * n]
        return loss_triplet(a, features[pos[:n]], features[neg[:n]], margin)
    if kind == "none":
        return None
    raise ValueError(f"unknown pairwise loss '{kind}' (choose from {PAIRWISE_LOSSES})")
