"""Metric-learning objectives and the combined training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    arch: str = "triplet"
    margin: float = 0.5
    contrastive_margin: float = 1.0
    quad_margins: tuple = (0.5, 0.25)
    gamma: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "quad_margins", tuple(float(m) for m in self.quad_margins))
        if self.arch not in ("siamese", "triplet", "quadruplet"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.margin <= 0 or self.contrastive_margin <= 0 or min(self.quad_margins) <= 0:
            raise ValueError("margins must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def _rows(*fs):
    fs = [ad.as_tensor(f) for f in fs]
    if len({f.shape for f in fs}) != 1:
        raise ShapeError("embedding batches differ in shape")
    fs = [ad.reshape(f, (1,) + f.shape) if f.ndim == 1 else f for f in fs]
    if fs[0].shape[0] < 1:
        raise ValueError("loss needs at least one tuple")
    return fs


def distance(a, b) -> Tensor:
    return ad.euclidean_norm(ad.sub(a, b))


def triplet_loss(fa, fp, fn, margin: float = 0.5) -> Tensor:
    """Mean over K triplets of max(d(a,p) - d(a,n) + margin, 0)."""
    fa, fp, fn = _rows(fa, fp, fn)
    return ad.mean(ad.relu(ad.add(ad.sub(distance(fa, fp), distance(fa, fn)), margin)))


def contrastive_loss(f1, f2, same_class, margin: float = 1.0) -> Tensor:
    """Mean of y d^2 + (1 - y) max(margin - d, 0)^2 with y = 1 for same-class pairs."""
    f1, f2 = _rows(f1, f2)
    y = np.asarray(same_class, dtype=np.float64).reshape(-1)
    if y.size != f1.shape[0]:
        raise ShapeError("one same_class flag per pair is required")
    diff = ad.sub(f1, f2)
    d2 = ad.sum_(ad.mul(diff, diff), axis=-1)
    gap = ad.relu(ad.sub(margin, ad.euclidean_norm(diff)))
    return ad.mean(ad.add(ad.mul(d2, y), ad.mul(ad.mul(gap, gap), 1.0 - y)))


def quadruplet_loss(fa, fp, fn1, fn2, margins=(0.5, 0.25)) -> Tensor:
    """Mean of max(d_ap - d_an1 + a1, 0) + max(d_ap - d_n1n2 + a2, 0)."""
    fa, fp, fn1, fn2 = _rows(fa, fp, fn1, fn2)
    a1, a2 = margins
    d_ap = distance(fa, fp)
    first = ad.relu(ad.add(ad.sub(d_ap, distance(fa, fn1)), a1))
    second = ad.relu(ad.add(ad.sub(d_ap, distance(fn1, fn2)), a2))
    return ad.mean(ad.add(first, second))


def metric_loss(cfg: LossConfig, embeddings: list, same_class=None) -> Tensor:
    if cfg.arch == "triplet":
        return triplet_loss(*embeddings, margin=cfg.margin)
    if cfg.arch == "quadruplet":
        return quadruplet_loss(*embeddings, margins=cfg.quad_margins)
    return contrastive_loss(*embeddings, same_class, margin=cfg.contrastive_margin)


def total_loss(l_ml, l_sm, gamma: float) -> Tensor:
    return ad.add(l_ml, ad.mul(l_sm, float(gamma)))
