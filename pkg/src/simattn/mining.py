"""Similarity mining: erase attended regions and penalise what the model can still tell apart."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import ARCH_ARITY, tuple_attention
from .autodiff import ShapeError, Tensor
from .encoder import ModelParams, forward


@dataclass(frozen=True)
class MaskingConfig:
    alpha_slope: float = 10.0
    beta_threshold: float = 0.5
    normalize_before_mask: bool = True
    detach_attention: bool = False
    detach_weights: bool = False

    def __post_init__(self):
        if not self.alpha_slope > 0:
            raise ValueError("alpha_slope must be positive")
        if not 0 < self.beta_threshold < 1:
            raise ValueError("beta_threshold must lie in (0, 1)")


def minmax_normalize(m) -> Tensor:
    """Per-map min-max scaling of (H, W) or (B, H, W) maps; constant maps become zeros."""
    m = ad.as_tensor(m)
    axes = (-2, -1)
    lo = ad.amin(m, axis=axes, keepdims=True)
    hi = ad.amax(m, axis=axes, keepdims=True)
    span = ad.sub(hi, lo)
    flat = (span.data <= 0).astype(np.float64)
    # constant maps: numerator is exactly 0, denominator is lifted to 1
    return ad.div(ad.sub(m, lo), ad.add(span, flat))


def soft_mask(image, m_up, cfg: MaskingConfig = MaskingConfig()) -> Tensor:
    """x * (1 - sigmoid(alpha * (M - beta))) with the mask broadcast over channels."""
    image, m_up = ad.as_tensor(image), ad.as_tensor(m_up)
    if image.shape[:-1] != m_up.shape:
        raise ShapeError(f"image {image.shape} and map {m_up.shape} spatial shapes differ")
    if cfg.detach_attention:
        m_up = m_up.detach()
    z = minmax_normalize(m_up) if cfg.normalize_before_mask else m_up
    gate = ad.sigmoid(ad.mul(ad.sub(z, cfg.beta_threshold), cfg.alpha_slope))
    keep = ad.sub(1.0, gate)
    return ad.mul(image, ad.reshape(keep, keep.shape + (1,)))


def _dims(*fs):
    fs = [ad.as_tensor(f) for f in fs]
    if len({f.shape for f in fs}) != 1:
        raise ShapeError("embedding dims differ")
    return fs


def _reduce(per_tuple: Tensor) -> Tensor:
    return ad.mean(per_tuple) if per_tuple.ndim else per_tuple


def triplet_terms(fa, fp, fn) -> Tensor:
    fa, fp, fn = _dims(fa, fp, fn)
    d_ap = ad.euclidean_norm(ad.sub(fa, fp))
    d_an = ad.euclidean_norm(ad.sub(fa, fn))
    return ad.abs_(ad.sub(d_ap, d_an))


def mining_loss_triplet(fa, fp, fn) -> Tensor:
    """| ||fa - fp|| - ||fa - fn|| | (mean over rows for batched input)."""
    return _reduce(triplet_terms(fa, fp, fn))


def mining_loss_pair(f1, f2) -> Tensor:
    """-||f1 - f2||: minimised by pushing the masked pair apart."""
    f1, f2 = _dims(f1, f2)
    return _reduce(ad.neg(ad.euclidean_norm(ad.sub(f1, f2))))


def mining_loss_quadruplet(fa, fp, fn1, fn2) -> Tensor:
    """Triplet mining loss on (a, p, n1) plus on (a, p, n2)."""
    fa, fp, fn1, fn2 = _dims(fa, fp, fn1, fn2)
    return _reduce(ad.add(triplet_terms(fa, fp, fn1), triplet_terms(fa, fp, fn2)))


def mining_loss(arch: str, masked: list, same_class=None) -> Tensor:
    if arch == "triplet":
        return mining_loss_triplet(*masked)
    if arch == "quadruplet":
        return mining_loss_quadruplet(*masked)
    if arch == "siamese":
        f1, f2 = _dims(*masked)
        if same_class is None or f1.ndim == 1:
            return mining_loss_pair(f1, f2)
        # batched training: only same-class pairs are mined
        same = np.asarray(same_class, dtype=np.float64)
        if not same.any():
            return Tensor(0.0)
        per_pair = ad.neg(ad.euclidean_norm(ad.sub(f1, f2)))
        return ad.div(ad.sum_(ad.mul(per_pair, same)), float(same.sum()))
    raise ValueError(f"unknown arch {arch!r}")


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def mining_forward(params: ModelParams, tuple_images, arch: str, cfg: MaskingConfig = MaskingConfig(),
                   same_class=None, encoded: tuple | None = None) -> Tensor:
    """Attention -> upsample -> soft-mask -> re-encode -> mining loss.

    ``tuple_images`` holds one image (H, W, c) or batch (B, H, W, c) per tuple
    role. Unless ``cfg.detach_attention`` is set, the result is differentiable
    through the attention maps themselves (second order).
    """
    if arch not in ARCH_ARITY:
        raise ValueError(f"unknown arch {arch!r}")
    if len(tuple_images) != ARCH_ARITY[arch]:
        raise ValueError(f"{arch} needs {ARCH_ARITY[arch]} images per tuple, got {len(tuple_images)}")
    if arch == "siamese" and same_class is None:
        raise ValueError("siamese mining needs same_class")
    roles = [_as_batch(x) for x in tuple_images]
    ta = tuple_attention(params, roles, arch, same_class=same_class, detach_weights=cfg.detach_weights,
                         create_graph=not cfg.detach_attention, encoded=encoded)
    h, w = roles[0].shape[1:3]
    masked = []
    for x, m in zip(roles, ta.maps):
        m_up = ad.upsample_bilinear(m.detach() if cfg.detach_attention else m, h, w)
        masked.append(soft_mask(x, m_up, cfg))
    _, f_star = forward(params, ad.concat(masked))
    b = roles[0].shape[0]
    fs = [ad.take(f_star, np.arange(i * b, (i + 1) * b)) for i in range(len(roles))]
    return mining_loss(arch, fs, same_class=same_class)
