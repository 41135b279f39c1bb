"""Similarity attention: weight vectors, sample scores and gradient attention maps.

Weights are built from elementwise embedding differences. For a triplet,
``w = (1 - |fa - fp|) * |fa - fn|``; sample scores are ``s = w . f`` and each
image's map is ``relu(sum_k alpha_k A_k)`` with ``alpha_k`` the spatial mean
of ``ds/dA_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError, ShapeError, Tensor
from .encoder import ModelParams, forward

ARCH_ARITY = {"siamese": 2, "triplet": 3, "quadruplet": 4}
ROLE_NAMES = {
    "siamese": ("1", "2"),
    "triplet": ("a", "p", "n"),
    "quadruplet": ("a", "p", "n1", "n2"),
}


@dataclass
class WeightVector:
    values: Tensor
    parts: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


@dataclass
class AttentionMap:
    values: Tensor
    channel_weights: Tensor
    source_score: str = ""
    score: float | None = None
    # raw maps feed the mining path; min-max scaling is applied only by display()
    normalization: str = "none (display() min-max scales to [0, 1])"

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def display(self) -> np.ndarray:
        return minmax_array(self.values.data)


def minmax_array(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _same_dims(*fs):
    shapes = {f.shape for f in fs}
    if len(shapes) != 1:
        raise ShapeError(f"embedding dims differ: {sorted(shapes)}")


def _detach_all(fs):
    return [f.detach() for f in fs]


def pair_weight(f1, f2, same_class, detach: bool = False) -> WeightVector:
    """1 - |f1 - f2| for same-class pairs, |f1 - f2| otherwise.

    ``same_class`` may be a bool or, for batched (B, d) inputs, a length-B array.
    """
    f1, f2 = ad.as_tensor(f1), ad.as_tensor(f2)
    _same_dims(f1, f2)
    if detach:
        f1, f2 = _detach_all((f1, f2))
    diff = ad.abs_(ad.sub(f1, f2))
    same = np.asarray(same_class, dtype=np.float64)
    if same.ndim:
        same = same.reshape(same.shape + (1,) * (f1.ndim - same.ndim))
    close = ad.sub(1.0, diff)
    w = ad.add(ad.mul(close, same), ad.mul(diff, 1.0 - same))
    return WeightVector(w, {"diff": diff})


def triplet_weight(fa, fp, fn, detach: bool = False) -> WeightVector:
    fa, fp, fn = (ad.as_tensor(f) for f in (fa, fp, fn))
    _same_dims(fa, fp, fn)
    if detach:
        fa, fp, fn = _detach_all((fa, fp, fn))
    wp = ad.sub(1.0, ad.abs_(ad.sub(fa, fp)))
    wn = ad.abs_(ad.sub(fa, fn))
    return WeightVector(ad.mul(wp, wn), {"wp": wp, "wn": wn})


def quadruplet_weight(fa, fp, fn1, fn2, detach: bool = False) -> WeightVector:
    fa, fp, fn1, fn2 = (ad.as_tensor(f) for f in (fa, fp, fn1, fn2))
    _same_dims(fa, fp, fn1, fn2)
    if detach:
        fa, fp, fn1, fn2 = _detach_all((fa, fp, fn1, fn2))
    w1 = ad.sub(1.0, ad.abs_(ad.sub(fa, fp)))
    w2 = ad.abs_(ad.sub(fa, fn1))
    w3 = ad.abs_(ad.sub(fa, fn2))
    return WeightVector(ad.mul(ad.mul(w1, w2), w3), {"w1": w1, "w2": w2, "w3": w3})


def tuple_weight(arch: str, embeddings: list, same_class=None, detach: bool = False) -> WeightVector:
    if arch not in ARCH_ARITY:
        raise ValueError(f"unknown arch {arch!r}")
    if len(embeddings) != ARCH_ARITY[arch]:
        raise ValueError(f"{arch} needs {ARCH_ARITY[arch]} embeddings, got {len(embeddings)}")
    if arch == "siamese":
        if same_class is None:
            raise ValueError("siamese weights need same_class")
        return pair_weight(*embeddings, same_class, detach=detach)
    if arch == "triplet":
        return triplet_weight(*embeddings, detach=detach)
    return quadruplet_weight(*embeddings, detach=detach)


def sample_score(w, f) -> Tensor:
    """s = w . f (batched along the last axis)."""
    w = w.values if isinstance(w, WeightVector) else ad.as_tensor(w)
    return ad.dot(w, f)


def attention_from_gradient(grad_a: Tensor, feature_map: Tensor) -> tuple:
    """relu(sum_k alpha_k A_k) with alpha = spatial mean of ``grad_a``.

    Works on (m, n, c) or batched (B, m, n, c) maps; returns (M, alpha).
    """
    alpha = ad.global_average_pool(grad_a)
    spatial = alpha.shape[:-1] + (1, 1, alpha.shape[-1])
    weighted = ad.mul(feature_map, ad.reshape(alpha, spatial))
    return ad.relu(ad.sum_(weighted, axis=-1)), alpha


def attention_map(score: Tensor, feature_map: Tensor, create_graph: bool = False,
                  source: str = "") -> AttentionMap:
    """Gradient attention of ``score`` over ``feature_map``.

    A score that does not depend on the map yields alpha = 0 and an all-zero map.
    """
    if not score.requires_grad or not feature_map.requires_grad:
        raise GraphError("score is not connected to the feature map")
    try:
        (g,) = ad.grad(score, [feature_map], create_graph=create_graph)
    except GraphError as exc:
        raise GraphError("score is not connected to the feature map") from exc
    m, alpha = attention_from_gradient(g, feature_map)
    return AttentionMap(m, alpha, source)


def attention_with_alpha(feature_map, alpha) -> Tensor:
    """Attention map for externally supplied channel weights."""
    feature_map, alpha = ad.as_tensor(feature_map), ad.as_tensor(alpha)
    spatial = alpha.shape[:-1] + (1, 1, alpha.shape[-1])
    return ad.relu(ad.sum_(ad.mul(feature_map, ad.reshape(alpha, spatial)), axis=-1))


def upsample_bilinear(m, height: int, width: int) -> Tensor:
    values = m.values if isinstance(m, AttentionMap) else m
    return ad.upsample_bilinear(values, height, width)


@dataclass
class TupleAttention:
    """Batched attention for B tuples of one architecture.

    ``maps[r]`` is (B, m, n) for role r; ``embeddings[r]`` is (B, d).
    """

    arch: str
    maps: list
    alphas: list
    scores: list
    embeddings: list
    feature_maps: Tensor
    weights: WeightVector


def tuple_attention(params: ModelParams, roles: list, arch: str, same_class=None,
                    detach_weights: bool = False, create_graph: bool = False,
                    encoded: tuple | None = None) -> TupleAttention:
    """Encode role-stacked images and compute one attention map per image.

    ``roles`` is a list (one entry per tuple position) of (B, H, W, c) arrays.
    ``encoded`` may pass an existing (A, f) for the role-major concatenation to
    avoid a second forward pass.
    """
    if arch not in ARCH_ARITY:
        raise ValueError(f"unknown arch {arch!r}")
    r = ARCH_ARITY[arch]
    if len(roles) != r:
        raise ValueError(f"{arch} needs {r} images per tuple, got {len(roles)}")
    if encoded is None:
        stacked = ad.concat([ad.as_tensor(x) for x in roles])
        if not create_graph:
            # attention needs dScore/dA even when parameters are frozen
            stacked = Tensor(stacked.data, requires_grad=True)
        feature_maps, f_all = forward(params, stacked)
    else:
        feature_maps, f_all = encoded
    b = feature_maps.shape[0] // r
    fs = [ad.take(f_all, np.arange(i * b, (i + 1) * b)) for i in range(r)]
    w = tuple_weight(arch, fs, same_class=same_class, detach=detach_weights)
    scores = [sample_score(w, f) for f in fs]
    maps, alphas = [], []
    for i, s in enumerate(scores):
        (g,) = ad.grad(ad.sum_(s), [feature_maps], create_graph=create_graph, allow_unused=True)
        rows = np.arange(i * b, (i + 1) * b)
        m, alpha = attention_from_gradient(ad.take(g, rows), ad.take(feature_maps, rows))
        maps.append(m)
        alphas.append(alpha)
    return TupleAttention(arch, maps, alphas, scores, fs, feature_maps, w)


def explain(params: ModelParams, images, arch: str, same_class=None,
            detach_weights: bool = False) -> list:
    """One AttentionMap per image of a single siamese/triplet/quadruplet tuple."""
    if arch not in ARCH_ARITY:
        raise ValueError(f"unknown arch {arch!r}")
    if len(images) != ARCH_ARITY[arch]:
        raise ValueError(f"{arch} needs {ARCH_ARITY[arch]} images, got {len(images)}")
    if arch == "siamese" and same_class is None:
        raise ValueError("siamese explanations need same_class")
    roles = [np.asarray(ad.as_tensor(x).data)[None] for x in images]
    ta = tuple_attention(params, roles, arch, same_class=same_class, detach_weights=detach_weights)
    out = []
    for name, m, alpha, s in zip(ROLE_NAMES[arch], ta.maps, ta.alphas, ta.scores):
        out.append(AttentionMap(
            ad.reshape(m, m.shape[1:]).detach(),
            ad.reshape(alpha, alpha.shape[1:]).detach(),
            f"s^{name}",
            float(s.data[0]),
        ))
    return out
