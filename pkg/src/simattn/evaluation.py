"""Retrieval and attention-quality metrics, and attention-driven segmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .attention import tuple_attention
from .data import stack_images
from .encoder import ModelParams, forward


@dataclass
class RetrievalReport:
    recall_at: dict
    n_queries: int

    def to_json_dict(self) -> dict:
        return {"recall_at": {str(k): v for k, v in sorted(self.recall_at.items())}, "n_queries": self.n_queries}


@dataclass
class AttentionReport:
    mean_iou: float
    pointing_accuracy: float
    entries: list = field(default_factory=list)

    def to_json_dict(self, with_entries: bool = False) -> dict:
        d = {"mean_iou": self.mean_iou, "pointing_accuracy": self.pointing_accuracy, "n_records": len(self.entries)}
        if with_entries:
            d["entries"] = self.entries
        return d


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def recall_at_k(embeddings, labels, ks) -> RetrievalReport:
    """Fraction of queries with a same-label item among their K nearest neighbours.

    Each query is excluded from its own neighbour list; distance ties go to the
    lower index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n < 2:
        raise ValueError("recall_at_k needs at least 2 items")
    ks = sorted(int(k) for k in ks)
    if ks[0] < 1 or ks[-1] >= n:
        raise ValueError(f"K must lie in [1, {n - 1}], got {ks}")
    dist = pairwise_distances(x)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, : ks[-1]]
    hits = labels[order] == labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), n)
    return RetrievalReport({k: float(np.mean(first_hit < k)) for k in ks}, n)


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def binarize(m_up, threshold_frac: float) -> np.ndarray:
    m = np.asarray(m_up, dtype=np.float64)
    peak = m.max()
    if peak <= 0:
        return np.zeros(m.shape, dtype=bool)
    return m >= threshold_frac * peak


def mask_iou(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_same(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


def attention_iou(m_up, gt_mask, threshold_frac: float = 0.5) -> float:
    """IoU between the map binarised at ``threshold_frac * max`` and the ground truth."""
    if not 0 < threshold_frac < 1:
        raise ValueError("threshold_frac must lie in (0, 1)")
    m_up = np.asarray(m_up)
    _check_same(m_up, np.asarray(gt_mask))
    return mask_iou(binarize(m_up, threshold_frac), gt_mask)


def pointing_game(m_up, gt_mask) -> bool:
    m_up, gt = np.asarray(m_up), np.asarray(gt_mask, dtype=bool)
    _check_same(m_up, gt)
    return bool(gt.reshape(-1)[int(np.argmax(m_up))])


def largest_component(mask) -> np.ndarray:
    """Largest 4-connected component; ties keep the one met first in raster order."""
    mask = np.asarray(mask, dtype=bool)
    labelled, count = ndimage.label(mask)
    if count == 0:
        return mask.copy()
    sizes = np.bincount(labelled.reshape(-1))[1:]
    return labelled == (int(np.argmax(sizes)) + 1)


def extract_segmentation_mask(m_up, image=None, threshold_frac: float = 0.5) -> np.ndarray:
    """Threshold the attention map and keep its largest connected blob.

    ``image`` is accepted for interface compatibility with image-aware
    refiners; this extractor uses the attention alone.
    """
    m_up = np.asarray(m_up, dtype=np.float64)
    if image is not None and np.asarray(image).shape[:2] != m_up.shape:
        raise ValueError("image and attention spatial shapes differ")
    return largest_component(binarize(m_up, threshold_frac))


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------

def embed_records(params: ModelParams, records: list, batch: int = 64) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(records), batch):
            x = stack_images(records, range(start, min(start + batch, len(records))))
            out.append(forward(params, x)[1].data)
    return np.concatenate(out)


def evaluate_retrieval(params: ModelParams, records: list, ks=(1, 2, 4)) -> RetrievalReport:
    emb = embed_records(params, records)
    return recall_at_k(emb, [r.label for r in records], ks)


def evaluation_triplets(records: list, seed: int = 0) -> np.ndarray:
    """One (anchor, positive, negative) per record, drawn reproducibly."""
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.array([r.label for r in records])
    rows = []
    for i, lab in enumerate(labels):
        same = np.flatnonzero((labels == lab) & (np.arange(len(labels)) != i))
        diff = np.flatnonzero(labels != lab)
        if len(same) == 0 or len(diff) == 0:
            raise ValueError("every class needs >= 2 records and >= 2 classes must exist")
        rows.append((i, int(rng.choice(same)), int(rng.choice(diff))))
    return np.array(rows)


def upsampled_attention(params: ModelParams, records: list, triplets: np.ndarray, batch: int = 32) -> np.ndarray:
    """Anchor attention maps (upsampled to image size) for index triplets."""
    hw = records[0].image.shape[:2]
    maps = []
    for start in range(0, len(triplets), batch):
        rows = triplets[start : start + batch]
        roles = [stack_images(records, rows[:, r]) for r in range(3)]
        ta = tuple_attention(params, roles, "triplet")
        with ad.no_grad():
            maps.append(ad.upsample_bilinear(ta.maps[0], *hw).data)
    return np.concatenate(maps)


def evaluate_attention(params: ModelParams, records: list, threshold_frac: float = 0.5,
                       seed: int = 0) -> AttentionReport:
    """Mean IoU and pointing accuracy of anchor attention against ground-truth masks."""
    if any(r.gt_mask is None for r in records):
        raise ValueError("attention evaluation needs records with ground-truth masks")
    triplets = evaluation_triplets(records, seed)
    maps = upsampled_attention(params, records, triplets)
    entries = []
    for (i, p, n), m in zip(triplets, maps):
        gt = records[i].gt_mask
        entries.append({"id": records[i].id, "positive": records[p].id, "negative": records[n].id,
                        "iou": attention_iou(m, gt, threshold_frac), "pointing": pointing_game(m, gt)})
    return AttentionReport(
        float(np.mean([e["iou"] for e in entries])),
        float(np.mean([e["pointing"] for e in entries])),
        entries,
    )


def segment(params: ModelParams, query, support, negative=None, threshold_frac: float = 0.5,
            same_class: bool = True) -> tuple:
    """Query mask from its attention against a support (and optional negative) image.

    With a negative support the triplet (query, support, negative) is used;
    otherwise a same-class siamese pair. Returns (mask, upsampled attention).
    """
    query = np.asarray(query, dtype=np.float64)
    if negative is None:
        roles, arch = [query[None], np.asarray(support)[None]], "siamese"
    else:
        roles, arch = [query[None], np.asarray(support)[None], np.asarray(negative)[None]], "triplet"
    ta = tuple_attention(params, roles, arch, same_class=same_class if arch == "siamese" else None)
    with ad.no_grad():
        m_up = ad.upsample_bilinear(ta.maps[0], *query.shape[:2]).data[0]
    return extract_segmentation_mask(m_up, query, threshold_frac), m_up


def report_dict(report) -> dict:
    return asdict(report)
