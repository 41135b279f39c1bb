"""Datasets: synthetic shapes with ground-truth masks, IDX ingestion, tuple sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "star", "ring", "bar", "diamond")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class DatasetRecord:
    image: np.ndarray
    label: int
    gt_mask: np.ndarray | None
    id: int


@dataclass
class TupleSet:
    """Index tuples into a dataset, one column per role."""

    arch: str
    indices: np.ndarray
    same_class: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.indices)


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rho = np.hypot(u, v)
    if kind == "circle":
        return rho <= 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.85
    if kind == "triangle":
        return (v >= -0.9) & (v <= 0.8) & (np.abs(u) <= (v + 0.9) / 1.7 * 0.95)
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "star":
        theta = np.arctan2(v, u)
        return rho <= 0.55 + 0.4 * np.cos(5 * theta)
    if kind == "ring":
        return (rho <= 1.0) & (rho >= 0.55)
    if kind == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.3)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ValueError(f"unknown shape {kind!r}")


def render_shape(kind: str, hw: int, rng: np.random.Generator, channels: int = 1,
                 min_frac: float = 0.02, max_frac: float = 0.5) -> tuple:
    """Draw one shape over a noisy background; returns (image, mask)."""
    ys, xs = np.mgrid[0:hw, 0:hw] + 0.5
    for _ in range(100):
        r = rng.uniform(0.18, 0.38) * hw
        cx, cy = rng.uniform(r, hw - r, size=2)
        mask = _shape_mask(kind, (xs - cx) / r, (ys - cy) / r)
        frac = mask.mean()
        if min_frac <= frac <= max_frac:
            break
    else:
        raise RuntimeError(f"could not render {kind} within the foreground bounds")
    background = rng.uniform(0.0, 0.3, size=(hw, hw, channels))
    tone = rng.uniform(0.6, 1.0, size=channels)
    foreground = np.clip(tone + rng.normal(0.0, 0.05, size=(hw, hw, channels)), 0.0, 1.0)
    image = np.where(mask[..., None], foreground, background)
    return image, mask.astype(np.uint8)


def generate_synthetic(n_classes: int, per_class: int, hw: int = 64, seed: int = 0,
                       channels: int = 1) -> list:
    """Label-major list of shape images, one shape type per class."""
    if not 2 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPES)}]")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for label in range(n_classes):
        for _ in range(per_class):
            image, mask = render_shape(SHAPES[label], hw, rng, channels)
            records.append(DatasetRecord(image, label, mask, len(records)))
    return records


def _read_header(buf: bytes, offset: int, count: int) -> tuple:
    end = offset + 4 * count
    if len(buf) < end:
        raise IDXFormatError("file too short for its header")
    return struct.unpack(">" + "I" * count, buf[offset:end]), end


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic,), pos = _read_header(buf, 0, 1)
    if magic != IDX_IMAGES_MAGIC:
        raise IDXFormatError(f"bad image magic 0x{magic:08x}")
    (n, rows, cols), pos = _read_header(buf, pos, 3)
    need = n * rows * cols
    if len(buf) - pos != need:
        raise IDXFormatError(f"image payload has {len(buf) - pos} bytes, expected {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic,), pos = _read_header(buf, 0, 1)
    if magic != IDX_LABELS_MAGIC:
        raise IDXFormatError(f"bad label magic 0x{magic:08x}")
    (n,), pos = _read_header(buf, pos, 1)
    if len(buf) - pos != n:
        raise IDXFormatError(f"label payload has {len(buf) - pos} bytes, expected {n}")
    return np.frombuffer(buf, dtype=np.uint8, offset=pos)


def load_idx(images_path, labels_path) -> list:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    return [
        DatasetRecord(img[..., None].astype(np.float64) / 255.0, int(lab), None, i)
        for i, (img, lab) in enumerate(zip(images, labels))
    ]


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images (n, rows, cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def save_dataset(records: list, path) -> None:
    """Store records as an .npz with images, labels and (when all present) masks."""
    arrays = {
        "images": np.stack([r.image for r in records]),
        "labels": np.array([r.label for r in records], dtype=np.int64),
        "ids": np.array([r.id for r in records], dtype=np.int64),
    }
    if all(r.gt_mask is not None for r in records):
        arrays["masks"] = np.stack([r.gt_mask for r in records]).astype(np.uint8)
    np.savez(path, **arrays)


def load_dataset(path) -> list:
    with np.load(path) as z:
        images, labels = z["images"], z["labels"]
        ids = z["ids"] if "ids" in z else np.arange(len(labels))
        masks = z["masks"] if "masks" in z else None
    return [
        DatasetRecord(images[i].astype(np.float64), int(labels[i]),
                      None if masks is None else masks[i], int(ids[i]))
        for i in range(len(labels))
    ]


def stack_images(records: list, indices) -> np.ndarray:
    return np.stack([records[i].image for i in indices])


def _class_index(records: list) -> dict:
    by_label = {}
    for i, r in enumerate(records):
        by_label.setdefault(r.label, []).append(i)
    return {k: np.array(v) for k, v in sorted(by_label.items())}


def sample_tuples(records: list, arch: str, batch_tuples: int, rng: np.random.Generator) -> TupleSet:
    """Uniform online sampling of label-consistent tuples (no hard mining)."""
    by_label = _class_index(records)
    labels = list(by_label)
    small = [k for k, v in by_label.items() if len(v) < 2]
    if small:
        raise ValueError(f"classes {small} have fewer than 2 records")
    need = {"siamese": 2, "triplet": 2, "quadruplet": 3}.get(arch)
    if need is None:
        raise ValueError(f"unknown arch {arch!r}")
    if len(labels) < need:
        raise ValueError(f"{arch} sampling needs at least {need} classes, got {len(labels)}")

    def pair_from(label):
        a, p = rng.choice(by_label[label], size=2, replace=False)
        return int(a), int(p)

    def other(exclude):
        choices = [k for k in labels if k not in exclude]
        return choices[rng.integers(len(choices))]

    def one_of(label):
        pool = by_label[label]
        return int(pool[rng.integers(len(pool))])

    rows, same = [], []
    for _ in range(batch_tuples):
        anchor_label = labels[rng.integers(len(labels))]
        if arch == "siamese":
            positive = bool(rng.integers(2))
            if positive:
                rows.append(pair_from(anchor_label))
            else:
                rows.append((one_of(anchor_label), one_of(other({anchor_label}))))
            same.append(positive)
        elif arch == "triplet":
            a, p = pair_from(anchor_label)
            rows.append((a, p, one_of(other({anchor_label}))))
        else:
            a, p = pair_from(anchor_label)
            n1_label = other({anchor_label})
            n2_label = other({anchor_label, n1_label})
            rows.append((a, p, one_of(n1_label), one_of(n2_label)))
    return TupleSet(arch, np.array(rows, dtype=np.int64), np.array(same, dtype=bool) if same else None)
