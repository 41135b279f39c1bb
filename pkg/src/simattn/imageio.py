"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError("truncated header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return out, pos + 1


def decode(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("malformed header numbers") from exc
    if w < 1 or h < 1:
        raise ImageFormatError("image dimensions must be positive")
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported (only 255)")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = buf[pos:]
    if len(raster) < need:
        raise ImageFormatError(f"raster has {len(raster)} bytes, expected {need}")
    pixels = np.frombuffer(raster[:need], dtype=np.uint8).reshape(h, w, channels)
    return pixels.astype(np.float64) / 255.0


def to_bytes(values) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode(image) -> bytes:
    arr = np.asarray(image.data if hasattr(image, "data") and not isinstance(image, np.ndarray) else image,
                     dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected H x W x 1 or H x W x 3, got {arr.shape}")
    h, w, c = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + to_bytes(arr).tobytes()


def read_image(path) -> np.ndarray:
    """Read a P5/P6 file as an H x W x c float array in [0, 1]."""
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_image(image, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(image))


def heatmap(m) -> np.ndarray:
    m = np.asarray(m.data if hasattr(m, "data") and not isinstance(m, np.ndarray) else m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)


def write_heatmap(m, path) -> None:
    """Min-max normalise a 2-d map to [0, 1] and write it as a grayscale PGM."""
    write_image(heatmap(m), path)


def composite(images: list, maps: list) -> np.ndarray:
    """Top row: input images; bottom row: their heatmaps (grayscale, side by side)."""
    gray = [np.asarray(x, dtype=np.float64).mean(axis=2) for x in images]
    heat = [heatmap(m) for m in maps]
    return np.vstack([np.hstack(gray), np.hstack(heat)])
