"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SAMCKPT1"
    u32 version
    u32 n, n bytes        EncoderConfig as compact sorted-key JSON
    u32 count, tensor*    model parameters
    optimizer block       u32 n + kind, u64 step, 4 x f64 (lr, beta1, beta2, eps),
                          u32 count + tensor* (first moments), u32 count + tensor* (second)
    rng block             16-byte state, 16-byte increment, u8 has_uint32, u32 uinteger
    u32 epoch

    tensor := u32 name_len, name (utf-8), u32 ndim, u32 * ndim dims, f64 * prod(dims)

The RNG block stores a numpy PCG64 bit generator.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .encoder import EncoderConfig, ModelParams
from .optim import OptimizerState

MAGIC = b"SAMCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    params: ModelParams
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    rng_state: dict | None = None
    epoch: int = 0
    version: int = VERSION


def _write_tensor(out, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)
    out.write(struct.pack("<I", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_tensors(out, items) -> None:
    items = list(items)
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        _write_tensor(out, name, arr)


def _write_rng(out, state: dict | None) -> None:
    if state is None:
        state = np.random.PCG64(0).state
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError("only PCG64 generator state can be stored")
    inner = state["state"]
    out.write(int(inner["state"]).to_bytes(16, "little"))
    out.write(int(inner["inc"]).to_bytes(16, "little"))
    out.write(struct.pack("<BI", int(state["has_uint32"]), int(state["uinteger"])))


def dumps(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", ckpt.version))
    cfg = json.dumps(ckpt.encoder_config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    _write_tensors(out, ((n, t.data) for n, t in ckpt.params.items()))
    opt = ckpt.optimizer
    kind = opt.kind.encode()
    out.write(struct.pack("<I", len(kind)))
    out.write(kind)
    out.write(struct.pack("<Q4d", opt.step, opt.learning_rate, opt.beta1, opt.beta2, opt.eps))
    _write_tensors(out, opt.m.items())
    _write_tensors(out, opt.v.items())
    _write_rng(out, ckpt.rng_state)
    out.write(struct.pack("<I", ckpt.epoch))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple:
        (n,) = self.unpack("<I")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<I")
        dims = self.unpack(f"<{ndim}I")
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        return name, arr

    def tensors(self) -> dict:
        (count,) = self.unpack("<I")
        return dict(self.tensor() for _ in range(count))


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version > VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is newer than supported {VERSION}")
    if version < 1:
        raise CheckpointError(f"invalid checkpoint version {version}")
    (n,) = r.unpack("<I")
    config = EncoderConfig.from_dict(json.loads(r.take(n).decode()))
    params = ModelParams(config, {k: Tensor(v, requires_grad=True) for k, v in r.tensors().items()})
    (n,) = r.unpack("<I")
    kind = r.take(n).decode()
    step, lr, b1, b2, eps = r.unpack("<Q4d")
    m, v = r.tensors(), r.tensors()
    optimizer = OptimizerState(kind, lr, b1, b2, eps, step, m, v)
    state = int.from_bytes(r.take(16), "little")
    inc = int.from_bytes(r.take(16), "little")
    has_uint32, uinteger = r.unpack("<BI")
    rng_state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": has_uint32,
        "uinteger": uinteger,
    }
    (epoch,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, optimizer, rng_state, epoch, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
