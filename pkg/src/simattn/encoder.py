"""Small convolutional encoder producing (feature map, unit-norm embedding)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_hw: int = 64
    input_channels: int = 1
    conv_channels: tuple = (8, 16, 32, 32)
    kernel: int = 3
    embed_dim: int = 64
    # index of the conv block whose post-relu output is used for attention; -1 is the last block
    attention_layer: int = -1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ValueError("conv_channels must be a non-empty list of positive ints")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        n = len(self.conv_channels)
        if not -n <= self.attention_layer < n:
            raise ValueError(f"attention_layer must index one of {n} blocks")
        if self.input_hw % (2 ** n):
            raise ValueError(f"input_hw must be divisible by 2**{n}")

    @property
    def attention_block(self) -> int:
        return self.attention_layer % len(self.conv_channels)

    @property
    def attention_shape(self) -> tuple:
        hw = self.input_hw // (2 ** self.attention_block)
        return hw, hw, self.conv_channels[self.attention_block]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Ordered name -> Tensor map plus the config that shapes it."""

    config: EncoderConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list:
        return list(self.tensors)

    def replace(self, tensors: dict) -> "ModelParams":
        return ModelParams(self.config, dict(tensors))

    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())


def param_shapes(config: EncoderConfig) -> dict:
    shapes = {}
    cin = config.input_channels
    for i, cout in enumerate(config.conv_channels):
        shapes[f"conv{i}.weight"] = (config.kernel, config.kernel, cin, cout)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    shapes["fc.weight"] = (cin, config.embed_dim)
    shapes["fc.bias"] = (config.embed_dim,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """He-style uniform init, bound sqrt(6 / fan_in); biases start at zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(values, requires_grad=True)
    return ModelParams(config, tensors)


def _check_images(config: EncoderConfig, x: Tensor):
    expect = (config.input_hw, config.input_hw, config.input_channels)
    if x.shape[1:] != expect:
        raise ShapeError(f"expected images of shape {expect}, got {x.shape[1:]}")


def forward(params: ModelParams, images) -> tuple:
    """Batched forward pass over NHWC images.

    Returns ``(A, f)`` with A of shape (B, m, n, c) taken after the relu of the
    attention block, and f of shape (B, d) with unit rows.
    """
    config = params.config
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    _check_images(config, x)
    pad = config.kernel // 2
    feature_map = None
    for i in range(len(config.conv_channels)):
        x = ad.conv2d(x, params[f"conv{i}.weight"], stride=1, padding=pad, bias=params[f"conv{i}.bias"])
        x = ad.relu(x)
        if i == config.attention_block:
            feature_map = x
        x = ad.max_pool2(x)
    pooled = ad.global_average_pool(x)
    embedding = ad.l2_normalize(ad.add(ad.matmul(pooled, params["fc.weight"]), params["fc.bias"]))
    return feature_map, embedding


def encode(params: ModelParams, image) -> tuple:
    """Encode a single H x W x c image into (feature map m x n x c', embedding d)."""
    image = ad.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"encode expects one H x W x c image, got shape {image.shape}")
    a, f = forward(params, image)
    return ad.reshape(a, a.shape[1:]), ad.reshape(f, f.shape[1:])


def encode_batch(params: ModelParams, images) -> list:
    """Order-preserving per-image ``encode`` computed in one batched pass."""
    x = ad.as_tensor(images) if not isinstance(images, (list, tuple)) else ad.stack(images)
    a, f = forward(params, x)
    out = []
    for i in range(x.shape[0]):
        ai, fi = ad.take(a, [i]), ad.take(f, [i])
        out.append((ad.reshape(ai, ai.shape[1:]), ad.reshape(fi, fi.shape[1:])))
    return out
