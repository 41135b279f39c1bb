"""Flat ``key = value`` config files with ``#`` comments and dotted namespaces.

Example::

    arch = triplet
    encoder.input_hw = 32
    encoder.conv_channels = 8,16,32
    train.epochs = 20
    loss.gamma = 0.25
    mask.alpha_slope = 10
    data.source = synthetic
    data.n_classes = 5
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .data import generate_synthetic, load_dataset, load_idx
from .encoder import EncoderConfig
from .losses import LossConfig
from .mining import MaskingConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


# key -> (section, field, parser)
KEYS = {
    "arch": ("top", "arch", str),
    "encoder.input_hw": ("encoder", "input_hw", int),
    "encoder.input_channels": ("encoder", "input_channels", int),
    "encoder.conv_channels": ("encoder", "conv_channels", _ints),
    "encoder.kernel": ("encoder", "kernel", int),
    "encoder.embed_dim": ("encoder", "embed_dim", int),
    "encoder.attention_layer": ("encoder", "attention_layer", int),
    "train.epochs": ("train", "epochs", int),
    "train.batch_tuples": ("train", "batch_tuples", int),
    "train.steps_per_epoch": ("train", "steps_per_epoch", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.optimizer": ("train", "optimizer", str),
    "train.betas": ("train", "betas", _floats),
    "train.eps": ("train", "eps", float),
    "train.seed": ("train", "seed", int),
    "train.checkpoint_path": ("train", "checkpoint_path", str),
    "train.log_path": ("train", "log_path", str),
    "loss.margin": ("loss", "margin", float),
    "loss.contrastive_margin": ("loss", "contrastive_margin", float),
    "loss.quad_margins": ("loss", "quad_margins", _floats),
    "loss.gamma": ("loss", "gamma", float),
    "mask.alpha_slope": ("mask", "alpha_slope", float),
    "mask.beta_threshold": ("mask", "beta_threshold", float),
    "mask.normalize_before_mask": ("mask", "normalize_before_mask", _bool),
    "mask.detach_attention": ("mask", "detach_attention", _bool),
    "attention.detach_weights": ("mask", "detach_weights", _bool),
    "data.source": ("data", "source", str),
    "data.path": ("data", "path", str),
    "data.images": ("data", "images", str),
    "data.labels": ("data", "labels", str),
    "data.n_classes": ("data", "n_classes", int),
    "data.per_class": ("data", "per_class", int),
    "data.hw": ("data", "hw", int),
    "data.channels": ("data", "channels", int),
    "data.seed": ("data", "seed", int),
}
PATH_KEYS = {"train.checkpoint_path", "train.log_path", "data.path", "data.images", "data.labels"}


def parse_config_text(text: str, base_dir: str = ".") -> dict:
    """Parse into ``{section: {field: value}}``; relative paths resolve against ``base_dir``."""
    out = {s: {} for s in ("top", "encoder", "train", "loss", "mask", "data")}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, parse = KEYS[key]
        if key in PATH_KEYS and not os.path.isabs(value):
            value = os.path.normpath(os.path.join(base_dir, value))
        try:
            out[section][name] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return out


def read_config(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read(), os.path.dirname(os.path.abspath(path)))


@dataclass
class RunConfig:
    train: TrainConfig
    encoder: EncoderConfig
    data: dict = field(default_factory=dict)


def build_run_config(sections: dict) -> RunConfig:
    arch = sections["top"].get("arch", "triplet")
    data = {"source": "synthetic", "n_classes": 5, "per_class": 100, "hw": 64, "channels": 1, "seed": 0}
    data.update(sections["data"])
    enc = dict(sections["encoder"])
    enc.setdefault("input_hw", data["hw"])
    enc.setdefault("input_channels", data["channels"])
    try:
        encoder = EncoderConfig(**enc)
        loss = LossConfig(arch=arch, **sections["loss"])
        masking = MaskingConfig(**sections["mask"])
        train = TrainConfig(arch=arch, loss=loss, masking=masking, **sections["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, encoder, data)


def load_records(spec: dict) -> list:
    """Materialise the dataset described by a ``data.*`` section."""
    source = spec.get("source", "synthetic")
    if source == "synthetic":
        return generate_synthetic(spec["n_classes"], spec["per_class"], spec["hw"], spec["seed"],
                                  spec.get("channels", 1))
    if source == "npz":
        return load_dataset(spec["path"])
    if source == "idx":
        return load_idx(spec["images"], spec["labels"])
    raise ConfigError(f"unknown data.source {source!r}")


def parse_data_arg(arg: str) -> list:
    """``--data`` forms: a .npz path, ``synthetic:k=v,...`` or ``idx:images,labels``."""
    if arg.startswith("synthetic:") or arg == "synthetic":
        spec = {"source": "synthetic", "n_classes": 5, "per_class": 40, "hw": 64, "channels": 1, "seed": 0}
        body = arg.partition(":")[2]
        for item in filter(None, body.split(",")):
            k, _, v = item.partition("=")
            if k not in ("n_classes", "per_class", "hw", "channels", "seed"):
                raise ConfigError(f"unknown synthetic option {k!r}")
            spec[k] = int(v)
        return load_records(spec)
    if arg.startswith("idx:"):
        images, _, labels = arg[4:].partition(",")
        return load_idx(images, labels)
    return load_dataset(arg)
