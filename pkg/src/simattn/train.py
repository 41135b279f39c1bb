"""Training loop: L = L_ml + gamma * L_sm with online tuple sampling."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import ARCH_ARITY
from .autodiff import NonFiniteError
from .checkpoint import Checkpoint, save_checkpoint
from .data import sample_tuples, stack_images
from .encoder import EncoderConfig, forward, init_params
from .losses import LossConfig, metric_loss, total_loss
from .mining import MaskingConfig, mining_forward
from .optim import OptimizerState, optimizer_step

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    arch: str = "triplet"
    epochs: int = 20
    batch_tuples: int = 16
    # 0 means ceil(len(dataset) / batch_tuples): every record is an anchor about once per epoch
    steps_per_epoch: int = 0
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.arch not in ARCH_ARITY:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.epochs < 1 or self.batch_tuples < 1 or self.steps_per_epoch < 0:
            raise ValueError("epochs and batch_tuples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss.arch != self.arch:
            self.loss = LossConfig(self.arch, self.loss.margin, self.loss.contrastive_margin,
                                   self.loss.quad_margins, self.loss.gamma)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list


def format_log_line(entry: dict) -> str:
    return json.dumps(
        {"epoch": int(entry["epoch"]), "l_ml": float(entry["l_ml"]),
         "l_sm": float(entry["l_sm"]), "l_total": float(entry["l_total"])},
        separators=(",", ":"),
    )


def training_step(params, records, tuples, config: TrainConfig) -> tuple:
    """Forward both objectives and backpropagate; returns (grads by name, l_ml, l_sm, l_total)."""
    roles = [stack_images(records, tuples.indices[:, r]) for r in range(tuples.indices.shape[1])]
    stacked = ad.concat([ad.Tensor(x) for x in roles])
    feature_maps, f_all = forward(params, stacked)
    b = len(tuples)
    fs = [ad.take(f_all, np.arange(i * b, (i + 1) * b)) for i in range(len(roles))]
    l_ml = metric_loss(config.loss, fs, tuples.same_class)
    gamma = config.loss.gamma
    if gamma > 0:
        l_sm = mining_forward(params, roles, config.arch, config.masking,
                              same_class=tuples.same_class, encoded=(feature_maps, f_all))
        loss = total_loss(l_ml, l_sm, gamma)
    else:
        l_sm = None
        loss = l_ml
    grads = ad.backward(loss)
    by_name = {n: grads[t] if t in grads else np.zeros_like(t.data) for n, t in params.items()}
    return by_name, float(l_ml.item()), 0.0 if l_sm is None else float(l_sm.item()), float(loss.item())


def train(records: list, config: TrainConfig, encoder_config: EncoderConfig | None = None,
          resume: Checkpoint | None = None, progress=None) -> TrainResult:
    """Train from scratch (or resume) and return the final checkpoint and per-epoch log."""
    if resume is not None:
        params = resume.params
        opt = resume.optimizer
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        encoder_config = encoder_config or EncoderConfig(input_hw=records[0].image.shape[0],
                                                         input_channels=records[0].image.shape[2])
        params = init_params(encoder_config, config.seed)
        opt = OptimizerState(config.optimizer, config.learning_rate, config.betas[0], config.betas[1], config.eps)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 1])))
        start = 0
    steps = config.steps_per_epoch or math.ceil(len(records) / config.batch_tuples)
    history = []
    log_fh = open(config.log_path, "a" if resume is not None else "w") if config.log_path else None
    try:
        for epoch in range(start + 1, start + config.epochs + 1):
            sums = np.zeros(3)
            for step in range(steps):
                tuples = sample_tuples(records, config.arch, config.batch_tuples, rng)
                try:
                    grads, *losses = training_step(params, records, tuples, config)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
                if not all(math.isfinite(v) for v in losses):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}: {losses}")
                params, opt = optimizer_step(params, grads, opt)
                sums += losses
            mean = sums / steps
            entry = {"epoch": epoch, "l_ml": mean[0], "l_sm": mean[1], "l_total": mean[2]}
            history.append(entry)
            line = format_log_line(entry)
            log.info(line)
            if log_fh:
                log_fh.write(line + "\n")
                log_fh.flush()
            if progress:
                progress(entry)
    finally:
        if log_fh:
            log_fh.close()
    ckpt = Checkpoint(params.config, params, opt, rng.bit_generator.state, start + config.epochs)
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    return TrainResult(ckpt, history)
