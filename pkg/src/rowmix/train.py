"""Training loops: the float teacher and the one-subnet-per-step supernet."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import vit
from .dataset import SyntheticDataset, cosine_lr, minibatches
from .space import SubnetConfig, largest_subnet, sample_subnet
from .supernet import Supernet

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    lr_floor: float = 0.0
    seed: int = 0
    alpha: float = 0.0
    tau: float = 1.0
    act_bits: int = 6


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    configs: list[SubnetConfig] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)


def sgd_update(named: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
    """In place, so updates reach whatever storage the arrays alias."""
    for name, g in grads.items():
        named[name] -= lr * g


def _check_loss(loss: float, step: int, what) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {step} ({what})")


def teacher_config(space_geo, embed_dim: int = 48, depth: int = 2, head_dim: int | None = None) -> vit.ToyModelConfig:
    hd = head_dim or space_geo.head_dim
    return vit.ToyModelConfig(embed_dim=embed_dim, depth=depth, head_dim=hd,
                              hidden_dims=(embed_dim,) * depth, expansion_ratios=(4.0,) * depth,
                              mixed_ratios=(0.0,) * depth, token_dim=space_geo.token_dim,
                              num_classes=space_geo.num_classes, sls_init=1.0)


def train_teacher(data: SyntheticDataset, model_cfg: vit.ToyModelConfig, cfg: TrainConfig):
    """Plain float training (no quantization) of a wider model."""
    params = vit.init_params(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    qm = vit.QuantMode.off()
    kd = vit.KdConfig()
    named = params.named()
    n = len(data.x_train)
    total = cfg.epochs * -(-n // cfg.batch_size)
    step = 0
    hist = TrainHistory()
    for _ in range(cfg.epochs):
        for idx in minibatches(n, cfg.batch_size, rng):
            logits, cache = vit.forward(params, data.x_train[idx], qm)
            loss, g = vit.kd_loss(logits, data.y_train[idx], kd)
            _check_loss(loss, step, "teacher")
            sgd_update(named, vit.backward(params, cache, g), cosine_lr(cfg.lr, step, total, cfg.lr_floor))
            hist.losses.append(loss)
            step += 1
        hist.val_acc.append(vit.evaluate(params, data.x_val, data.y_val, qm))
        log.info("teacher epoch %d val acc %.4f", len(hist.val_acc), hist.val_acc[-1])
    return params, hist


def train_supernet(sn: Supernet, data: SyntheticDataset, cfg: TrainConfig,
                   teacher_logits: np.ndarray | None = None, eval_every: int = 0) -> TrainHistory:
    """Sample one subnet per step and update only the windows it reads."""
    rng = np.random.default_rng(cfg.seed)
    qm = vit.QuantMode(True, True, cfg.act_bits)
    kd = vit.KdConfig(cfg.alpha, cfg.tau)
    if cfg.alpha > 0 and teacher_logits is None:
        raise ValueError("alpha > 0 needs teacher logits")
    n = len(data.x_train)
    total = cfg.epochs * -(-n // cfg.batch_size)
    hist = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in minibatches(n, cfg.batch_size, rng):
            config = sample_subnet(sn.space, rng)
            loss = train_step(sn, config, data.x_train[idx], data.y_train[idx], kd,
                              None if teacher_logits is None else teacher_logits[idx],
                              cosine_lr(cfg.lr, step, total, cfg.lr_floor), qm)
            _check_loss(loss, step, config)
            hist.losses.append(loss)
            hist.configs.append(config)
            step += 1
        if eval_every and (epoch + 1) % eval_every == 0:
            hist.val_acc.append(subnet_accuracy(sn, largest_subnet(sn.space), data.x_val, data.y_val, cfg.act_bits))
            log.info("epoch %d largest-subnet val acc %.4f", epoch + 1, hist.val_acc[-1])
    return hist


def train_step(sn: Supernet, config: SubnetConfig, x, y, kd: vit.KdConfig, teacher_logits, lr: float,
               qm: vit.QuantMode = vit.QuantMode()) -> float:
    params = sn.subnet_params(config)
    logits, cache = vit.forward(params, x, qm)
    loss, g = vit.kd_loss(logits, y, kd, teacher_logits)
    if np.isfinite(loss):
        sgd_update(params.named(), vit.backward(params, cache, g), lr)
    return loss


def subnet_accuracy(sn: Supernet, config: SubnetConfig, x, y, act_bits: int = 6) -> float:
    """One-shot accuracy with inherited weights."""
    return vit.evaluate(sn.subnet_params(config), x, y, vit.QuantMode(True, True, act_bits))
