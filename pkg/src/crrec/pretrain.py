"""Stage one: next-item prediction on positive-reward transitions."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import History, TransitionSet
from .errors import ConfigError, DataError
from .metrics import validation_hr
from .networks import set_dropout
from .substrate import SCHEDULES, AdamState, adam_step, backward, cross_entropy

log = logging.getLogger(__name__)

CURVE_FIELDS = ["epoch", "train_loss", "val_hr10", "val_ndcg10"]


@dataclass
class PretrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    dropout: float = 0.0
    schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field="pretrain.batch_size")
        if not self.lr > 0:
            raise ConfigError("must be > 0", field="pretrain.lr")
        if not 0 <= self.dropout < 1:
            raise ConfigError("must be in [0, 1)", field="pretrain.dropout")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field="pretrain.epochs")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}", field="pretrain.schedule")


@dataclass
class PretrainResult:
    policy: torch.nn.Module
    best_epoch: int
    best_hr10: float
    curve: list = field(default_factory=list)


def pretrain(policy, train: TransitionSet, valid: TransitionSet | None, config: PretrainConfig,
             history: History | None = None) -> PretrainResult:
    """Minimise mean cross-entropy of the logged action; keep the best validation epoch.

    Ties in validation HR@10 keep the earlier epoch. Without a validation
    set the final epoch is returned.
    """
    data = train.positive()
    if len(data) == 0:
        raise DataError("no positive-reward transitions to pretrain on")
    if history is None:
        history = History([train] + ([valid] if valid is not None else []))
    set_dropout(policy, config.dropout)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = AdamState(policy.parameters())
    schedule = SCHEDULES[config.schedule]
    steps_per_epoch = -(-len(data) // config.batch_size)
    total = max(1, steps_per_epoch * config.epochs)

    best_state = copy.deepcopy(policy.state_dict())
    best_hr, best_epoch = float("-inf"), 0
    curve = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        policy.train()
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            states = torch.from_numpy(data.states[idx])
            targets = torch.from_numpy(data.actions[idx]) - 1
            opt.zero_grad()
            loss = cross_entropy(policy(states), targets)
            backward(loss)
            adam_step(opt, schedule(step, total, config.lr))
            step += 1
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        if valid is not None and len(valid.positive()):
            hr, ndcg = validation_hr(policy, valid, history)
        else:
            hr, ndcg = float("nan"), float("nan")
        curve.append({"epoch": epoch, "train_loss": train_loss, "val_hr10": hr, "val_ndcg10": ndcg})
        log.info("epoch %d loss %.4f val HR@10 %.4f NDCG@10 %.4f", epoch, train_loss, hr, ndcg)
        if hr > best_hr or (np.isnan(hr) and epoch == config.epochs):
            best_hr, best_epoch = hr, epoch
            best_state = copy.deepcopy(policy.state_dict())
    policy.load_state_dict(best_state)
    policy.eval()
    return PretrainResult(policy, best_epoch, best_hr, curve)


def export_embeddings(policy) -> torch.Tensor:
    """Value copy of the item embedding table."""
    return policy.item_emb.weight.detach().clone()


def write_curve(path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
