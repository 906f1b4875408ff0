"""Windowed training loop shared by the ABMIL and mixture-of-experts models.

Batch size is one bag; ``accumulation_steps`` consecutive bags form a window
whose mean loss is back-propagated once, which is the same as averaging the
per-bag gradients before each AdamW update.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ContractError, TrainingError
from .numerics import AdamW, LrSchedule, backward


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    accumulation_steps: int = 16
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ContractError(f"invalid training config {self}")
        if self.accumulation_steps < 1:
            raise ContractError("accumulation_steps must be >= 1")

    def to_dict(self):
        return asdict(self)


def run_training(params, n_items, window_loss, cfg, rng, item_ids=None, on_epoch=None):
    """Optimise ``params`` over ``cfg.epochs`` shuffled passes.

    Parameters
    ----------
    params : dict of str -> Tensor
        Trainable leaves, updated in place.
    n_items : int
        Number of training bags.
    window_loss : callable
        ``window_loss(indices) -> (loss Tensor, per-item NLL values)``.
    cfg : TrainConfig
    rng : numpy.random.Generator
        Drives the per-epoch shuffling.
    item_ids : list of str, optional
        Bag ids reported in diagnostics when the loss goes non-finite.
    on_epoch : callable, optional
        ``on_epoch(epoch, mean_nll)`` after each pass.

    Returns
    -------
    list of float
        Mean per-bag NLL of each epoch.
    """
    if n_items < 1:
        raise ContractError("no training items")
    per_epoch = math.ceil(n_items / cfg.accumulation_steps)
    total = cfg.epochs * per_epoch
    schedule = LrSchedule(cfg.lr, min(cfg.warmup_epochs * per_epoch, total), total)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, update = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        nll_sum = 0.0
        for start in range(0, n_items, cfg.accumulation_steps):
            idx = order[start:start + cfg.accumulation_steps]
            loss, nlls = window_loss(idx)
            if not np.isfinite(loss.value).all():
                ids = [item_ids[i] for i in idx] if item_ids is not None else idx.tolist()
                raise TrainingError(f"non-finite loss at epoch {epoch}, update {update}",
                                    epoch=epoch, step=update, bag_ids=ids)
            grads = backward(loss, params)
            try:
                opt.step(grads, lr=schedule(min(update + 1, total)))
            except TrainingError as exc:
                exc.details.update(epoch=epoch, step=update)
                raise
            update += 1
            nll_sum += float(np.sum(nlls))
        history.append(nll_sum / n_items)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history
