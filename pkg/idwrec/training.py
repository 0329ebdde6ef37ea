"""
idwrec/training.py
------------------
Mini-batch training of the two towers with early stopping on validation
HR@K, plus the user-tower calibration pass that keeps the item tower frozen.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator

from idwrec.dataset import DatasetSplits, ItemStats
from idwrec.errors import DegenerateBatchError, TrainingDivergedError
from idwrec.evaluation import OVERALL, EvalProtocol, evaluate
from idwrec.towers import TwoTowerModel, batch_softmax_loss, to_tensors
from idwrec.weighting import (DEFAULT_FOCAL_GAMMA, DEFAULT_MAX_MARGIN, STRATEGIES,
                              LossWeighting, strategy_weights)

logger = logging.getLogger(__name__)

ITEM_TOWER_PREFIX = "item_tower."


class TrainConfig(BaseModel):
    """Optimiser, batching and early-stopping settings."""
    model_config = {'protected_namespaces': ()}

    learning_rate: float = Field(0.01, ge=0.0)
    batch_size: int = Field(256, ge=2)
    max_epochs: int = Field(50, ge=0)
    patience: int = Field(3, ge=1)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    strategy: str = "uniform"
    focal_gamma: float = Field(DEFAULT_FOCAL_GAMMA, ge=0.0)
    qmargin_max: float = Field(DEFAULT_MAX_MARGIN, gt=0.0)
    lr_schedule: Literal["constant"] = "constant"
    monitor_k: int = Field(20, ge=1)
    rng_seed: int = Field(0, ge=0)

    @field_validator("strategy")
    @classmethod
    def validate_strategy(cls, v: str) -> str:
        v = v.strip().lower()
        if v not in STRATEGIES:
            raise ValueError(f"Invalid strategy '{v}'. Must be one of: {list(STRATEGIES)}")
        return v


@dataclass
class TrainHistory:
    """
    Per-epoch record of one training run.

    Row 0 is the starting point (no training loss); the best epoch is the
    one whose parameters were restored.
    """
    monitor_k: int = 20
    rows: List[Dict[str, Optional[float]]] = field(default_factory=list)
    best_epoch: int = 0
    best_hr: float = -1.0
    best_ndcg: float = 0.0

    @property
    def epochs_run(self) -> int:
        return max(len(self.rows) - 1, 0)

    def train_losses(self) -> List[float]:
        return [r["train_loss"] for r in self.rows if r["train_loss"] is not None]

    def write_csv(self, path: str) -> None:
        k = self.monitor_k
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", f"val_hr{k}", f"val_ndcg{k}"])
            for r in self.rows:
                writer.writerow([r["epoch"], "" if r["train_loss"] is None else r["train_loss"],
                                 r["val_hr"], r["val_ndcg"]])


def weighting_for(config: TrainConfig, stats: ItemStats) -> LossWeighting:
    return strategy_weights(config.strategy, stats, focal_gamma=config.focal_gamma,
                            max_margin=config.qmargin_max)


def validation_protocol(config: TrainConfig, protocol: Optional[EvalProtocol]) -> EvalProtocol:
    """Single-seed protocol that always reports the monitored cutoff."""
    base = protocol or EvalProtocol(seeds=[config.rng_seed])
    k_values = sorted({config.monitor_k, *base.k_values})
    return base.model_copy(update={"k_values": k_values, "seeds": [base.seeds[0]]})


def _validate(model: TwoTowerModel, splits: DatasetSplits, protocol: EvalProtocol,
              k: int, normalize_items: bool):
    report = evaluate(model, splits.validation, splits.user_histories, splits.num_items,
                      protocol, normalize_items=normalize_items)
    entry = report.get(OVERALL, k)
    if entry is None:
        return 0.0, 0.0
    return entry.hr, entry.ndcg


def train(model: TwoTowerModel, splits: DatasetSplits, stats: ItemStats, config: TrainConfig,
          weighting: Optional[LossWeighting] = None, protocol: Optional[EvalProtocol] = None,
          freeze_item_tower: bool = False, iteration: Optional[int] = None) -> TrainHistory:
    """
    Trains `model` in place and restores its best-validation parameters.

    Each epoch shuffles the train split with a generator seeded from
    `config.rng_seed`, takes Adam steps on the weighted in-batch softmax and
    then scores validation HR@monitor_k. Training stops after `patience`
    epochs without improvement. Standalone runs count the starting
    parameters as epoch 0, so the result is never worse on validation than
    the input. IDW wakes (`iteration` set) pick the best among trained
    epochs; the starting point is kept only when no epoch ran.

    Args:
        model (TwoTowerModel): Model to update (warm start).
        splits (DatasetSplits): Leave-one-out splits.
        stats (ItemStats): Train-label statistics (LogQ probabilities).
        config (TrainConfig): Optimiser and stopping settings.
        weighting (Optional[LossWeighting]): Rule; defaults to config.strategy.
        protocol (Optional[EvalProtocol]): Validation protocol (first seed used).
        freeze_item_tower (bool): Keep every item-tower parameter fixed.
        iteration (Optional[int]): IDW iteration, reported on divergence.

    Returns:
        TrainHistory: Per-epoch losses and validation metrics.

    Raises:
        DegenerateBatchError: If the train split has fewer than 2 examples.
        TrainingDivergedError: If a batch loss is NaN or infinite.
    """
    weighting = weighting or weighting_for(config, stats)
    val_protocol = validation_protocol(config, protocol)
    k = config.monitor_k
    n = len(splits.train)
    if n < 2:
        raise DegenerateBatchError(f"Train split has {n} example(s); need at least 2")

    frozen = []
    if freeze_item_tower:
        for name, p in model.named_parameters():
            if name.startswith(ITEM_TOWER_PREFIX) and p.requires_grad:
                p.requires_grad_(False)
                frozen.append(p)
    params = [p for p in model.parameters() if p.requires_grad]

    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.adam_eps)
    generator = torch.Generator().manual_seed(config.rng_seed)
    probabilities = torch.as_tensor(stats.probabilities, dtype=torch.float64)
    item_weights = torch.as_tensor(weighting.item_weights, dtype=torch.float64)
    margins = (torch.as_tensor(weighting.item_margins, dtype=torch.float64)
               if weighting.item_margins is not None else None)
    contexts, valid_lens, labels = to_tensors(splits.train)

    history = TrainHistory(monitor_k=k)
    hr, ndcg = _validate(model, splits, val_protocol, k, weighting.normalize_items_eval)
    history.rows.append({"epoch": 0, "train_loss": None, "val_hr": hr, "val_ndcg": ndcg})
    start_hr, start_ndcg = hr, ndcg
    if iteration is None:
        history.best_hr, history.best_ndcg = hr, ndcg
    best_state = copy.deepcopy(model.state_dict())
    stale = 0

    tag = f"[Train]{'' if iteration is None else f' (IDW iteration {iteration})'}"
    try:
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            order = torch.randperm(n, generator=generator)
            total, seen = 0.0, 0
            for step, start in enumerate(range(0, n, config.batch_size), start=1):
                idx = order[start:start + config.batch_size]
                if len(idx) < 2:
                    continue
                batch_labels = labels[idx]
                result = batch_softmax_loss(
                    model, contexts[idx], valid_lens[idx], batch_labels, probabilities,
                    example_weights=item_weights[batch_labels],
                    focal_gamma=weighting.focal_gamma,
                    item_margins=margins,
                    normalize_items=weighting.normalize_items_train,
                )
                loss = result.loss
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, step, loss.item(), iteration)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                batch_loss = loss.item()
                total += batch_loss * len(idx)
                seen += len(idx)
                logger.debug("%s epoch %d step %d loss %.6f", tag, epoch, step, batch_loss)

            train_loss = total / seen if seen else math.nan
            hr, ndcg = _validate(model, splits, val_protocol, k, weighting.normalize_items_eval)
            history.rows.append({"epoch": epoch, "train_loss": train_loss, "val_hr": hr, "val_ndcg": ndcg})
            logger.info("%s epoch %d: loss=%.5f val HR@%d=%.4f NDCG@%d=%.4f",
                        tag, epoch, train_loss, k, hr, k, ndcg)

            if hr > history.best_hr:
                history.best_hr, history.best_ndcg, history.best_epoch = hr, ndcg, epoch
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info("%s early stop after epoch %d (best epoch %d)", tag, epoch, history.best_epoch)
                    break
    finally:
        for p in frozen:
            p.requires_grad_(True)

    if history.best_hr < 0:
        history.best_hr, history.best_ndcg = start_hr, start_ndcg
    model.load_state_dict(best_state)
    model.eval()
    return history


def freeze_item_tower_train(model: TwoTowerModel, splits: DatasetSplits, stats: ItemStats,
                            config: TrainConfig, protocol: Optional[EvalProtocol] = None) -> TrainHistory:
    """
    Calibration: retrains the user tower with the unweighted loss while every
    item-tower parameter stays fixed.
    """
    logger.info("[Train] Calibrating user tower (item tower frozen)")
    uniform = strategy_weights("uniform", stats)
    return train(model, splits, stats, config, weighting=uniform, protocol=protocol,
                 freeze_item_tower=True)


def parameters_snapshot(model: TwoTowerModel) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}
