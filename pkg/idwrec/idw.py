"""
idwrec/idw.py
-------------
Iterative Density Weighting.

The procedure alternates two phases after an unweighted warm-up:

  sleep  – estimate a Gaussian kernel density over the current item
           representations (weighted by the current loss weights), rescale it
           to [0, 1] and move the weights towards the normalised inverse
           density with momentum m;
  wake   – retrain the towers, warm-started, with the new per-item weights.

The loop ends when the weights move less than eta or after max_iterations
sleeps. A final calibration retrains the user tower with the unweighted loss
while the item tower stays frozen.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

from idwrec.dataset import DatasetSplits, ItemStats
from idwrec.distances import iter_row_blocks, pairwise_euclidean
from idwrec.errors import InvalidConfigError, UndefinedMetricError
from idwrec.evaluation import EvalProtocol, item_silhouette
from idwrec.towers import TwoTowerModel
from idwrec.training import TrainConfig, TrainHistory, freeze_item_tower_train, train
from idwrec.weighting import SIMPLEX_TOLERANCE, strategy_weights

logger = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-6
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class IdwConfig(BaseModel):
    """Momentum, stopping threshold, iteration cap and the wake-phase schedule."""
    model_config = {'protected_namespaces': ()}

    momentum: float = Field(0.9, ge=0.0, le=1.0)
    eta: float = Field(3e-4, gt=0.0)
    max_iterations: int = Field(15, ge=1)
    wake: TrainConfig = Field(default_factory=lambda: TrainConfig(patience=2))
    calibrate: bool = True
    kde_workers: int = Field(4, ge=1)
    bandwidth_floor: float = Field(BANDWIDTH_FLOOR, gt=0.0)
    dump_weights: bool = False


@dataclass
class DensityState:
    """Loss weights of the current iteration and the last sleep's diagnostics."""
    weights: np.ndarray
    iteration: int = 0
    last_delta: Optional[float] = None
    bandwidth: Optional[float] = None


@dataclass
class IdwResult:
    state: DensityState
    log: List[Dict[str, Optional[float]]] = field(default_factory=list)
    baseline: Optional[TrainHistory] = None
    wakes: List[TrainHistory] = field(default_factory=list)
    calibration: Optional[TrainHistory] = None
    converged: bool = False


# ---------------------------------------------------------------------------
# Sleep-phase primitives
# ---------------------------------------------------------------------------

def scott_bandwidth(representations: np.ndarray, floor: float = BANDWIDTH_FLOOR) -> float:
    """
    Scalar Scott bandwidth N^(-1/(d+4)) * mean per-dimension standard deviation.

    Raises:
        UndefinedMetricError: With fewer than two representations.
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 2:
        raise UndefinedMetricError("Scott's rule needs at least two item representations")
    n, d = reps.shape
    sigma = reps.std(axis=0, ddof=1).mean()
    bandwidth = n ** (-1.0 / (d + 4)) * sigma
    if not bandwidth > floor:
        logger.warning("[IDW] Degenerate representations (bandwidth %.3g); using floor %.1g",
                       bandwidth, floor)
        return floor
    return float(bandwidth)


def kde_density(representations: np.ndarray, weights: np.ndarray, bandwidth: float,
                workers: int = 1, block_size: int = 256) -> np.ndarray:
    """
    Weighted Gaussian KDE evaluated at every item's own representation.

    p(y) = (1/l) * sum_k w_k * exp(-(|y - v_k| / l)^2 / 2) / sqrt(2 pi),
    self term included. Row blocks are spread over `workers` threads.

    Raises:
        InvalidConfigError: If weights do not sum to 1 or bandwidth <= 0.
    """
    reps = np.asarray(representations, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise InvalidConfigError("weights", f"must sum to 1, got {w.sum():.8f}")
    if not bandwidth > 0:
        raise InvalidConfigError("bandwidth", f"must be positive, got {bandwidth}")

    density = np.empty(reps.shape[0], dtype=np.float64)

    def fill(rows: slice) -> None:
        u = pairwise_euclidean(reps[rows], reps) / bandwidth
        density[rows] = (np.exp(-0.5 * u * u) / _SQRT_2PI) @ w / bandwidth

    blocks = list(iter_row_blocks(reps.shape[0], block_size))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(fill, blocks))
    else:
        for rows in blocks:
            fill(rows)
    return density


def relative_density(density: np.ndarray) -> np.ndarray:
    """Min-max rescaling into [0, 1]; all zeros when the density is constant."""
    density = np.asarray(density, dtype=np.float64)
    lo, hi = density.min(), density.max()
    if hi - lo <= 0:
        return np.zeros_like(density)
    return (density - lo) / (hi - lo)


def update_weights(weights: np.ndarray, rel_density: np.ndarray, momentum: float) -> np.ndarray:
    """
    w' = m * w + (1 - m) * h / sum(h) with h = 1 - relative density.

    Weights are kept unchanged (with a warning) when sum(h) = 0.
    """
    weights = np.asarray(weights, dtype=np.float64)
    h = 1.0 - np.asarray(rel_density, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        logger.warning("[IDW] Every item sits at maximum density; weights left unchanged")
        return weights.copy()
    return momentum * weights + (1.0 - momentum) * h / total


def check_convergence(w_old: np.ndarray, w_new: np.ndarray, eta: float) -> bool:
    return bool(np.linalg.norm(np.asarray(w_new) - np.asarray(w_old)) < eta)


def initial_weights(stats: ItemStats) -> np.ndarray:
    counts = stats.counts.astype(np.float64)
    return counts / counts.sum()


def item_representations(model: TwoTowerModel) -> np.ndarray:
    with torch.no_grad():
        return model.all_item_representations().to(torch.float64).numpy()


def sleep_phase(model: TwoTowerModel, state: DensityState, config: IdwConfig) -> np.ndarray:
    """One density re-estimation; returns the next weights and records the bandwidth."""
    reps = item_representations(model)
    state.bandwidth = scott_bandwidth(reps, config.bandwidth_floor)
    density = kde_density(reps, state.weights, state.bandwidth, workers=config.kde_workers)
    return update_weights(state.weights, relative_density(density), config.momentum)


def write_weights(path: str, weights: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item_id", "weight"])
        for item, w in enumerate(weights):
            writer.writerow([item, repr(float(w))])


def write_idw_log(path: str, rows: List[Dict[str, Optional[float]]], monitor_k: int = 20) -> None:
    """Per-iteration CSV: iteration, delta_w, ms_score, val metrics, bandwidth, wake epochs."""
    columns = ["iteration", "delta_w", "ms_score", "val_hr", "val_ndcg", "bandwidth", "wake_epochs"]
    header = ["iteration", "delta_w", "ms_score", f"val_hr{monitor_k}", f"val_ndcg{monitor_k}",
              "bandwidth", "wake_epochs"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


# ---------------------------------------------------------------------------
# Full procedure
# ---------------------------------------------------------------------------

def run_idw(model: TwoTowerModel, splits: DatasetSplits, stats: ItemStats, train_config: TrainConfig,
            config: IdwConfig, protocol: Optional[EvalProtocol] = None,
            item_clusters: Optional[np.ndarray] = None,
            weights_dir: Optional[str] = None) -> IdwResult:
    """
    Runs the full weighting procedure on `model` in place.

    Args:
        model (TwoTowerModel): Freshly initialised towers.
        splits (DatasetSplits): Leave-one-out splits.
        stats (ItemStats): Train-label statistics (initial weights, LogQ).
        train_config (TrainConfig): Warm-up and calibration schedule.
        config (IdwConfig): Momentum, eta, iteration cap and wake schedule.
        protocol (Optional[EvalProtocol]): Validation protocol.
        item_clusters (Optional[np.ndarray]): Ground truth for the MS column.
        weights_dir (Optional[str]): Where to dump per-iteration weights.

    Returns:
        IdwResult: Final weights, per-iteration log and training histories.
    """
    result = IdwResult(state=DensityState(weights=initial_weights(stats)))
    state = result.state

    def ms_score() -> Optional[float]:
        return item_silhouette(model, item_clusters) if item_clusters is not None else None

    if config.dump_weights and weights_dir:
        os.makedirs(weights_dir, exist_ok=True)
        write_weights(os.path.join(weights_dir, "weights_000.csv"), state.weights)

    logger.info("[IDW] Warm-up training with the unweighted loss")
    result.baseline = train(model, splits, stats, train_config,
                            weighting=strategy_weights("uniform", stats), protocol=protocol)
    result.log.append({
        "iteration": 0, "delta_w": None, "ms_score": ms_score(),
        "val_hr": result.baseline.best_hr, "val_ndcg": result.baseline.best_ndcg,
        "bandwidth": None, "wake_epochs": result.baseline.epochs_run,
    })

    for t in range(1, config.max_iterations + 1):
        new_weights = sleep_phase(model, state, config)
        delta = float(np.linalg.norm(new_weights - state.weights))
        state.last_delta = delta
        state.iteration = t
        converged = check_convergence(state.weights, new_weights, config.eta)
        state.weights = new_weights
        if config.dump_weights and weights_dir:
            write_weights(os.path.join(weights_dir, f"weights_{t:03d}.csv"), new_weights)

        row = {"iteration": t, "delta_w": delta, "bandwidth": state.bandwidth}
        if converged:
            last = result.log[-1]
            row.update(ms_score=last["ms_score"], val_hr=last["val_hr"],
                       val_ndcg=last["val_ndcg"], wake_epochs=0)
            result.log.append(row)
            result.converged = True
            logger.info("[IDW] Iteration %d: |dw|=%.3g < eta=%.3g, converged", t, delta, config.eta)
            break

        weighting = strategy_weights("external_weights", stats, external=new_weights)
        wake = train(model, splits, stats, config.wake, weighting=weighting,
                     protocol=protocol, iteration=t)
        result.wakes.append(wake)
        row.update(ms_score=ms_score(), val_hr=wake.best_hr, val_ndcg=wake.best_ndcg,
                   wake_epochs=wake.epochs_run)
        result.log.append(row)
        logger.info("[IDW] Iteration %d: |dw|=%.3g bandwidth=%.4g MS=%s val HR=%.4f",
                    t, delta, state.bandwidth,
                    "n/a" if row["ms_score"] is None else f"{row['ms_score']:.3f}", wake.best_hr)

    if config.calibrate:
        result.calibration = freeze_item_tower_train(model, splits, stats, train_config, protocol)
    return result
