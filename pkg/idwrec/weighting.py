"""
idwrec/weighting.py
-------------------
Per-item loss-weighting strategies for the in-batch softmax.

A strategy turns train-label statistics into a LossWeighting rule: a
multiplier per item id, plus the optional focal exponent, per-item margins
and item-normalisation switches the loss applies at run time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from idwrec.dataset import ItemStats
from idwrec.errors import InvalidConfigError

logger = logging.getLogger(__name__)

STRATEGIES = (
    "uniform",
    "frequency",
    "focal",
    "qmargin",
    "item_norm",
    "item_norm_posthoc",
    "external_weights",
)

DEFAULT_FOCAL_GAMMA = 2.0
DEFAULT_MAX_MARGIN = 0.5
SIMPLEX_TOLERANCE = 1e-6


@dataclass
class LossWeighting:
    """
    Everything the loss needs to apply one strategy.

    Attributes:
        strategy (str): Strategy name.
        item_weights (np.ndarray): Multiplier per item id, applied to each
            example through its label.
        focal_gamma (Optional[float]): Focal exponent, or None.
        item_margins (Optional[np.ndarray]): Margin per item id, or None.
        normalize_items_train (bool): L2-normalise item representations in training.
        normalize_items_eval (bool): L2-normalise item representations in evaluation.
    """
    strategy: str
    item_weights: np.ndarray
    focal_gamma: Optional[float] = None
    item_margins: Optional[np.ndarray] = None
    normalize_items_train: bool = False
    normalize_items_eval: bool = False


def _warn_unseen(strategy: str, probabilities: np.ndarray) -> np.ndarray:
    seen = probabilities > 0
    n_unseen = int((~seen).sum())
    if n_unseen:
        logger.warning("[Train] %s: excluding %d item(s) with p(y)=0", strategy, n_unseen)
    return seen


def frequency_weights(probabilities: np.ndarray) -> np.ndarray:
    """1/p(y) over seen items, rescaled to mean 1; unseen items get 0."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    seen = _warn_unseen("frequency", probabilities)
    weights = np.zeros_like(probabilities)
    weights[seen] = 1.0 / probabilities[seen]
    if seen.any():
        weights[seen] /= weights[seen].mean()
    return weights


def qmargin_margins(probabilities: np.ndarray, max_margin: float = DEFAULT_MAX_MARGIN) -> np.ndarray:
    """
    Margins proportional to p(y)^(-1/4), scaled so the largest equals `max_margin`.

    Unseen items get margin 0.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    seen = _warn_unseen("qmargin", probabilities)
    margins = np.zeros_like(probabilities)
    margins[seen] = probabilities[seen] ** -0.25
    if seen.any():
        margins *= max_margin / margins[seen].max()
    return margins


def validate_weight_table(weights: np.ndarray, require_simplex: bool = False) -> np.ndarray:
    """
    Checks a per-item weight table.

    Raises:
        InvalidConfigError: On negative or non-finite weights, or when a
            simplex table does not sum to 1.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvalidConfigError("item_weights", "weights must be finite and non-negative")
    if require_simplex and abs(weights.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise InvalidConfigError("item_weights", f"weights must sum to 1, got {weights.sum():.8f}")
    return weights


def strategy_weights(strategy: str, stats: ItemStats, focal_gamma: float = DEFAULT_FOCAL_GAMMA,
                     max_margin: float = DEFAULT_MAX_MARGIN,
                     external: Optional[np.ndarray] = None) -> LossWeighting:
    """
    Builds the weighting rule of `strategy` from train statistics.

    Args:
        strategy (str): One of STRATEGIES.
        stats (ItemStats): Train-label statistics.
        focal_gamma (float): Exponent for the focal strategy.
        max_margin (float): Largest margin for the qmargin strategy.
        external (Optional[np.ndarray]): Simplex weights for `external_weights`.

    Returns:
        LossWeighting: The rule to hand to the training loop.

    Raises:
        InvalidConfigError: On an unknown strategy or a bad external table.
    """
    n = stats.num_items
    ones = np.ones(n, dtype=np.float64)
    if strategy == "uniform":
        return LossWeighting(strategy, ones)
    if strategy == "frequency":
        return LossWeighting(strategy, frequency_weights(stats.probabilities))
    if strategy == "focal":
        return LossWeighting(strategy, ones, focal_gamma=focal_gamma)
    if strategy == "qmargin":
        return LossWeighting(strategy, ones, item_margins=qmargin_margins(stats.probabilities, max_margin))
    if strategy == "item_norm":
        return LossWeighting(strategy, ones, normalize_items_train=True, normalize_items_eval=True)
    if strategy == "item_norm_posthoc":
        return LossWeighting(strategy, ones, normalize_items_eval=True)
    if strategy == "external_weights":
        if external is None:
            raise InvalidConfigError("external", "external_weights needs a weight table")
        table = validate_weight_table(external, require_simplex=True)
        if table.shape != (n,):
            raise InvalidConfigError("external", f"expected {n} weights, got {table.shape}")
        # mean 1 over the items carrying weight
        carriers = max(int((table > 0).sum()), 1)
        return LossWeighting(strategy, table * carriers)
    raise InvalidConfigError("strategy", f"'{strategy}' is not one of {list(STRATEGIES)}")
