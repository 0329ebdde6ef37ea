"""
idwrec/synthetic.py
-------------------
Synthetic sequential-interaction generator driven by a per-user hidden
Markov chain over interest clusters.

Every user owns a small set of interest clusters. A cluster-level Markov
chain decides which cluster the next interaction comes from, and the item
inside that cluster is drawn from a power-law over the cluster's items.
Ground-truth cluster labels are kept beside the log and are never fed to
the model.

Public API
----------
power_law_weights(exponent, n)          – rank^(-exponent) weights summing to 1.
sample_interest_weights(exponent, C)    – cluster popularity vector pi.
assign_user_interests(pi, n, rng)       – n distinct clusters drawn from pi.
build_transition_matrix(...)            – the six-case C x C transition matrix.
sample_cluster_sequence(...)            – walk the chain for T steps.
sample_item_sequence(...)               – map clusters to item ids.
generate_dataset(config)                – the full, seeded procedure.
write_dataset(dataset, directory)       – TSV + ground truth + config echo.
head_tail_clusters(pi, head_clusters)   – cluster-level head/tail split.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from idwrec.dataset import InteractionLog
from idwrec.errors import InvalidConfigError

logger = logging.getLogger(__name__)

# Row sums are checked against this tolerance everywhere in the package.
ROW_SUM_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class SynthConfig(BaseModel):
    """Parameters of the interest-cluster Markov generator."""
    model_config = {'protected_namespaces': ()}

    num_clusters: int = Field(5, ge=1)
    items_per_cluster: int = Field(10, ge=1)
    num_users: int = Field(1000, ge=1)
    seq_len: int = Field(20, ge=1)
    alpha: float = Field(0.6, ge=0.0, le=1.0)
    gamma: float = Field(0.3, ge=0.0, le=1.0)
    epsilon: float = Field(0.1, ge=0.0, le=1.0)
    interest_exponent: float = Field(0.0, ge=0.0)
    item_exponent: float = Field(0.5, ge=0.0)
    interests_per_user: int = Field(2, ge=1)
    rng_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_probabilities(self) -> "SynthConfig":
        if self.alpha + self.gamma > 1.0 + ROW_SUM_TOLERANCE:
            raise ValueError(
                f"alpha + gamma must be <= 1 (got {self.alpha} + {self.gamma})."
            )
        if self.interests_per_user > self.num_clusters:
            raise ValueError(
                f"interests_per_user ({self.interests_per_user}) cannot exceed "
                f"num_clusters ({self.num_clusters})."
            )
        if (self.interests_per_user == self.num_clusters
                and self.alpha + self.gamma < 1.0 - ROW_SUM_TOLERANCE):
            raise ValueError(
                "Every cluster is an interest, so alpha + gamma must equal 1 "
                "(no non-interest cluster can absorb the remaining mass)."
            )
        return self

    @property
    def num_items(self) -> int:
        return self.num_clusters * self.items_per_cluster


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserProfile:
    user_id: int
    interests: Tuple[int, ...]
    transition: np.ndarray


@dataclass
class GeneratedDataset:
    """
    Output of generate_dataset().

    Attributes:
        log (InteractionLog): One sequence per user, dense ids.
        item_cluster (np.ndarray): Ground-truth cluster of every item id.
        interest_weights (np.ndarray): Cluster popularity vector pi.
        per_cluster_item_weights (np.ndarray): (C, K) item weights per cluster.
        profiles (List[UserProfile]): Interest set and transition matrix per user.
        config (SynthConfig): Configuration the data was drawn from.
    """
    log: InteractionLog
    item_cluster: np.ndarray
    interest_weights: np.ndarray
    per_cluster_item_weights: np.ndarray
    profiles: List[UserProfile] = field(default_factory=list)
    config: SynthConfig = field(default_factory=SynthConfig)

    def cluster_frequencies(self) -> np.ndarray:
        """Empirical share of emitted interactions that fall in each cluster."""
        counts = np.zeros(len(self.interest_weights), dtype=np.int64)
        for seq in self.log.sequences:
            counts += np.bincount(self.item_cluster[seq], minlength=len(counts))
        total = counts.sum()
        return counts / total if total else counts.astype(np.float64)


# ---------------------------------------------------------------------------
# Sampling primitives
# ---------------------------------------------------------------------------

def power_law_weights(exponent: float, n: int) -> np.ndarray:
    """
    Weights proportional to rank^(-exponent) over ranks 1..n.

    Args:
        exponent (float): Non-negative skew. 0 gives a uniform vector.
        n (int): Number of ranks.

    Returns:
        np.ndarray: float64 vector of length n summing to 1, non-increasing.

    Raises:
        InvalidConfigError: If n < 1 or exponent < 0.
    """
    if n < 1:
        raise InvalidConfigError("n", f"need at least one rank, got {n}")
    if exponent < 0:
        raise InvalidConfigError("exponent", f"must be non-negative, got {exponent}")
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = ranks ** (-float(exponent))
    return weights / weights.sum()


def sample_interest_weights(exponent: float, num_clusters: int) -> np.ndarray:
    """Cluster popularity vector pi, decreasing in cluster id for exponent > 0."""
    if num_clusters < 1:
        raise InvalidConfigError("num_clusters", f"must be >= 1, got {num_clusters}")
    return power_law_weights(exponent, num_clusters)


def assign_user_interests(pi: np.ndarray, n: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """
    Draws n distinct interest clusters without replacement, proportionally to pi.

    Args:
        pi (np.ndarray): Cluster probabilities.
        n (int): Number of interests to assign.
        rng (np.random.Generator): Random stream of the user.

    Returns:
        Tuple[int, ...]: Sorted cluster ids.

    Raises:
        InvalidConfigError: If n exceeds the number of clusters or pi cannot
            supply n distinct clusters.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if n < 1 or n > len(pi):
        raise InvalidConfigError(
            "interests_per_user", f"need 1 <= n <= {len(pi)} clusters, got {n}"
        )
    try:
        chosen = rng.choice(len(pi), size=n, replace=False, p=pi)
    except ValueError as e:
        # numpy refuses when fewer than n clusters carry non-zero mass
        raise InvalidConfigError("interest_weights", str(e)) from e
    return tuple(sorted(int(c) for c in chosen))


def build_transition_matrix(interests: Sequence[int], alpha: float, gamma: float,
                            epsilon: float, num_clusters: int) -> np.ndarray:
    """
    Builds the cluster transition matrix of one user.

    Interest rows stay with probability alpha, move to another interest with
    total mass gamma and leak the rest evenly to non-interest clusters.
    Non-interest rows stay with probability epsilon and otherwise return
    evenly to one of the user's interests. With a single interest the
    switching mass gamma folds into the self-transition.

    Args:
        interests (Sequence[int]): The user's interest clusters.
        alpha (float): Stay probability inside an interest cluster.
        gamma (float): Total probability of switching between interests.
        epsilon (float): Stay probability inside a non-interest cluster.
        num_clusters (int): C.

    Returns:
        np.ndarray: (C, C) row-stochastic float64 matrix.

    Raises:
        InvalidConfigError: On an empty interest set, out-of-range ids or
            probabilities that cannot form a stochastic matrix.
    """
    y = sorted(set(int(c) for c in interests))
    if not y:
        raise InvalidConfigError("interests", "interest set must not be empty")
    if y[0] < 0 or y[-1] >= num_clusters:
        raise InvalidConfigError("interests", f"cluster ids must lie in [0, {num_clusters})")
    if alpha + gamma > 1.0 + ROW_SUM_TOLERANCE:
        raise InvalidConfigError("alpha", "alpha + gamma must be <= 1")

    others = [c for c in range(num_clusters) if c not in set(y)]
    if not others and alpha + gamma < 1.0 - ROW_SUM_TOLERANCE:
        raise InvalidConfigError(
            "interests_per_user",
            "all clusters are interests but alpha + gamma < 1",
        )

    n_y = len(y)
    transition = np.zeros((num_clusters, num_clusters), dtype=np.float64)
    leak = (1.0 - alpha - gamma) / len(others) if others else 0.0
    for i in y:
        if n_y > 1:
            transition[i, y] = gamma / (n_y - 1)
            transition[i, i] = alpha
        else:
            transition[i, i] = alpha + gamma
        if others:
            transition[i, others] = leak
    for i in others:
        transition[i, y] = (1.0 - epsilon) / n_y
        transition[i, i] = epsilon
    return transition


def _inverse_cdf(weights: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights, axis=-1)
    cdf[..., -1] = 1.0
    return cdf


def sample_cluster_sequence(transition: np.ndarray, interests: Sequence[int], length: int,
                            rng: np.random.Generator) -> np.ndarray:
    """
    Walks the user's chain for `length` steps.

    The first state is uniform over the interest set; every later state is
    drawn from the transition row of its predecessor.
    """
    if length < 1:
        raise InvalidConfigError("seq_len", f"must be >= 1, got {length}")
    interests = list(interests)
    cdf = _inverse_cdf(np.asarray(transition, dtype=np.float64))
    last = cdf.shape[1] - 1

    states = np.empty(length, dtype=np.int64)
    states[0] = interests[int(rng.integers(len(interests)))]
    draws = rng.random(length - 1)
    for t in range(1, length):
        nxt = int(np.searchsorted(cdf[states[t - 1]], draws[t - 1], side="right"))
        states[t] = min(nxt, last)
    return states


def sample_item_sequence(clusters: np.ndarray, per_cluster_item_weights: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Draws one item per step from its cluster; item id = cluster * K + index."""
    clusters = np.asarray(clusters, dtype=np.int64)
    weights = np.asarray(per_cluster_item_weights, dtype=np.float64)
    k = weights.shape[1]
    cdf = _inverse_cdf(weights)
    draws = rng.random(len(clusters))
    within = (cdf[clusters] > draws[:, None]).argmax(axis=1)
    return clusters * k + within


# ---------------------------------------------------------------------------
# Full procedure
# ---------------------------------------------------------------------------

def generate_dataset(config: SynthConfig) -> GeneratedDataset:
    """
    Generates a dataset from `config`.

    Each user draws from its own stream seeded by (rng_seed, user_id), so the
    output is a pure function of the configuration.

    Args:
        config (SynthConfig): Generator parameters.

    Returns:
        GeneratedDataset: Interaction log plus ground truth.
    """
    c, k = config.num_clusters, config.items_per_cluster
    pi = sample_interest_weights(config.interest_exponent, c)
    item_weights = np.tile(power_law_weights(config.item_exponent, k), (c, 1))
    item_cluster = np.repeat(np.arange(c, dtype=np.int64), k)

    logger.info(
        "[Synth] Generating %d users over %d clusters x %d items (interest_exponent=%.2f, seed=%d)",
        config.num_users, c, k, config.interest_exponent, config.rng_seed,
    )

    profiles: List[UserProfile] = []
    sequences: List[np.ndarray] = []
    for user_id in range(config.num_users):
        rng = np.random.default_rng([config.rng_seed, user_id])
        interests = assign_user_interests(pi, config.interests_per_user, rng)
        transition = build_transition_matrix(
            interests, config.alpha, config.gamma, config.epsilon, c
        )
        clusters = sample_cluster_sequence(transition, interests, config.seq_len, rng)
        sequences.append(sample_item_sequence(clusters, item_weights, rng))
        profiles.append(UserProfile(user_id=user_id, interests=interests, transition=transition))

    log = InteractionLog(
        sequences=sequences,
        num_items=config.num_items,
        user_ids=[str(u) for u in range(config.num_users)],
        item_ids=[str(i) for i in range(config.num_items)],
    )
    return GeneratedDataset(
        log=log,
        item_cluster=item_cluster,
        interest_weights=pi,
        per_cluster_item_weights=item_weights,
        profiles=profiles,
        config=config,
    )


def write_dataset(dataset: GeneratedDataset, directory: str) -> List[str]:
    """
    Writes the interactions, ground truth and config echo into `directory`.

    Returns:
        List[str]: Paths of the files written.
    """
    os.makedirs(directory, exist_ok=True)
    interactions_path = os.path.join(directory, "interactions.tsv")
    truth_path = os.path.join(directory, "ground_truth.tsv")
    config_path = os.path.join(directory, "synth_config.json")

    with open(interactions_path, "w", encoding="utf-8") as f:
        for user_id, seq in zip(dataset.log.user_ids, dataset.log.sequences):
            for position, item in enumerate(seq):
                f.write(f"{user_id}\t{int(item)}\t{position}\n")
    with open(truth_path, "w", encoding="utf-8") as f:
        for item, cluster in enumerate(dataset.item_cluster):
            f.write(f"{item}\t{int(cluster)}\n")
    with open(config_path, "w", encoding="utf-8") as f:
        f.write(dataset.config.model_dump_json(indent=2))

    logger.info("[Synth] Wrote %d interactions to %s", dataset.log.num_interactions, directory)
    return [interactions_path, truth_path, config_path]


def head_tail_clusters(interest_weights: np.ndarray, head_clusters: int = 2) -> Tuple[List[int], List[int]]:
    """
    Splits clusters into the `head_clusters` most popular ones and the rest.

    Ties keep the lower cluster id first.
    """
    order = np.argsort(-np.asarray(interest_weights, dtype=np.float64), kind="stable")
    head = sorted(int(c) for c in order[:head_clusters])
    tail = sorted(int(c) for c in order[head_clusters:])
    return head, tail
