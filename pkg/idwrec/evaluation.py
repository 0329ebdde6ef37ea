"""
idwrec/evaluation.py
--------------------
Sampled-negative retrieval metrics and clustering quality.

Each evaluated example ranks its label against `num_negatives` items the
user never interacted with. Negatives are fixed per (user, protocol seed)
so a checkpoint evaluated twice with the same protocol gives identical
numbers. Results are averaged over every protocol seed and broken down by
item group (overall, head, tail).
"""

from __future__ import annotations

import csv
import logging
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator, model_validator
from sklearn.metrics import silhouette_score

from idwrec.dataset import ExampleSet
from idwrec.distances import pairwise_euclidean
from idwrec.errors import ProtocolError, UndefinedMetricError
from idwrec.towers import TwoTowerModel, score_candidates

logger = logging.getLogger(__name__)

OVERALL = "overall"
ArrayOrInt = Union[int, np.ndarray]


# ---------------------------------------------------------------------------
# Protocol and report models
# ---------------------------------------------------------------------------

class EvalProtocol(BaseModel):
    """Cutoffs, negative count and seeds of the sampled-negative protocol."""
    model_config = {'protected_namespaces': ()}

    k_values: List[int] = [5, 20]
    num_negatives: int = Field(99, ge=1)
    seeds: List[int] = [0, 1, 2]
    exclude_history: bool = True
    batch_size: int = Field(1024, ge=1)

    @field_validator("k_values")
    @classmethod
    def validate_k_values(cls, v: List[int]) -> List[int]:
        if not v or any(k < 1 for k in v):
            raise ValueError("k_values must be a non-empty list of positive integers.")
        return sorted(set(v))

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        if not v or any(s < 0 for s in v):
            raise ValueError("seeds must be a non-empty list of non-negative integers.")
        return v

    @model_validator(mode="after")
    def check_cutoffs(self) -> "EvalProtocol":
        if max(self.k_values) > self.num_negatives + 1:
            raise ValueError(
                f"k={max(self.k_values)} exceeds the {self.num_negatives + 1} candidates per example."
            )
        return self


class MetricEntry(BaseModel):
    split: str
    k: int
    hr: float
    hr_std: float
    ndcg: float
    ndcg_std: float
    num_examples: int


class MetricsReport(BaseModel):
    """HR/NDCG per (group, K) plus the mean silhouette of item representations."""
    entries: List[MetricEntry] = []
    absent: List[str] = []
    ms_score: Optional[float] = None
    num_seeds: int = 0

    def get(self, split: str, k: int) -> Optional[MetricEntry]:
        for entry in self.entries:
            if entry.split == split and entry.k == k:
                return entry
        return None

    def flat(self) -> Dict[str, float]:
        """{'overall/hr@20': ..., 'ms': ...} view used by sweeps and reports."""
        out: Dict[str, float] = {}
        for e in self.entries:
            out[f"{e.split}/hr@{e.k}"] = e.hr
            out[f"{e.split}/ndcg@{e.k}"] = e.ndcg
        if self.ms_score is not None:
            out["ms"] = self.ms_score
        return out


# ---------------------------------------------------------------------------
# Metric primitives
# ---------------------------------------------------------------------------

def hr_at_k(rank: ArrayOrInt, k: int) -> ArrayOrInt:
    """1 when the label is within the top k, else 0."""
    hit = np.asarray(rank) <= k
    return hit.astype(np.float64) if hit.ndim else int(hit)


def ndcg_at_k(rank: ArrayOrInt, k: int) -> ArrayOrInt:
    """1/log2(rank + 1) within the cutoff, 0 outside (single relevant item)."""
    rank = np.asarray(rank, dtype=np.float64)
    gain = np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)
    return gain if gain.ndim else float(gain)


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """
    1-based label ranks for rows of candidate scores with the label in column 0.

    Negatives scoring equal to the label rank above it.
    """
    scores = np.asarray(scores)
    return 1 + (scores[:, 1:] >= scores[:, :1]).sum(axis=1)


def sample_negatives(history: np.ndarray, num_items: int, n: int, rng: np.random.Generator,
                     label: Optional[int] = None, owner: int = -1) -> np.ndarray:
    """
    Draws n distinct items outside `history` (and the label).

    Raises:
        ProtocolError: If fewer than n items are eligible.
    """
    excluded = np.asarray(history, dtype=np.int64)
    if label is not None:
        excluded = np.append(excluded, label)
    pool = np.setdiff1d(np.arange(num_items, dtype=np.int64), excluded)
    if len(pool) < n:
        raise ProtocolError(owner, len(pool), n)
    return rng.choice(pool, size=n, replace=False)


def negatives_for_examples(examples: ExampleSet, histories: Mapping[int, np.ndarray],
                           num_items: int, protocol: EvalProtocol, seed: int) -> np.ndarray:
    """(N, num_negatives) negatives, shared by all examples of one user."""
    per_owner: Dict[int, np.ndarray] = {}
    out = np.empty((len(examples), protocol.num_negatives), dtype=np.int64)
    for row in range(len(examples)):
        owner = int(examples.owners[row])
        if owner not in per_owner:
            if protocol.exclude_history:
                excluded = histories.get(owner, np.empty(0, dtype=np.int64))
            else:
                excluded = examples.labels[examples.owners == owner]
            rng = np.random.default_rng([seed, owner])
            per_owner[owner] = sample_negatives(excluded, num_items, protocol.num_negatives,
                                                rng, label=int(examples.labels[row]), owner=owner)
        out[row] = per_owner[owner]
    return out


def rank_of_label(model: TwoTowerModel, z_set: torch.Tensor, label: int,
                  negatives: Sequence[int], normalize_items: bool = False) -> int:
    """Rank of `label` among itself and `negatives` for one user's representations (M, d)."""
    candidates = torch.as_tensor([label] + [int(n) for n in negatives], dtype=torch.long)
    with torch.no_grad():
        v = model.item_forward(candidates, normalize=normalize_items).to(torch.float64)
        scores = score_candidates(z_set.to(torch.float64)[None], v[None])
    return int(ranks_from_scores(scores.numpy())[0])


def mean_silhouette(representations: np.ndarray, clusters: np.ndarray) -> float:
    """
    Mean silhouette of `representations` against ground-truth `clusters`
    under Euclidean distance.

    Singleton clusters score 0, and points whose intra- and nearest
    inter-cluster distances are both 0 score 0.

    Raises:
        UndefinedMetricError: With fewer than two clusters.
    """
    clusters = np.asarray(clusters)
    n_labels = len(np.unique(clusters))
    if n_labels < 2:
        raise UndefinedMetricError(f"Silhouette needs at least 2 clusters, got {n_labels}")
    if n_labels == len(clusters):
        return 0.0
    distances = pairwise_euclidean(representations, representations)
    return float(silhouette_score(distances, clusters, metric="precomputed"))


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------

def _user_representations(model: TwoTowerModel, examples: ExampleSet, batch_size: int) -> torch.Tensor:
    chunks = []
    for start in range(0, len(examples), batch_size):
        ctx = torch.from_numpy(examples.contexts[start:start + batch_size])
        lens = torch.from_numpy(examples.valid_lens[start:start + batch_size])
        chunks.append(model.user_representations(ctx, lens).to(torch.float64))
    return torch.cat(chunks)


def compute_ranks(model: TwoTowerModel, examples: ExampleSet, histories: Mapping[int, np.ndarray],
                  num_items: int, protocol: EvalProtocol, seed: int,
                  normalize_items: bool = False) -> np.ndarray:
    """Label rank of every example under the negatives of `seed`."""
    negatives = negatives_for_examples(examples, histories, num_items, protocol, seed)
    candidates = np.concatenate([examples.labels[:, None], negatives], axis=1)
    ranks = np.empty(len(examples), dtype=np.int64)
    with torch.no_grad():
        items = model.all_item_representations(normalize=normalize_items).to(torch.float64)
        z = _user_representations(model, examples, protocol.batch_size)
        for start in range(0, len(examples), protocol.batch_size):
            rows = slice(start, start + protocol.batch_size)
            cand = torch.from_numpy(candidates[rows])
            scores = score_candidates(z[rows], items[cand])
            ranks[rows] = ranks_from_scores(scores.numpy())
    return ranks


def evaluate(model: TwoTowerModel, examples: ExampleSet, histories: Mapping[int, np.ndarray],
             num_items: int, protocol: EvalProtocol,
             groups: Optional[Mapping[str, FrozenSet[int]]] = None,
             normalize_items: bool = False, item_clusters: Optional[np.ndarray] = None,
             return_ranks: bool = False) -> Union[MetricsReport, Tuple[MetricsReport, np.ndarray]]:
    """
    HR@K and NDCG@K of `examples`, overall and per label group.

    Args:
        model (TwoTowerModel): Model to evaluate (read-only).
        examples (ExampleSet): Validation or test split.
        histories (Mapping[int, np.ndarray]): Full item history per user.
        num_items (int): Catalog size.
        protocol (EvalProtocol): Cutoffs, negatives and seeds.
        groups (Optional[Mapping[str, FrozenSet[int]]]): Named label groups,
            e.g. head and tail. An empty group is reported as absent.
        normalize_items (bool): L2-normalise item representations.
        item_clusters (Optional[np.ndarray]): Ground-truth cluster per item;
            when given the report carries the mean silhouette (items with a
            negative cluster id are skipped).
        return_ranks (bool): Also return the ranks under the first seed.

    Returns:
        MetricsReport, or (MetricsReport, ranks) when return_ranks is set.
    """
    was_training = model.training
    model.eval()
    masks: Dict[str, np.ndarray] = {OVERALL: np.ones(len(examples), dtype=bool)}
    for name, members in (groups or {}).items():
        masks[name] = np.isin(examples.labels, np.fromiter(members, dtype=np.int64, count=len(members)))

    report = MetricsReport(num_seeds=len(protocol.seeds))
    report.absent = [name for name, m in masks.items() if not m.any()]
    present = {name: m for name, m in masks.items() if m.any()}

    first_ranks = np.empty(0, dtype=np.int64)
    per_seed: Dict[Tuple[str, int], List[Tuple[float, float]]] = {}
    if present:
        for i, seed in enumerate(protocol.seeds):
            ranks = compute_ranks(model, examples, histories, num_items, protocol, seed, normalize_items)
            if i == 0:
                first_ranks = ranks
            for name, mask in present.items():
                for k in protocol.k_values:
                    per_seed.setdefault((name, k), []).append(
                        (float(hr_at_k(ranks[mask], k).mean()), float(ndcg_at_k(ranks[mask], k).mean()))
                    )

    for (name, k), values in per_seed.items():
        arr = np.asarray(values)
        report.entries.append(MetricEntry(
            split=name, k=k,
            hr=float(arr[:, 0].mean()), hr_std=float(arr[:, 0].std()),
            ndcg=float(arr[:, 1].mean()), ndcg_std=float(arr[:, 1].std()),
            num_examples=int(present[name].sum()),
        ))

    if item_clusters is not None:
        report.ms_score = item_silhouette(model, item_clusters)

    if was_training:
        model.train()
    for name in report.absent:
        logger.info("[Eval] Group '%s' has no examples; reported as absent", name)
    return (report, first_ranks) if return_ranks else report


def item_silhouette(model: TwoTowerModel, item_clusters: np.ndarray) -> float:
    """Mean silhouette of the item tower's representations against ground truth."""
    item_clusters = np.asarray(item_clusters)
    known = item_clusters >= 0
    with torch.no_grad():
        reps = model.all_item_representations().to(torch.float64).numpy()
    return mean_silhouette(reps[known], item_clusters[known])


def write_rank_csv(path: str, examples: ExampleSet, ranks: np.ndarray,
                   user_ids: Optional[Sequence[str]] = None) -> None:
    """Writes `user_id,label,rank` for every example."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["user_id", "label", "rank"])
        for owner, label, rank in zip(examples.owners, examples.labels, ranks):
            user = user_ids[int(owner)] if user_ids is not None else int(owner)
            writer.writerow([user, int(label), int(rank)])
