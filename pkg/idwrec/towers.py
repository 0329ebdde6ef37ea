"""
idwrec/towers.py
----------------
The two-tower retrieval model.

Item tower : embedding table followed by an MLP of width d.
User tower : item embeddings plus learned positions, a pre-norm
             self-attention encoder over the non-padding positions, and M
             learned global queries that pool the encoder states into M
             user representations (M = 1 is the single-representation model).

Scoring mixes the M dot products with a softmax over representations, and
training uses an in-batch softmax whose logits are LogQ-corrected by the
train-label frequency of every candidate.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Literal, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from torch import nn

from idwrec.dataset import DEFAULT_MAX_LEN, ExampleSet
from idwrec.errors import DegenerateBatchError, EmptyContextError, InvalidStatsError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-8
DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TowerConfig(BaseModel):
    """Shape and initialisation of both towers."""
    model_config = {'protected_namespaces': ()}

    embed_dim: int = Field(16, ge=1)
    num_reps: int = Field(5, ge=1)
    encoder_layers: int = Field(2, ge=0)
    attention_heads: int = Field(4, ge=1)
    mlp_layers: int = Field(2, ge=1)
    max_len: int = Field(DEFAULT_MAX_LEN, ge=1)
    share_embeddings: bool = False
    norm: Literal["layer", "rms"] = "layer"
    dtype: Literal["float32", "float64"] = "float32"
    rng_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_heads(self) -> "TowerConfig":
        if self.embed_dim % self.attention_heads != 0:
            raise ValueError(
                f"embed_dim ({self.embed_dim}) must be divisible by "
                f"attention_heads ({self.attention_heads})."
            )
        return self


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class ItemTower(nn.Module):
    """Embedding lookup followed by Linear/ReLU layers (no ReLU after the last)."""

    def __init__(self, num_items: int, config: TowerConfig):
        super().__init__()
        d = config.embed_dim
        self.embedding = nn.Embedding(num_items, d)
        self.mlp = nn.ModuleList([nn.Linear(d, d) for _ in range(config.mlp_layers)])

    def forward(self, item_ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(item_ids)
        for i, layer in enumerate(self.mlp):
            x = layer(x)
            if i < len(self.mlp) - 1:
                x = torch.relu(x)
        return x


def make_norm(embed_dim: int, kind: str) -> nn.Module:
    """LayerNorm, or RMSNorm for d=2 towers where centring leaves only the (x, -x) line."""
    if kind == "rms":
        return nn.RMSNorm(embed_dim, eps=LAYER_NORM_EPS)
    return nn.LayerNorm(embed_dim, eps=LAYER_NORM_EPS)


class SelfAttentionBlock(nn.Module):
    """Pre-norm block: norm -> multi-head attention -> residual, norm -> FFN -> residual."""

    def __init__(self, embed_dim: int, num_heads: int, norm: str = "layer"):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.attn_norm = make_norm(embed_dim, norm)
        self.query = nn.Linear(embed_dim, embed_dim)
        self.key = nn.Linear(embed_dim, embed_dim)
        self.value = nn.Linear(embed_dim, embed_dim)
        self.output = nn.Linear(embed_dim, embed_dim)
        self.ffn_norm = make_norm(embed_dim, norm)
        self.ffn_in = nn.Linear(embed_dim, embed_dim)
        self.ffn_out = nn.Linear(embed_dim, embed_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        y = self.attn_norm(x)
        q, k, v = self._split(self.query(y)), self._split(self.key(y)), self._split(self.value(y))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~valid_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.output(ctx)
        y = self.ffn_norm(x)
        return x + self.ffn_out(torch.relu(self.ffn_in(y)))


class UserTower(nn.Module):
    """Sequence encoder plus M global query vectors."""

    def __init__(self, num_items: int, config: TowerConfig):
        super().__init__()
        d = config.embed_dim
        self.share_embeddings = config.share_embeddings
        if config.share_embeddings:
            self.embedding = None
            self.register_buffer("pad_row", torch.zeros(1, d))
        else:
            # last row is the padding id
            self.embedding = nn.Embedding(num_items + 1, d)
        self.position = nn.Parameter(torch.zeros(config.max_len, d))
        self.blocks = nn.ModuleList(
            [SelfAttentionBlock(d, config.attention_heads, config.norm) for _ in range(config.encoder_layers)]
        )
        self.final_norm = make_norm(d, config.norm)
        self.queries = nn.Parameter(torch.zeros(config.num_reps, d))

    def embed(self, context: torch.Tensor, item_table: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.share_embeddings:
            table = torch.cat([item_table, self.pad_row], dim=0)
        else:
            table = self.embedding.weight
        return F.embedding(context, table) + self.position[: context.shape[1]]

    def encode(self, context: torch.Tensor, valid_mask: torch.Tensor,
               item_table: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.embed(context, item_table)
        for block in self.blocks:
            x = block(x, valid_mask)
        h = self.final_norm(x)
        return h * valid_mask.unsqueeze(-1).to(h.dtype)

    def pool(self, h: torch.Tensor, valid_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        scores = torch.einsum("md,bnd->bmn", self.queries, h)
        scores = scores.masked_fill(~valid_mask[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return torch.einsum("bmn,bnd->bmd", attn, h), attn


class TwoTowerModel(nn.Module):
    """
    Item tower and user tower with a shared item-id space.

    Attributes:
        num_items (int): Catalog size; id `num_items` is the padding id.
        config (TowerConfig): Shapes and seed.
    """

    def __init__(self, num_items: int, config: TowerConfig):
        super().__init__()
        self.num_items = num_items
        self.config = config
        self.item_tower = ItemTower(num_items, config)
        self.user_tower = UserTower(num_items, config)
        self.to(DTYPES[config.dtype])
        initialize_parameters(self, config.rng_seed)

    @property
    def pad_id(self) -> int:
        return self.num_items

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.config.dtype]

    def item_forward(self, item_ids: torch.Tensor, normalize: bool = False) -> torch.Tensor:
        """
        Item representations v = MLP(embedding[id]).

        Raises:
            IndexError: If any id lies outside [0, num_items).
        """
        item_ids = torch.as_tensor(item_ids, dtype=torch.long)
        if item_ids.numel() and (int(item_ids.min()) < 0 or int(item_ids.max()) >= self.num_items):
            raise IndexError(f"Item id out of range [0, {self.num_items})")
        v = self.item_tower(item_ids)
        return F.normalize(v, dim=-1) if normalize else v

    def all_item_representations(self, normalize: bool = False) -> torch.Tensor:
        return self.item_forward(torch.arange(self.num_items), normalize=normalize)

    def valid_mask(self, context: torch.Tensor, valid_len: torch.Tensor) -> torch.Tensor:
        valid_len = torch.as_tensor(valid_len, dtype=torch.long)
        if valid_len.numel() and int(valid_len.min()) < 1:
            raise EmptyContextError("Every context needs at least one real item (valid_len >= 1)")
        if valid_len.numel() and int(valid_len.max()) > context.shape[1]:
            raise ValueError(f"valid_len exceeds the context length {context.shape[1]}")
        return torch.arange(context.shape[1])[None, :] < valid_len[:, None]

    def user_encode(self, context: torch.Tensor, valid_len: torch.Tensor) -> torch.Tensor:
        """
        Encoder states (B, L, d); padding positions are masked out of attention
        and zeroed in the output.

        Raises:
            EmptyContextError: If any valid_len is 0.
        """
        context = torch.as_tensor(context, dtype=torch.long)
        mask = self.valid_mask(context, valid_len)
        table = self.item_tower.embedding.weight if self.config.share_embeddings else None
        return self.user_tower.encode(context, mask, table)

    def extract_interests(self, h: torch.Tensor, valid_len: torch.Tensor,
                          return_attention: bool = False):
        """Pools encoder states into M representations (B, M, d)."""
        mask = torch.arange(h.shape[1])[None, :] < torch.as_tensor(valid_len, dtype=torch.long)[:, None]
        z, attn = self.user_tower.pool(h, mask)
        return (z, attn) if return_attention else z

    def user_representations(self, context: torch.Tensor, valid_len: torch.Tensor) -> torch.Tensor:
        return self.extract_interests(self.user_encode(context, valid_len), valid_len)

    def forward(self, context: torch.Tensor, valid_len: torch.Tensor,
                labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.user_representations(context, valid_len), self.item_forward(labels)


def initialize_parameters(model: nn.Module, seed: int) -> None:
    """
    Seeded init: uniform(-1/sqrt(d), 1/sqrt(d)) for embeddings, linear maps,
    positions and queries; zero biases; unit norm scales.
    """
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.LayerNorm, nn.RMSNorm)):
                module.weight.fill_(1.0)
                if getattr(module, "bias", None) is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                bound = 1.0 / math.sqrt(module.embedding_dim)
                module.weight.uniform_(-bound, bound, generator=generator)
            elif isinstance(module, UserTower):
                bound = 1.0 / math.sqrt(module.queries.shape[1])
                module.position.uniform_(-bound, bound, generator=generator)
                module.queries.uniform_(-bound, bound, generator=generator)


def build_model(num_items: int, config: TowerConfig) -> TwoTowerModel:
    model = TwoTowerModel(num_items, config)
    logger.info("[Towers] Built model: %d items, d=%d, M=%d, %d parameters",
                num_items, config.embed_dim, config.num_reps,
                sum(p.numel() for p in model.parameters()))
    return model


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score(z_set: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    Affinity of representation sets (..., M, d) with items (..., d).

    s = sum_m softmax_m(z_m . v) * (z_m . v), a convex combination of the M
    dot products.
    """
    dots = (z_set * v.unsqueeze(-2)).sum(-1)
    return (torch.softmax(dots, dim=-1) * dots).sum(-1)


def score_matrix(z_set: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    """Scores of every user (B, M, d) against every item (C, d) -> (B, C)."""
    dots = torch.einsum("bmd,cd->bmc", z_set, items)
    return (torch.softmax(dots, dim=1) * dots).sum(1)


def score_candidates(z_set: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Scores of each user (B, M, d) against its own candidates (B, C, d) -> (B, C)."""
    dots = torch.einsum("bmd,bcd->bmc", z_set, candidates)
    return (torch.softmax(dots, dim=1) * dots).sum(1)


def logq_correct(logits: torch.Tensor, probabilities: torch.Tensor,
                 item_ids: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Subtracts log p(y) from every candidate column.

    Raises:
        InvalidStatsError: If any column has p(y) <= 0.
    """
    probabilities = torch.as_tensor(probabilities, dtype=logits.dtype)
    bad = probabilities <= 0
    if bool(bad.any()):
        ids = item_ids[bad] if item_ids is not None else torch.nonzero(bad).flatten()
        raise InvalidStatsError(ids.tolist())
    return logits - torch.log(probabilities)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class ScoredBatch:
    """
    One forward pass of the in-batch softmax.

    Attributes:
        user_reps (torch.Tensor): (B, M, d) user representations.
        item_reps (torch.Tensor): (B, d) representations of the batch labels.
        logits (torch.Tensor): (B, B) corrected and masked logits (float64).
        loss (torch.Tensor): Scalar mean of the weighted per-example losses.
        per_example_loss (torch.Tensor): (B,) weighted losses.
        example_weights (torch.Tensor): (B,) weights applied.
    """
    user_reps: torch.Tensor
    item_reps: torch.Tensor
    logits: torch.Tensor
    loss: torch.Tensor
    per_example_loss: torch.Tensor
    example_weights: torch.Tensor


def softmax_loss(logits: torch.Tensor, labels: torch.Tensor, label_probabilities: torch.Tensor,
                 example_weights: Optional[torch.Tensor] = None, focal_gamma: Optional[float] = None,
                 label_margins: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Weighted in-batch softmax loss from a raw (B, B) logit matrix.

    Column j holds the score of example j's label. Columns whose label equals
    the row's own label (other than the diagonal) are masked out. Optional
    margins are subtracted from the true-label logit and an optional focal
    factor (1 - p)^gamma scales each example.

    Args:
        logits (torch.Tensor): (B, B) raw scores.
        labels (torch.Tensor): (B,) label ids.
        label_probabilities (torch.Tensor): (B,) p(y) of each label.
        example_weights (Optional[torch.Tensor]): (B,) non-negative weights.
        focal_gamma (Optional[float]): Focal exponent; None disables.
        label_margins (Optional[torch.Tensor]): (B,) margin per example.

    Returns:
        Tuple: (loss, per_example_loss, corrected_logits), all float64.
    """
    b = logits.shape[0]
    if b < 2:
        raise DegenerateBatchError(f"In-batch softmax needs at least 2 examples, got {b}")
    logits = logits.to(torch.float64)
    corrected = logq_correct(logits, label_probabilities.to(torch.float64), labels)

    eye = torch.eye(b, dtype=torch.bool)
    duplicates = (labels[:, None] == labels[None, :]) & ~eye
    corrected = corrected.masked_fill(duplicates, float("-inf"))
    if label_margins is not None:
        corrected = corrected - torch.diag(label_margins.to(torch.float64))

    true_log_prob = torch.diagonal(torch.log_softmax(corrected, dim=1))
    nll = -true_log_prob
    if focal_gamma:
        nll = (1.0 - torch.exp(true_log_prob)) ** focal_gamma * nll

    if example_weights is None:
        example_weights = torch.ones(b, dtype=torch.float64)
    per_example = example_weights.to(torch.float64) * nll
    return per_example.mean(), per_example, corrected


def batch_softmax_loss(model: TwoTowerModel, context: torch.Tensor, valid_len: torch.Tensor,
                       labels: torch.Tensor, sampling_probabilities: torch.Tensor,
                       example_weights: Optional[torch.Tensor] = None,
                       focal_gamma: Optional[float] = None,
                       item_margins: Optional[torch.Tensor] = None,
                       normalize_items: bool = False) -> ScoredBatch:
    """
    Forward pass and LogQ-corrected in-batch softmax loss for one batch.

    Args:
        model (TwoTowerModel): Towers to score with.
        context (torch.Tensor): (B, L) padded contexts.
        valid_len (torch.Tensor): (B,) real items per context.
        labels (torch.Tensor): (B,) next-item labels (also the candidates).
        sampling_probabilities (torch.Tensor): p(y) for every item id.
        example_weights (Optional[torch.Tensor]): (B,) per-example weights.
        focal_gamma (Optional[float]): Focal exponent.
        item_margins (Optional[torch.Tensor]): Margin for every item id.
        normalize_items (bool): L2-normalise item representations.

    Returns:
        ScoredBatch: Representations, corrected logits and loss.

    Raises:
        DegenerateBatchError: If the batch has fewer than 2 examples.
        InvalidStatsError: If a batch label has p(y) = 0.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape[0] < 2:
        raise DegenerateBatchError(f"In-batch softmax needs at least 2 examples, got {labels.shape[0]}")
    z = model.user_representations(context, valid_len)
    v = model.item_forward(labels, normalize=normalize_items)
    logits = score_matrix(z, v)

    probabilities = torch.as_tensor(sampling_probabilities, dtype=torch.float64)[labels]
    margins = torch.as_tensor(item_margins)[labels] if item_margins is not None else None
    loss, per_example, corrected = softmax_loss(
        logits, labels, probabilities, example_weights, focal_gamma, margins
    )
    weights = per_example.new_ones(labels.shape[0]) if example_weights is None else example_weights
    return ScoredBatch(z, v, corrected, loss, per_example, weights)


def loss_and_gradients(model: TwoTowerModel, context: torch.Tensor, valid_len: torch.Tensor,
                       labels: torch.Tensor, sampling_probabilities: torch.Tensor,
                       **kwargs: Any) -> Tuple[float, Dict[str, torch.Tensor]]:
    """The batch loss and its exact gradient for every named parameter."""
    batch = batch_softmax_loss(model, context, valid_len, labels, sampling_probabilities, **kwargs)
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(batch.loss, params, allow_unused=True)
    return float(batch.loss), {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, params, grads)
    }


def to_tensors(examples: ExampleSet, indices: Optional[np.ndarray] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(contexts, valid_lens, labels) as long tensors, optionally for a subset of rows."""
    if indices is None:
        indices = np.arange(len(examples))
    return (torch.from_numpy(examples.contexts[indices]),
            torch.from_numpy(examples.valid_lens[indices]),
            torch.from_numpy(examples.labels[indices]))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: TwoTowerModel, normalize_items_eval: bool = False) -> None:
    """Writes config, catalog size, evaluation normalisation flag and weights."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "config": model.config.model_dump(),
        "num_items": model.num_items,
        "normalize_items_eval": normalize_items_eval,
        "state_dict": model.state_dict(),
    }, path)
    logger.info("[Towers] Saved checkpoint to %s", path)


def load_checkpoint(path: str) -> Tuple[TwoTowerModel, bool]:
    """
    Restores a model saved by save_checkpoint().

    Returns:
        Tuple[TwoTowerModel, bool]: The model and its evaluation-time item
        normalisation flag.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = TwoTowerModel(int(payload["num_items"]), TowerConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, bool(payload.get("normalize_items_eval", False))


def export_item_representations(model: TwoTowerModel, path: str, normalize: bool = False,
                                item_ids: Optional[list] = None) -> None:
    """Writes `item_id,<d floats>` rows; raw ids are used when given."""
    with torch.no_grad():
        reps = model.all_item_representations(normalize=normalize).to(torch.float64).numpy()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item_id"] + [f"dim_{i}" for i in range(reps.shape[1])])
        for idx, row in enumerate(reps):
            label = item_ids[idx] if item_ids is not None else idx
            writer.writerow([label] + [repr(float(x)) for x in row])
