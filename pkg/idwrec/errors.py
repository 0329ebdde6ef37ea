"""
idwrec/errors.py
----------------
Exception hierarchy shared by every idwrec module.

Each exception keeps the values that caused it as attributes so callers (and
the CLI's exit-code mapping) can inspect them without parsing messages.
"""

from __future__ import annotations

from typing import Iterable, Optional


class IdwrecError(Exception):
    """Base class for all errors raised by idwrec."""


class InvalidConfigError(IdwrecError, ValueError):
    """
    A configuration value violates one of its invariants.

    Attributes:
        field (str): Name of the offending configuration field.
    """
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"Invalid value for '{field}': {message}")


class ParseError(IdwrecError, ValueError):
    """
    A row of an interaction file could not be parsed.

    Attributes:
        path (str): File being read.
        line_number (int): 1-based line number of the bad row.
    """
    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class EmptyInputError(IdwrecError, ValueError):
    """An input file or collection held no usable rows."""


class InvalidStatsError(IdwrecError, ValueError):
    """
    Item statistics cannot support the requested computation.

    Attributes:
        item_ids (list[int]): Items with a zero sampling probability.
    """
    def __init__(self, item_ids: Iterable[int]):
        self.item_ids = sorted(int(i) for i in item_ids)
        preview = self.item_ids[:10]
        super().__init__(
            f"Sampling probability is zero for {len(self.item_ids)} batch label(s), e.g. {preview}"
        )


class DegenerateBatchError(IdwrecError, ValueError):
    """A batch too small to provide in-batch negatives."""


class EmptyContextError(IdwrecError, ValueError):
    """A user context without a single real item."""


class TrainingDivergedError(IdwrecError, RuntimeError):
    """
    The training loss became NaN or infinite.

    Attributes:
        epoch (int): Epoch index (1-based) where divergence was detected.
        step (int): Step index within the epoch (1-based).
        loss (float): Offending loss value.
        iteration (Optional[int]): IDW iteration, when raised inside a wake phase.
    """
    def __init__(self, epoch: int, step: int, loss: float, iteration: Optional[int] = None):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        self.iteration = iteration
        where = f"epoch {epoch}, step {step}"
        if iteration is not None:
            where = f"IDW iteration {iteration}, {where}"
        super().__init__(f"Training diverged at {where} (loss={loss})")


class ProtocolError(IdwrecError, ValueError):
    """
    The evaluation protocol cannot be satisfied for a user.

    Attributes:
        owner (int): User whose candidate pool is too small.
        available (int): Number of eligible negative items.
        requested (int): Number of negatives asked for.
    """
    def __init__(self, owner: int, available: int, requested: int):
        self.owner = owner
        self.available = available
        self.requested = requested
        super().__init__(
            f"User {owner} has only {available} eligible negatives, {requested} requested"
        )


class UndefinedMetricError(IdwrecError, ValueError):
    """A metric is undefined for the given input (e.g. silhouette with one cluster)."""
