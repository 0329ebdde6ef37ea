"""
idwrec/dataset.py
-----------------
Interaction ingestion, window construction, leave-one-out splitting and
item statistics.

Every loader returns an InteractionLog with dense user and item ids. Item id
`num_items` is reserved as the padding id of every context window.

Loaders
-------
ingest_tsv(path)          – `user<TAB>item<TAB>position-or-timestamp`.
ingest_movielens(path)    – MovieLens `ratings.dat` (`user::item::rating::ts`).
ingest_amazon_json(path)  – Amazon review JSON lines, optionally gzip-compressed.
"""

from __future__ import annotations

import gzip
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from idwrec.errors import EmptyInputError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 30
MIN_SEQUENCE_LEN = 3
HEAD_FRACTION = 0.2


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class InteractionLog:
    """
    Per-user chronological item sequences.

    Attributes:
        sequences (List[np.ndarray]): Dense item ids per dense user id.
        num_items (int): Vocabulary size |I|.
        user_ids (List[str]): Raw user id of every dense user id.
        item_ids (List[str]): Raw item id of every dense item id.
    """
    sequences: List[np.ndarray]
    num_items: int
    user_ids: List[str] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))


@dataclass(frozen=True)
class SequenceExample:
    context: Tuple[int, ...]
    valid_len: int
    label: int
    owner: int


@dataclass
class ExampleSet:
    """
    Column-oriented collection of SequenceExamples.

    Contexts are left-aligned: the first `valid_len` entries are real items
    in chronological order and every later entry holds `pad_id`.
    """
    contexts: np.ndarray
    valid_lens: np.ndarray
    labels: np.ndarray
    owners: np.ndarray
    pad_id: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.contexts.shape[1])

    def example(self, index: int) -> SequenceExample:
        return SequenceExample(
            context=tuple(int(i) for i in self.contexts[index]),
            valid_len=int(self.valid_lens[index]),
            label=int(self.labels[index]),
            owner=int(self.owners[index]),
        )

    def subset(self, indices: Sequence[int]) -> "ExampleSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ExampleSet(
            contexts=self.contexts[idx],
            valid_lens=self.valid_lens[idx],
            labels=self.labels[idx],
            owners=self.owners[idx],
            pad_id=self.pad_id,
        )

    @classmethod
    def empty(cls, max_len: int, pad_id: int) -> "ExampleSet":
        return cls(
            contexts=np.empty((0, max_len), dtype=np.int64),
            valid_lens=np.empty(0, dtype=np.int64),
            labels=np.empty(0, dtype=np.int64),
            owners=np.empty(0, dtype=np.int64),
            pad_id=pad_id,
        )


@dataclass
class DatasetSplits:
    """Leave-one-out splits plus every user's full interaction history."""
    train: ExampleSet
    validation: ExampleSet
    test: ExampleSet
    user_histories: Dict[int, np.ndarray]
    num_items: int


@dataclass
class ItemStats:
    """
    Train-label statistics.

    Attributes:
        counts (np.ndarray): n_y per item id.
        probabilities (np.ndarray): n_y / sum(n); zero for unseen items.
        head_set (FrozenSet[int]): Most frequent items.
        tail_set (FrozenSet[int]): Remaining items with n_y > 0.
    """
    counts: np.ndarray
    probabilities: np.ndarray
    head_set: FrozenSet[int] = frozenset()
    tail_set: FrozenSet[int] = frozenset()

    @property
    def num_items(self) -> int:
        return int(self.counts.shape[0])


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _dense_order(raw_ids: Iterable[str]) -> List[str]:
    """Sorted unique raw ids; numeric order when every id is an integer."""
    unique = set(raw_ids)
    try:
        return sorted(unique, key=int)
    except ValueError:
        return sorted(unique)


def _write_id_map(path: str, raw_ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for dense, raw in enumerate(raw_ids):
            f.write(f"{raw}\t{dense}\n")


def _build_log(records: List[Tuple[str, str, float]], source: str,
               map_dir: Optional[str] = None) -> InteractionLog:
    """Groups (user, item, order) records into dense per-user sequences."""
    if not records:
        raise EmptyInputError(f"No interactions found in {source}")

    user_order = _dense_order(r[0] for r in records)
    item_order = _dense_order(r[1] for r in records)
    user_index = {raw: i for i, raw in enumerate(user_order)}
    item_index = {raw: i for i, raw in enumerate(item_order)}

    per_user: List[List[Tuple[float, int]]] = [[] for _ in user_order]
    for user, item, order in records:
        per_user[user_index[user]].append((order, item_index[item]))

    # sort() is stable, so equal order keys keep file order
    sequences = []
    for rows in per_user:
        rows.sort(key=lambda r: r[0])
        sequences.append(np.fromiter((item for _, item in rows), dtype=np.int64, count=len(rows)))

    log = InteractionLog(
        sequences=sequences,
        num_items=len(item_order),
        user_ids=list(user_order),
        item_ids=list(item_order),
    )
    if map_dir:
        os.makedirs(map_dir, exist_ok=True)
        _write_id_map(os.path.join(map_dir, "users_map.tsv"), log.user_ids)
        _write_id_map(os.path.join(map_dir, "items_map.tsv"), log.item_ids)

    logger.info(
        "[Data] Loaded %d interactions from %s (%d users, %d items)",
        len(records), source, log.num_users, log.num_items,
    )
    return log


def ingest_tsv(path: str, map_dir: Optional[str] = None) -> InteractionLog:
    """
    Reads `user<TAB>item<TAB>position` rows.

    A header line whose first field is `user` or `user_id` is skipped; blank
    lines are ignored.

    Args:
        path (str): Interaction file.
        map_dir (Optional[str]): Where to persist the raw-to-dense id maps.

    Returns:
        InteractionLog: Sequences sorted by the third column.

    Raises:
        ParseError: On a malformed row.
        EmptyInputError: If the file holds no interactions.
    """
    records: List[Tuple[str, str, float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if line_number == 1 and fields[0].strip().lower() in ("user", "user_id"):
                continue
            if len(fields) < 3:
                raise ParseError(path, line_number, f"expected 3 tab-separated fields, got {len(fields)}")
            user, item, position = (v.strip() for v in fields[:3])
            try:
                item = str(int(item))
            except ValueError:
                raise ParseError(path, line_number, f"item id '{item}' is not an integer") from None
            try:
                order = float(position)
            except ValueError:
                raise ParseError(path, line_number, f"position '{position}' is not numeric") from None
            if not user:
                raise ParseError(path, line_number, "empty user id")
            records.append((user, item, order))
    return _build_log(records, path, map_dir)


def ingest_movielens(path: str, map_dir: Optional[str] = None) -> InteractionLog:
    """Reads MovieLens `ratings.dat`; every rating counts as one interaction."""
    records: List[Tuple[str, str, float]] = []
    with open(path, "r", encoding="latin-1") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("::")
            if len(fields) != 4:
                raise ParseError(path, line_number, "expected UserID::MovieID::Rating::Timestamp")
            try:
                user, item, ts = str(int(fields[0])), str(int(fields[1])), float(int(fields[3]))
            except ValueError:
                raise ParseError(path, line_number, "non-integer user, movie or timestamp") from None
            records.append((user, item, ts))
    return _build_log(records, path, map_dir)


def ingest_amazon_json(path: str, map_dir: Optional[str] = None) -> InteractionLog:
    """Reads Amazon review JSON lines (`reviewerID`, `asin`, `unixReviewTime`)."""
    opener = gzip.open if path.endswith(".gz") else open
    records: List[Tuple[str, str, float]] = []
    with opener(path, "rt", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                records.append((str(row["reviewerID"]), str(row["asin"]), float(row["unixReviewTime"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(path, line_number, f"bad review record ({e})") from None
    return _build_log(records, path, map_dir)


LOADERS = {
    "tsv": ingest_tsv,
    "movielens": ingest_movielens,
    "amazon_json": ingest_amazon_json,
}


def load_interactions(path: str, fmt: str = "tsv", map_dir: Optional[str] = None) -> InteractionLog:
    """Dispatches to the loader registered for `fmt`."""
    if fmt not in LOADERS:
        raise ValueError(f"Unknown interaction format '{fmt}'. Must be one of: {sorted(LOADERS)}")
    return LOADERS[fmt](path, map_dir=map_dir)


def read_ground_truth(path: str, log: InteractionLog) -> np.ndarray:
    """
    Reads `item_id<TAB>cluster_id` rows and aligns them to the log's dense ids.

    Items missing from the file get cluster -1.
    """
    dense = {raw: i for i, raw in enumerate(log.item_ids)}
    clusters = np.full(log.num_items, -1, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(path, line_number, "expected item_id<TAB>cluster_id")
            try:
                raw, cluster = str(int(fields[0])), int(fields[1])
            except ValueError:
                raise ParseError(path, line_number, "non-integer item or cluster id") from None
            if raw in dense:
                clusters[dense[raw]] = cluster
    return clusters


# ---------------------------------------------------------------------------
# Windows and splits
# ---------------------------------------------------------------------------

def chunk_sequence(items: np.ndarray, max_len: int = DEFAULT_MAX_LEN) -> List[np.ndarray]:
    """Consecutive non-overlapping windows of at most `max_len` items."""
    return [items[i:i + max_len] for i in range(0, len(items), max_len)]


def _pad_rows(windows: List[np.ndarray], lengths: np.ndarray, max_len: int, pad_id: int) -> np.ndarray:
    out = np.full((len(windows), max_len), pad_id, dtype=np.int64)
    for row, (window, n) in enumerate(zip(windows, lengths)):
        out[row, :n] = window[:n]
    return out


def build_examples(log: InteractionLog, max_len: int = DEFAULT_MAX_LEN) -> ExampleSet:
    """
    Turns every user sequence into full-window examples.

    Sequences longer than `max_len` are chunked; each chunk becomes an example
    whose context is the chunk minus its last item and whose label is that
    last item. Users and chunks shorter than three items are dropped.

    Args:
        log (InteractionLog): Dense interaction log.
        max_len (int): Window length.

    Returns:
        ExampleSet: One example per kept window; pad_id = log.num_items.
    """
    pad_id = log.num_items
    windows: List[np.ndarray] = []
    owners: List[int] = []
    dropped_users = dropped_chunks = 0

    for user, seq in enumerate(log.sequences):
        if len(seq) < MIN_SEQUENCE_LEN:
            dropped_users += 1
            continue
        for chunk in chunk_sequence(np.asarray(seq, dtype=np.int64), max_len):
            if len(chunk) < MIN_SEQUENCE_LEN:
                dropped_chunks += 1
                continue
            windows.append(chunk)
            owners.append(user)

    if dropped_users:
        logger.warning("[Data] Dropped %d user(s) with fewer than %d interactions",
                       dropped_users, MIN_SEQUENCE_LEN)
    if dropped_chunks:
        logger.warning("[Data] Dropped %d trailing chunk(s) shorter than %d items",
                       dropped_chunks, MIN_SEQUENCE_LEN)

    if not windows:
        return ExampleSet.empty(max_len, pad_id)

    lengths = np.array([len(w) - 1 for w in windows], dtype=np.int64)
    return ExampleSet(
        contexts=_pad_rows(windows, lengths, max_len, pad_id),
        valid_lens=lengths,
        labels=np.array([w[-1] for w in windows], dtype=np.int64),
        owners=np.array(owners, dtype=np.int64),
        pad_id=pad_id,
    )


def _prefix_rows(items: np.ndarray, ends: np.ndarray, max_len: int, pad_id: int) -> np.ndarray:
    """Contexts items[:e] for every e in `ends`, padded to max_len."""
    padded = np.full(max_len, pad_id, dtype=np.int64)
    padded[:len(items)] = items
    keep = np.arange(max_len)[None, :] < ends[:, None]
    return np.where(keep, padded[None, :], pad_id)


def leave_one_out(examples: ExampleSet, num_items: Optional[int] = None) -> DatasetSplits:
    """
    Splits every window: last item tests, second-to-last validates and each
    earlier position (from the second item on) trains on its prefix.

    Args:
        examples (ExampleSet): Full-window examples from build_examples().
        num_items (Optional[int]): Catalog size; defaults to examples.pad_id.

    Returns:
        DatasetSplits: The three splits and per-user item histories.
    """
    num_items = examples.pad_id if num_items is None else num_items
    max_len, pad_id = examples.max_len, examples.pad_id
    parts: Dict[str, Dict[str, List[np.ndarray]]] = {
        name: {"contexts": [], "valid_lens": [], "labels": [], "owners": []}
        for name in ("train", "validation", "test")
    }
    histories: Dict[int, List[np.ndarray]] = {}

    def add(name: str, items: np.ndarray, ends: np.ndarray, owner: int) -> None:
        part = parts[name]
        part["contexts"].append(_prefix_rows(items, ends, max_len, pad_id))
        part["valid_lens"].append(ends.astype(np.int64))
        part["labels"].append(items[ends])
        part["owners"].append(np.full(len(ends), owner, dtype=np.int64))

    for row in range(len(examples)):
        n_ctx = int(examples.valid_lens[row])
        owner = int(examples.owners[row])
        items = np.append(examples.contexts[row, :n_ctx], examples.labels[row])
        n = len(items)
        histories.setdefault(owner, []).append(items)

        add("test", items, np.array([n - 1]), owner)
        add("validation", items, np.array([n - 2]), owner)
        if n > 3:
            add("train", items, np.arange(1, n - 2), owner)

    def collect(name: str) -> ExampleSet:
        part = parts[name]
        if not part["labels"]:
            return ExampleSet.empty(max_len, pad_id)
        return ExampleSet(
            contexts=np.concatenate(part["contexts"]),
            valid_lens=np.concatenate(part["valid_lens"]),
            labels=np.concatenate(part["labels"]),
            owners=np.concatenate(part["owners"]),
            pad_id=pad_id,
        )

    splits = DatasetSplits(
        train=collect("train"),
        validation=collect("validation"),
        test=collect("test"),
        user_histories={u: np.unique(np.concatenate(h)) for u, h in histories.items()},
        num_items=num_items,
    )
    logger.info(
        "[Data] Leave-one-out: %d train / %d validation / %d test examples",
        len(splits.train), len(splits.validation), len(splits.test),
    )
    return splits


# ---------------------------------------------------------------------------
# Item statistics
# ---------------------------------------------------------------------------

def head_tail_partition(stats: ItemStats, head_fraction: float = HEAD_FRACTION) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """
    Pareto split of the items seen in training.

    Items are ordered by count descending with ties broken by ascending id;
    the first ceil(head_fraction * #items) are head.
    """
    seen = np.flatnonzero(stats.counts > 0)
    if len(seen) == 0:
        return frozenset(), frozenset()
    order = seen[np.lexsort((seen, -stats.counts[seen]))]
    # round() guards against float products such as 0.2 * 15 = 3.0000000000000004
    n_head = math.ceil(round(head_fraction * len(seen), 9))
    return (frozenset(int(i) for i in order[:n_head]),
            frozenset(int(i) for i in order[n_head:]))


def compute_item_stats(train: ExampleSet, num_items: int, head_fraction: float = HEAD_FRACTION) -> ItemStats:
    """
    Counts train labels and derives p(y) and the head/tail partition.

    Raises:
        EmptyInputError: If the train split is empty.
    """
    if len(train) == 0:
        raise EmptyInputError("Cannot compute item statistics from an empty train split")
    counts = np.bincount(train.labels, minlength=num_items).astype(np.int64)
    probabilities = counts / counts.sum()
    stats = ItemStats(counts=counts, probabilities=probabilities)
    stats.head_set, stats.tail_set = head_tail_partition(stats, head_fraction)
    logger.info("[Data] Item stats: %d of %d items seen in train, %d head / %d tail",
                int((counts > 0).sum()), num_items, len(stats.head_set), len(stats.tail_set))
    return stats


def cluster_groups(item_cluster: np.ndarray, head_clusters: Sequence[int],
                   tail_clusters: Sequence[int]) -> Dict[str, FrozenSet[int]]:
    """Item-level head/tail groups derived from cluster membership."""
    item_cluster = np.asarray(item_cluster)
    return {
        "head": frozenset(int(i) for i in np.flatnonzero(np.isin(item_cluster, list(head_clusters)))),
        "tail": frozenset(int(i) for i in np.flatnonzero(np.isin(item_cluster, list(tail_clusters)))),
    }


# ---------------------------------------------------------------------------
# Reporting helpers
# ---------------------------------------------------------------------------

def dataset_summary(log: InteractionLog) -> Dict[str, float]:
    return {
        "users": log.num_users,
        "items": log.num_items,
        "interactions": log.num_interactions,
        "avg_seq_len": round(log.num_interactions / log.num_users, 2) if log.num_users else 0.0,
    }


def item_distribution(stats: ItemStats) -> List[Tuple[int, float]]:
    """(item_id, normalised frequency) pairs, most frequent first."""
    seen = np.flatnonzero(stats.counts > 0)
    order = seen[np.lexsort((seen, -stats.counts[seen]))]
    return [(int(i), float(stats.probabilities[i])) for i in order]


def write_splits(splits: DatasetSplits, directory: str) -> List[str]:
    """Writes `owner<TAB>label<TAB>context` TSV files, one per split."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in ("train", "validation", "test"):
        part: ExampleSet = getattr(splits, name)
        path = os.path.join(directory, f"{name}.tsv")
        with open(path, "w", encoding="utf-8") as f:
            for row in range(len(part)):
                ctx = " ".join(str(int(i)) for i in part.contexts[row, :part.valid_lens[row]])
                f.write(f"{int(part.owners[row])}\t{int(part.labels[row])}\t{ctx}\n")
        paths.append(path)
    return paths
