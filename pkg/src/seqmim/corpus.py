"""Interaction/attribute ingestion, k-core filtering and leave-one-out splits."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .errors import (
    EmptyAfterFilter,
    EmptyFile,
    MalformedLine,
    SequenceTooShort,
    UnknownItem,
)

log = logging.getLogger(__name__)

PAD = 0


@dataclass
class RawInteractions:
    records: List[Tuple[str, str, int]]

    def __len__(self):
        return len(self.records)


@dataclass
class Vocab:
    """Raw id -> dense index maps.  Index 0 is the padding sentinel in both."""

    item_to_index: Dict[str, int] = field(default_factory=dict)
    attr_to_index: Dict[str, int] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_to_index)

    @property
    def n_attrs(self) -> int:
        return len(self.attr_to_index)

    @property
    def mask_token(self) -> int:
        return self.n_items + 1

    def add_item(self, raw: str) -> int:
        idx = self.item_to_index.get(raw)
        if idx is None:
            idx = len(self.item_to_index) + 1
            self.item_to_index[raw] = idx
        return idx

    def add_attr(self, raw: str) -> int:
        idx = self.attr_to_index.get(raw)
        if idx is None:
            idx = len(self.attr_to_index) + 1
            self.attr_to_index[raw] = idx
        return idx

    def to_json(self) -> dict:
        items = sorted(self.item_to_index, key=self.item_to_index.get)
        attrs = sorted(self.attr_to_index, key=self.attr_to_index.get)
        return {"pad_index": PAD, "items": items, "attributes": attrs}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(
            item_to_index={raw: i + 1 for i, raw in enumerate(obj["items"])},
            attr_to_index={raw: i + 1 for i, raw in enumerate(obj["attributes"])},
        )


@dataclass
class InteractionSequence:
    user: int
    items: List[int]


@dataclass
class AttributeTable:
    attrs: Dict[int, List[int]]
    n_attrs: int

    def of(self, item: int) -> List[int]:
        return self.attrs.get(item, [])

    def csr(self, n_items: int):
        """(indptr, values) over item indices 0..n_items+1; pad and mask rows are empty."""
        lengths = np.zeros(n_items + 2, dtype=np.int64)
        for i in range(1, n_items + 1):
            lengths[i] = len(self.attrs.get(i, ()))
        indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        values = np.fromiter(
            (a for i in range(1, n_items + 1) for a in self.attrs.get(i, ())),
            dtype=np.int64,
            count=int(indptr[-1]),
        )
        return indptr, values


@dataclass
class DatasetSplit:
    users: List[int]
    train: List[List[int]]
    valid_target: List[int]
    test_target: List[int]
    full: List[List[int]]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _parse_ts(value, line_no):
    if isinstance(value, bool):
        raise MalformedLine(line_no, "timestamp is not an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise MalformedLine(line_no, "timestamp is not an integer")
        return int(value)
    try:
        return int(str(value).strip())
    except ValueError:
        raise MalformedLine(line_no, f"bad timestamp {value!r}") from None


def load_interactions(path, format: str = "tsv") -> RawInteractions:
    """Parse ``user<TAB>item<TAB>timestamp`` lines or JSON lines with user/item/ts keys.

    Blank lines are skipped; anything else that fails to parse raises
    :class:`MalformedLine` with its 1-based line number.
    """
    if format not in ("tsv", "jsonl", "json-lines"):
        raise ValueError(f"unknown interaction format {format!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if format == "tsv":
                parts = line.split("\t")
                if len(parts) != 3:
                    raise MalformedLine(line_no, f"expected 3 tab-separated fields, got {len(parts)}")
                user, item, ts = parts
            else:
                try:
                    obj = json.loads(line)
                    user, item, ts = obj["user"], obj["item"], obj["ts"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise MalformedLine(line_no, str(exc)) from None
            user, item = str(user).strip(), str(item).strip()
            if not user or not item:
                raise MalformedLine(line_no, "empty user or item id")
            records.append((user, item, _parse_ts(ts, line_no)))
    if not records:
        raise EmptyFile(f"no interaction records in {path}")
    return RawInteractions(records)


def k_core_filter(raw: RawInteractions, k: int) -> RawInteractions:
    """Drop users and items with fewer than ``k`` records, repeating until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not raw.records:
        raise EmptyAfterFilter("no records to filter")
    users = [r[0] for r in raw.records]
    items = [r[1] for r in raw.records]
    _, user_codes = np.unique(np.array(users, dtype=object), return_inverse=True)
    _, item_codes = np.unique(np.array(items, dtype=object), return_inverse=True)
    keep = kernels.kcore_mask(user_codes, item_codes, k)
    out = [r for r, kept in zip(raw.records, keep) if kept]
    if not out:
        raise EmptyAfterFilter(f"nothing survives {k}-core filtering")
    return RawInteractions(out)


def filter_min_timestamp(raw: RawInteractions, min_ts: Optional[int]) -> RawInteractions:
    if min_ts is None:
        return raw
    return RawInteractions([r for r in raw.records if r[2] >= min_ts])


def build_vocab(raw: RawInteractions) -> Vocab:
    """Items are indexed in order of first appearance."""
    vocab = Vocab()
    for _, item, _ in raw.records:
        vocab.add_item(item)
    return vocab


def build_sequences(raw: RawInteractions, vocab: Vocab) -> Tuple[List[InteractionSequence], List[str]]:
    """Group by user and sort each group by timestamp (stable, so ties keep file order).

    Returns the sequences plus the raw user ids, position-aligned; integer user
    ids follow the order in which users first appear.
    """
    grouped: Dict[str, List[Tuple[int, int]]] = {}
    for user, item, ts in raw.records:
        idx = vocab.item_to_index.get(item)
        if idx is None:
            raise UnknownItem(f"item {item!r} is not in the vocabulary")
        grouped.setdefault(user, []).append((ts, idx))
    seqs, raw_users = [], []
    for uid, (user, events) in enumerate(grouped.items()):
        events.sort(key=lambda e: e[0])
        seqs.append(InteractionSequence(user=uid, items=[i for _, i in events]))
        raw_users.append(user)
    return seqs, raw_users


def load_attributes(path, vocab: Vocab) -> AttributeTable:
    """Read ``{"item": ..., "attrs": [...]}`` lines.

    Attributes are registered in ``vocab.attr_to_index`` as they are first
    seen on a retained item.  Items outside the vocabulary are ignored and
    vocabulary items absent from the file get an empty list.
    """
    per_item: Dict[int, set] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw_item = str(obj["item"])
                raw_attrs = obj["attrs"]
                if not isinstance(raw_attrs, list):
                    raise TypeError("attrs must be a list")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedLine(line_no, str(exc)) from None
            idx = vocab.item_to_index.get(raw_item)
            if idx is None:
                continue
            bucket = per_item.setdefault(idx, set())
            for a in raw_attrs:
                bucket.add(vocab.add_attr(str(a)))
    attrs = {i: sorted(per_item.get(i, ())) for i in range(1, vocab.n_items + 1)}
    return AttributeTable(attrs=attrs, n_attrs=vocab.n_attrs)


# ---------------------------------------------------------------------------
# splits and padding
# ---------------------------------------------------------------------------


def leave_one_out_split(seqs: Sequence[InteractionSequence]) -> DatasetSplit:
    users, train, valid, test, full = [], [], [], [], []
    for s in seqs:
        if len(s.items) < 3:
            raise SequenceTooShort(s.user, len(s.items), 3)
        users.append(s.user)
        train.append(list(s.items[:-2]))
        valid.append(s.items[-2])
        test.append(s.items[-1])
        full.append(list(s.items))
    return DatasetSplit(users=users, train=train, valid_target=valid, test_target=test, full=full)


def truncate_pad(items: Sequence[int], max_len: int):
    """Keep the last ``max_len`` items and left-pad with 0.  Returns (ids, validity)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tail = list(items)[-max_len:]
    ids = np.zeros(max_len, dtype=np.int64)
    valid = np.zeros(max_len, dtype=bool)
    if tail:
        ids[-len(tail):] = tail
        valid[-len(tail):] = True
    return ids, valid


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int):
    """Stack :func:`truncate_pad` over a batch -> (ids [B, max_len], validity [B, max_len])."""
    ids = np.zeros((len(seqs), max_len), dtype=np.int64)
    valid = np.zeros((len(seqs), max_len), dtype=bool)
    for b, s in enumerate(seqs):
        tail = list(s)[-max_len:]
        if tail:
            ids[b, -len(tail):] = tail
            valid[b, -len(tail):] = True
    return ids, valid


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    vocab: Vocab
    sequences: List[InteractionSequence]
    raw_users: List[str]
    attributes: AttributeTable
    split: DatasetSplit

    @property
    def n_items(self) -> int:
        return self.vocab.n_items

    @property
    def n_attrs(self) -> int:
        return self.vocab.n_attrs


def corpus_stats(seqs: Sequence[InteractionSequence], attrs: AttributeTable, n_items: int) -> dict:
    n_users = len(seqs)
    n_actions = sum(len(s.items) for s in seqs)
    n_attr_links = sum(len(attrs.of(i)) for i in range(1, n_items + 1))
    return {
        "users": n_users,
        "items": n_items,
        "actions": n_actions,
        "avg_actions_per_user": n_actions / n_users if n_users else 0.0,
        "avg_actions_per_item": n_actions / n_items if n_items else 0.0,
        "sparsity": 1.0 - n_actions / (n_users * n_items) if n_users and n_items else 1.0,
        "attributes": attrs.n_attrs,
        "avg_attributes_per_item": n_attr_links / n_items if n_items else 0.0,
    }


def format_stats(stats: dict) -> str:
    return (
        f"users={stats['users']:,} items={stats['items']:,} actions={stats['actions']:,} "
        f"avg/user={stats['avg_actions_per_user']:.1f} avg/item={stats['avg_actions_per_item']:.1f} "
        f"sparsity={100 * stats['sparsity']:.2f}% attributes={stats['attributes']:,} "
        f"avg attr/item={stats['avg_attributes_per_item']:.1f}"
    )


def preprocess(
    interactions_path,
    attributes_path=None,
    fmt: str = "tsv",
    k: int = 5,
    min_timestamp: Optional[int] = None,
) -> Dataset:
    raw = load_interactions(interactions_path, fmt)
    raw = filter_min_timestamp(raw, min_timestamp)
    raw = k_core_filter(raw, k)
    vocab = build_vocab(raw)
    seqs, raw_users = build_sequences(raw, vocab)
    if attributes_path is not None:
        attrs = load_attributes(attributes_path, vocab)
    else:
        attrs = AttributeTable(attrs={i: [] for i in range(1, vocab.n_items + 1)}, n_attrs=0)
    split = leave_one_out_split(seqs)
    return Dataset(vocab=vocab, sequences=seqs, raw_users=raw_users, attributes=attrs, split=split)


def save_dataset(ds: Dataset, out_dir) -> dict:
    """Write vocab.json, sequences.jsonl, attributes.jsonl, split.json and stats.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.vocab.to_json(), fh)
    with open(os.path.join(out_dir, "sequences.jsonl"), "w", encoding="utf-8") as fh:
        for s, raw in zip(ds.sequences, ds.raw_users):
            fh.write(json.dumps({"user": s.user, "raw_user": raw, "items": s.items}) + "\n")
    with open(os.path.join(out_dir, "attributes.jsonl"), "w", encoding="utf-8") as fh:
        for i in range(1, ds.n_items + 1):
            fh.write(json.dumps({"item": i, "attrs": ds.attributes.of(i)}) + "\n")
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "users": ds.split.users,
                "valid_target": ds.split.valid_target,
                "test_target": ds.split.test_target,
                "train_lengths": [len(t) for t in ds.split.train],
            },
            fh,
        )
    stats = corpus_stats(ds.sequences, ds.attributes, ds.n_items)
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2)
    return stats


def load_dataset(data_dir) -> Dataset:
    with open(os.path.join(data_dir, "vocab.json"), encoding="utf-8") as fh:
        vocab = Vocab.from_json(json.load(fh))
    seqs, raw_users = [], []
    with open(os.path.join(data_dir, "sequences.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            seqs.append(InteractionSequence(user=obj["user"], items=obj["items"]))
            raw_users.append(obj.get("raw_user", str(obj["user"])))
    attrs = {}
    with open(os.path.join(data_dir, "attributes.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            attrs[int(obj["item"])] = list(obj["attrs"])
    table = AttributeTable(attrs=attrs, n_attrs=vocab.n_attrs)
    split = leave_one_out_split(seqs)
    split_path = os.path.join(data_dir, "split.json")
    if os.path.exists(split_path):
        with open(split_path, encoding="utf-8") as fh:
            stored = json.load(fh)
        if stored["test_target"] != split.test_target or stored["valid_target"] != split.valid_target:
            raise ValueError(f"{split_path} disagrees with sequences.jsonl")
    return Dataset(vocab=vocab, sequences=seqs, raw_users=raw_users, attributes=table, split=split)
