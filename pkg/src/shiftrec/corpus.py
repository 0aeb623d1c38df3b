"""Interaction ingestion, filtering, sequence building, and sample stores.

Raw logs arrive as TSV (``user<TAB>item<TAB>timestamp<TAB>cat1|cat2|...``,
category field may be empty) or JSONL (keys ``user``, ``item``, ``ts``,
``categories``).  Ingestion accumulates a catalog with dense integer
indices (item index 0 is reserved for padding), iteratively filters out
low-activity users and items, sorts per-user histories by timestamp with
stable tie-breaking, splits leave-one-out, and enumerates sliding-window
training samples with their shift level under the active catalog.

Prepared datasets can be frozen to a binary store (single ``.npz``) so the
training and evaluation commands never re-tokenize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .shift import bucket, shift_degree

PAD = 0  # reserved padding item index, excluded from scoring
UNLABELED_CATEGORY = "⊥"  # assigned to items whose raw category set is empty

STORE_MAGIC = "shiftrec-store"
STORE_VERSION = 1


class CorpusError(ValueError):
    """Malformed input data or an operation that would empty the dataset."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int
    categories: frozenset


@dataclass
class Catalog:
    """Dense item/category vocabularies and the item -> category-set map."""

    items: list  # index - 1 -> item id
    categories: list  # index -> category id
    item_cats: list  # index - 1 -> frozenset of category indices

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def categories_of(self, item_index: int) -> frozenset:
        return self.item_cats[item_index - 1]

    def index_of(self, item_id) -> int:
        if not hasattr(self, "_index"):
            object.__setattr__(self, "_index", {it: i + 1 for i, it in enumerate(self.items)})
        return self._index[item_id]


@dataclass(frozen=True)
class Sample:
    """One training/evaluation unit: a history window and its target.

    ``overlap``/``target_size`` retain the integer counts the shift degree
    was formed from, so the level can be re-bucketed for a different number
    of levels without re-reading the catalog.
    """

    user: int
    input_items: tuple
    target_item: int
    shift_level: int
    overlap: int
    target_size: int


@dataclass
class Dataset:
    catalog: Catalog
    train: list
    validation: list
    test: list
    n_users: int
    n_interactions: int
    excluded_short_sequences: int
    window: int
    n_levels: int

    def report(self) -> dict:
        denom = self.n_users * self.catalog.n_items
        return {
            "users": self.n_users,
            "items": self.catalog.n_items,
            "categories": self.catalog.n_categories,
            "interactions": self.n_interactions,
            "sparsity": 1.0 - self.n_interactions / denom if denom else 0.0,
            "excluded_short_sequences": self.excluded_short_sequences,
            "train_samples": len(self.train),
            "validation_samples": len(self.validation),
            "test_samples": len(self.test),
        }


# ---------------------------------------------------------------------------
# ingestion


def load_interactions(path, fmt: str = "tsv") -> list:
    if fmt == "tsv":
        return _load_tsv(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise CorpusError(f"unknown input format {fmt!r} (expected tsv or jsonl)")


def _load_tsv(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):  # provenance/comment lines
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusError(f"{path}: malformed line {lineno}: expected 4 tab-separated fields")
            user, item, ts, cats = parts
            try:
                timestamp = int(ts)
            except ValueError:
                raise CorpusError(f"{path}: malformed line {lineno}: bad timestamp {ts!r}")
            categories = frozenset(c for c in cats.split("|") if c)
            out.append(Interaction(user, item, timestamp, categories))
    if not out:
        raise CorpusError(f"{path}: empty input")
    return out


def _load_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for recno, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):  # provenance/comment lines
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: malformed record {recno}: {exc}")
            for key in ("user", "item", "ts"):
                if key not in rec:
                    raise CorpusError(f"{path}: record {recno} missing {key!r}")
            categories = frozenset(str(c) for c in rec.get("categories", []))
            out.append(Interaction(str(rec["user"]), str(rec["item"]), int(rec["ts"]), categories))
    if not out:
        raise CorpusError(f"{path}: empty input")
    return out


def filter_min_count(interactions: list, k: int) -> list:
    """Drop users and items with fewer than ``k`` events, iterated to a fixpoint."""
    if k < 1:
        raise ValueError(f"minimum count must be >= 1, got {k}")
    current = interactions
    while True:
        user_counts: dict = {}
        item_counts: dict = {}
        for ev in current:
            user_counts[ev.user] = user_counts.get(ev.user, 0) + 1
            item_counts[ev.item] = item_counts.get(ev.item, 0) + 1
        kept = [
            ev
            for ev in current
            if user_counts[ev.user] >= k and item_counts[ev.item] >= k
        ]
        if len(kept) == len(current):
            if not kept:
                raise CorpusError("filtering emptied dataset")
            return kept
        current = kept


def build_catalog(interactions: list) -> Catalog:
    """Vocabularies in first-appearance order; unlabeled items get a stand-in category."""
    items: list = []
    item_pos: dict = {}
    categories: list = []
    cat_pos: dict = {}
    raw_cats: list = []
    for ev in interactions:
        names = ev.categories if ev.categories else frozenset({UNLABELED_CATEGORY})
        for c in sorted(names):
            if c not in cat_pos:
                cat_pos[c] = len(categories)
                categories.append(c)
        if ev.item not in item_pos:
            item_pos[ev.item] = len(items)
            items.append(ev.item)
            raw_cats.append(set())
        raw_cats[item_pos[ev.item]].update(names)
    item_cats = [frozenset(cat_pos[c] for c in cats) for cats in raw_cats]
    return Catalog(items=items, categories=categories, item_cats=item_cats)


def label_dropout(catalog: Catalog, rho: float, seed: int) -> Catalog:
    """Independently drop each item's category labels with probability ``rho``.

    An item losing all labels keeps one, chosen uniformly among its original
    labels, so every item stays assessable.  Deterministic given the seed.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {rho}")
    if rho == 0.0:
        return catalog
    rng = np.random.default_rng(seed)
    perturbed = []
    for cats in catalog.item_cats:
        ordered = sorted(cats)
        kept = [c for c in ordered if rng.random() >= rho]
        if not kept:
            kept = [ordered[rng.integers(len(ordered))]]
        perturbed.append(frozenset(kept))
    return Catalog(items=catalog.items, categories=catalog.categories, item_cats=perturbed)


# ---------------------------------------------------------------------------
# sequences and samples


def build_sequences(interactions: list, catalog: Catalog) -> dict:
    """Per-user chronological item-index lists; timestamp ties keep file order."""
    by_user: dict = {}
    for pos, ev in enumerate(interactions):
        by_user.setdefault(ev.user, []).append((ev.timestamp, pos, catalog.index_of(ev.item)))
    sequences = {}
    for user, events in by_user.items():
        events.sort(key=lambda e: e[0])  # stable: ties stay in file order
        sequences[user] = [item for _, _, item in events]
    return sequences


def split_leave_one_out(sequence: list) -> tuple:
    """(train region, validation pair, test pair) for one user sequence.

    The last item is the test target with everything before it as input;
    the second-to-last is the validation target; all items before the test
    target form the training region.
    """
    if len(sequence) < 3:
        raise ValueError(f"sequence of length {len(sequence)} cannot be split")
    test = (list(sequence[:-1]), sequence[-1])
    validation = (list(sequence[:-2]), sequence[-2])
    return list(sequence[:-1]), validation, test


def _make_sample(user: int, inputs: list, target: int, catalog: Catalog, window: int, n_levels: int) -> Sample:
    inputs = inputs[-window:]
    union: set = set()
    for item in inputs:
        union |= catalog.categories_of(item)
    target_cats = catalog.categories_of(target)
    degree = shift_degree(union, target_cats)
    return Sample(
        user=user,
        input_items=tuple(inputs),
        target_item=target,
        shift_level=bucket(degree, n_levels),
        overlap=len(target_cats & union),
        target_size=len(target_cats),
    )


def sliding_window_samples(train_region: list, window: int, catalog: Catalog, n_levels: int, user: int = 0) -> list:
    """All (history, next-item) pairs inside a training region.

    Position ``t`` (1-based, from 2 on) yields a sample whose input is the
    up-to-``window`` items before ``t`` and whose target is the item at ``t``;
    a region of length L yields L - 1 samples.
    """
    if window < 1:
        raise ValueError(f"window length must be >= 1, got {window}")
    samples = []
    for t in range(1, len(train_region)):
        samples.append(
            _make_sample(user, train_region[:t], train_region[t], catalog, window, n_levels)
        )
    return samples


def build_dataset(interactions: list, min_count: int, window: int, n_levels: int,
                  label_dropout_rho: float = 0.0, label_dropout_seed: int = 0) -> Dataset:
    """Full preparation pipeline from raw interactions to split samples.

    A nonzero ``label_dropout_rho`` perturbs the catalog before any shift
    level is assessed, so training signals see the noisy labels.
    """
    filtered = filter_min_count(interactions, min_count)
    catalog = build_catalog(filtered)
    if label_dropout_rho:
        catalog = label_dropout(catalog, label_dropout_rho, label_dropout_seed)
    sequences = build_sequences(filtered, catalog)
    train: list = []
    validation: list = []
    test: list = []
    excluded = 0
    kept_users = 0
    kept_interactions = 0
    for user_pos, (user, seq) in enumerate(sequences.items()):
        if len(seq) < 3:
            excluded += 1
            continue
        kept_users += 1
        kept_interactions += len(seq)
        region, (val_in, val_target), (test_in, test_target) = split_leave_one_out(seq)
        train.extend(sliding_window_samples(region, window, catalog, n_levels, user=user_pos))
        validation.append(_make_sample(user_pos, val_in, val_target, catalog, window, n_levels))
        test.append(_make_sample(user_pos, test_in, test_target, catalog, window, n_levels))
    return Dataset(
        catalog=catalog,
        train=train,
        validation=validation,
        test=test,
        n_users=kept_users,
        n_interactions=kept_interactions,
        excluded_short_sequences=excluded,
        window=window,
        n_levels=n_levels,
    )


def rebucket(samples: list, n_levels: int) -> list:
    """Re-derive shift levels for a different level count from stored overlap counts.

    ``n_levels == 1`` is the degenerate single-branch case: every sample
    gets level 1 without consulting the bucketizer.
    """
    if n_levels != 1 and n_levels < 3:
        raise ValueError(f"cannot bucket into {n_levels} levels (need 1 or >= 3)")
    out = []
    for s in samples:
        if n_levels == 1:
            level = 1
        else:
            level = bucket(shift_degree_from_counts(s.overlap, s.target_size), n_levels)
        out.append(
            Sample(
                user=s.user,
                input_items=s.input_items,
                target_item=s.target_item,
                shift_level=level,
                overlap=s.overlap,
                target_size=s.target_size,
            )
        )
    return out


def shift_degree_from_counts(overlap: int, target_size: int):
    from fractions import Fraction

    return Fraction(target_size - overlap, target_size)


# ---------------------------------------------------------------------------
# binary sample store


def _pack_samples(samples: list, window: int) -> dict:
    n = len(samples)
    inputs = np.zeros((n, window), dtype=np.int32)
    targets = np.zeros(n, dtype=np.int32)
    users = np.zeros(n, dtype=np.int32)
    levels = np.zeros(n, dtype=np.int16)
    overlap = np.zeros(n, dtype=np.int16)
    target_size = np.zeros(n, dtype=np.int16)
    for i, s in enumerate(samples):
        seq = s.input_items[-window:]
        inputs[i, window - len(seq):] = seq
        targets[i] = s.target_item
        users[i] = s.user
        levels[i] = s.shift_level
        overlap[i] = s.overlap
        target_size[i] = s.target_size
    return {
        "inputs": inputs,
        "targets": targets,
        "users": users,
        "levels": levels,
        "overlap": overlap,
        "target_size": target_size,
    }


def _unpack_samples(arrays: dict, prefix: str) -> list:
    inputs = arrays[f"{prefix}_inputs"]
    samples = []
    for i in range(inputs.shape[0]):
        row = inputs[i]
        samples.append(
            Sample(
                user=int(arrays[f"{prefix}_users"][i]),
                input_items=tuple(int(x) for x in row[row != PAD]),
                target_item=int(arrays[f"{prefix}_targets"][i]),
                shift_level=int(arrays[f"{prefix}_levels"][i]),
                overlap=int(arrays[f"{prefix}_overlap"][i]),
                target_size=int(arrays[f"{prefix}_target_size"][i]),
            )
        )
    return samples


def save_store(dataset: Dataset, path, provenance: dict | None = None) -> None:
    """Freeze a prepared dataset to a single versioned ``.npz`` file."""
    cat_flat: list = []
    cat_offsets = [0]
    for cats in dataset.catalog.item_cats:
        cat_flat.extend(sorted(cats))
        cat_offsets.append(len(cat_flat))
    meta = {
        "magic": STORE_MAGIC,
        "version": STORE_VERSION,
        "window": dataset.window,
        "n_levels": dataset.n_levels,
        "n_users": dataset.n_users,
        "n_interactions": dataset.n_interactions,
        "excluded_short_sequences": dataset.excluded_short_sequences,
        "provenance": provenance or {},
    }
    arrays: dict = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        "item_ids": np.array(dataset.catalog.items, dtype=object),
        "category_ids": np.array(dataset.catalog.categories, dtype=object),
        "cat_flat": np.asarray(cat_flat, dtype=np.int32),
        "cat_offsets": np.asarray(cat_offsets, dtype=np.int64),
    }
    for prefix, samples in (
        ("train", dataset.train),
        ("val", dataset.validation),
        ("test", dataset.test),
    ):
        for key, arr in _pack_samples(samples, dataset.window).items():
            arrays[f"{prefix}_{key}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_store(path) -> tuple:
    """Load a frozen dataset; returns ``(dataset, provenance)``."""
    with np.load(path, allow_pickle=True) as arrays:
        try:
            meta = json.loads(bytes(arrays["meta"]).decode("utf-8"))
        except KeyError:
            raise CorpusError(f"{path}: not a sample store (missing metadata)")
        if meta.get("magic") != STORE_MAGIC:
            raise CorpusError(f"{path}: not a sample store (bad magic)")
        if meta.get("version") != STORE_VERSION:
            raise CorpusError(f"{path}: unsupported store version {meta.get('version')}")
        items = list(arrays["item_ids"])
        categories = list(arrays["category_ids"])
        cat_flat = arrays["cat_flat"]
        cat_offsets = arrays["cat_offsets"]
        item_cats = [
            frozenset(int(c) for c in cat_flat[cat_offsets[i]:cat_offsets[i + 1]])
            for i in range(len(items))
        ]
        catalog = Catalog(items=items, categories=categories, item_cats=item_cats)
        dataset = Dataset(
            catalog=catalog,
            train=_unpack_samples(arrays, "train"),
            validation=_unpack_samples(arrays, "val"),
            test=_unpack_samples(arrays, "test"),
            n_users=meta["n_users"],
            n_interactions=meta["n_interactions"],
            excluded_short_sequences=meta["excluded_short_sequences"],
            window=meta["window"],
            n_levels=meta["n_levels"],
        )
    return dataset, meta.get("provenance", {})


def padded_matrix(samples: list, window: int) -> tuple:
    """(inputs [n, window] int32, targets [n], levels [n]) for batched passes."""
    packed = _pack_samples(samples, window)
    return packed["inputs"], packed["targets"].astype(np.int64), packed["levels"].astype(np.int64)
