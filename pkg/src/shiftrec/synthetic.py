"""Synthetic interaction logs with planted, controllable shift structure.

Each generated user walks a latent preference category.  At every step a
shift level is drawn from the configured profile and the next item is
sampled from the items whose category overlap with the recent history
lands exactly in that level's degree bucket: level 1 items sit fully inside
the history's categories, the top level is categorically disjoint (the
preference jumps to the first unseen category), and interior levels come
from items whose category blocks straddle the boundary.  Sampling favors
items carrying the current preference category and is popularity-skewed
(Zipf), so ranking stays nontrivial.

The emitted annotations carry the achieved level, recomputed from the
actual category overlap, so they are exact ground truth for the assessment
pipeline; steps where the requested level was infeasible fall back to the
nearest achievable one and are counted.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .corpus import Interaction


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 500
    n_categories: int = 20
    categories_per_item: tuple = (1, 4)
    sequence_length: tuple = (8, 16)
    shift_profile: tuple = (0.4, 0.2, 0.2, 0.1, 0.1)
    seed: int = 7
    history_window: int = 50
    zipf_exponent: float = 1.0
    preference_boost: float = 6.0
    level_momentum: float = 0.0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_categories) <= 0:
            raise ValueError("vocabulary sizes must be positive")
        if self.n_items < self.n_categories:
            raise ValueError("need at least one item per category")
        lo, hi = self.categories_per_item
        if not 1 <= lo <= hi <= self.n_categories:
            raise ValueError(f"bad categories_per_item range {self.categories_per_item}")
        if self.sequence_length[0] < 3 or self.sequence_length[0] > self.sequence_length[1]:
            raise ValueError(f"bad sequence_length range {self.sequence_length}")
        if len(self.shift_profile) < 3:
            raise ValueError("shift profile needs at least 3 levels")
        if abs(sum(self.shift_profile) - 1.0) > 1e-9 or min(self.shift_profile) < 0:
            raise ValueError("shift profile must be a distribution")
        if not 0.0 <= self.level_momentum < 1.0:
            raise ValueError("level momentum must be in [0, 1)")

    @property
    def n_levels(self) -> int:
        return len(self.shift_profile)


class InfeasibleProfile(ValueError):
    """The requested shift profile cannot be realized by the catalog."""


def _item_categories(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean [n_items, n_categories] membership; every category keeps
    single-category items so stay/jump levels are always realizable."""
    g = config.n_categories
    members = np.zeros((config.n_items, g), dtype=bool)
    for i in range(config.n_items):
        if i < g:
            members[i, i] = True
            continue
        lo, hi = config.categories_per_item
        size = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(g))
        for j in range(size):
            members[i, (start + j) % g] = True
    return members


def _bucket_levels(overlap: np.ndarray, sizes: np.ndarray, n_levels: int) -> np.ndarray:
    """Vectorized integer-exact level assignment from overlap counts."""
    remainder = sizes - overlap
    interior = np.maximum((n_levels - 2) * remainder + sizes - 1, 0) // sizes + 1
    levels = np.where(overlap == sizes, 1, np.where(overlap == 0, n_levels, interior))
    return levels.astype(np.int64)


def generate(config: SynthConfig) -> tuple:
    """Returns ``(interactions, annotations, stats)``.

    Annotations are dicts with keys user, position, item, level (the
    achieved, recomputed level of the pair formed with the preceding
    window).  ``stats`` reports fallback counts and the achieved level
    histogram.

    ``level_momentum`` makes consecutive levels sticky: the next requested
    level repeats the previous one with that probability and is drawn from
    the profile otherwise.  The chain's stationary distribution is the
    profile itself, so the marginal histogram is unaffected while shift
    behavior becomes burst-structured (and thus inferable from history).
    """
    rng = np.random.default_rng(config.seed)
    members = _item_categories(config, rng)
    sizes = members.sum(axis=1)
    g = config.n_categories
    v = config.n_levels

    ranks = np.empty(config.n_items, dtype=np.int64)
    ranks[rng.permutation(config.n_items)] = np.arange(config.n_items)
    zipf = 1.0 / np.power(ranks + 1.0, config.zipf_exponent)

    profile = np.asarray(config.shift_profile, dtype=np.float64)
    profile = profile / profile.sum()

    interactions: list = []
    annotations: list = []
    fallbacks = 0
    achieved_hist = np.zeros(v, dtype=np.int64)

    item_ids = [f"i{i:04d}" for i in range(config.n_items)]
    cat_ids = [f"c{c:02d}" for c in range(g)]
    item_cat_names = [
        frozenset(cat_ids[c] for c in np.flatnonzero(members[i]))
        for i in range(config.n_items)
    ]

    def emit(user_id, item, position):
        interactions.append(Interaction(user_id, item_ids[item], position, item_cat_names[item]))

    for u in range(config.n_users):
        user_id = f"u{u:05d}"
        length = int(rng.integers(config.sequence_length[0], config.sequence_length[1] + 1))
        pref = int(rng.integers(g))

        first_pool = np.flatnonzero(members[:, pref])
        weights = zipf[first_pool] / zipf[first_pool].sum()
        first = int(rng.choice(first_pool, p=weights))
        emit(user_id, first, 0)

        window: deque = deque([first])
        cat_counts = members[first].astype(np.int64).copy()
        previous = int(rng.choice(v, p=profile)) + 1

        for position in range(1, length):
            if config.level_momentum and rng.random() < config.level_momentum:
                desired = previous
            else:
                desired = int(rng.choice(v, p=profile)) + 1
            previous = desired
            union = cat_counts > 0
            overlap = members[:, union].sum(axis=1)
            levels = _bucket_levels(overlap, sizes, v)

            feasible = np.flatnonzero(levels == desired)
            if feasible.size == 0:
                gap = np.abs(levels - desired)
                feasible = np.flatnonzero(gap == gap.min())
                fallbacks += 1

            if desired == v:
                # complete shift: preference moves to the first unseen
                # category after the current one
                boost_cat = pref
                for step in range(1, g + 1):
                    cand = (pref + step) % g
                    if not union[cand]:
                        boost_cat = cand
                        break
            else:
                # each level gravitates to its own neighborhood around the
                # preference, so levels have distinct, learnable dynamics
                boost_cat = (pref + desired - 1) % g

            w = zipf[feasible].copy()
            w[members[feasible, boost_cat]] *= config.preference_boost
            w /= w.sum()
            item = int(rng.choice(feasible, p=w))

            achieved = int(levels[item])
            achieved_hist[achieved - 1] += 1
            annotations.append({
                "user": user_id,
                "position": position,
                "item": item_ids[item],
                "level": achieved,
            })
            emit(user_id, item, position)

            if achieved == v:
                # the preference anchor only moves on a complete shift
                fresh = [c for c in np.flatnonzero(members[item]) if not union[c]]
                pref = int(fresh[0]) if fresh else int(np.flatnonzero(members[item])[0])

            window.append(item)
            cat_counts += members[item]
            if len(window) > config.history_window:
                gone = window.popleft()
                cat_counts -= members[gone]

    if not annotations:
        raise InfeasibleProfile("no pairs generated; sequences too short")
    stats = {
        "pairs": len(annotations),
        "fallbacks": fallbacks,
        "fallback_rate": fallbacks / len(annotations),
        "achieved_histogram": (achieved_hist / achieved_hist.sum()).tolist(),
        "requested_profile": profile.tolist(),
    }
    return interactions, annotations, stats


def write_dataset(interactions: list, annotations: list, out_dir, fmt: str = "tsv",
                  provenance: dict | None = None) -> dict:
    """Write generator output in the formats ingestion accepts, plus ground truth.

    A leading ``#`` provenance line carries the config hash and seed;
    ingestion skips such lines.
    """
    import json
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ""
    if provenance:
        header = (f"# config_hash={provenance.get('config_hash', '')} "
                  f"seed={provenance.get('seed', '')}\n")
    paths = {}
    if fmt == "tsv":
        data_path = out_dir / "interactions.tsv"
        with open(data_path, "w", encoding="utf-8") as fh:
            fh.write(header)
            for ev in interactions:
                cats = "|".join(sorted(ev.categories))
                fh.write(f"{ev.user}\t{ev.item}\t{ev.timestamp}\t{cats}\n")
    elif fmt == "jsonl":
        data_path = out_dir / "interactions.jsonl"
        with open(data_path, "w", encoding="utf-8") as fh:
            fh.write(header)
            for ev in interactions:
                fh.write(json.dumps({
                    "user": ev.user,
                    "item": ev.item,
                    "ts": ev.timestamp,
                    "categories": sorted(ev.categories),
                }) + "\n")
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    paths["interactions"] = data_path

    truth_path = out_dir / "ground_truth.csv"
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write(header)
        fh.write("user,position,item,level\n")
        for row in annotations:
            fh.write(f"{row['user']},{row['position']},{row['item']},{row['level']}\n")
    paths["ground_truth"] = truth_path
    return paths
