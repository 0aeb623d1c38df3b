"""Full-ranking evaluation and the shift-oriented analysis passes.

Every metric scores the entire item vocabulary (padding excluded) — no
sampled candidates.  The held-out target's 1-based rank is computed with
deterministic tie-breaking by item index; Recall@k is the fraction of
samples ranked within the top k and NDCG@k contributes 1/log2(rank + 1)
for ranks within k (single relevant item, so the ideal DCG is 1).

Analysis passes reuse the same forward path: per-level metric subgroups,
the V x V mean shift-distribution heatmap (row = assessed level of the
sample, entries = mean softmax weights at the true target), and the
same-level vs different-level distance lists between summed branch views.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import padded_matrix
from .model import ShiftModel, basic_views, distributions_at_targets
from .training import build_match_index

EVAL_BATCH = 256


@dataclass
class MetricsTable:
    recall: dict
    ndcg: dict
    sample_count: int

    def as_dict(self) -> dict:
        out = {"samples": self.sample_count}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def target_ranks(model: ShiftModel, samples: list, threads: int = 1) -> np.ndarray:
    """1-based full-ranking rank of each sample's target, ties broken by item index."""
    inputs, targets, _ = padded_matrix(samples, model.encoder_config.o)
    spans = [(lo, min(lo + EVAL_BATCH, len(samples))) for lo in range(0, len(samples), EVAL_BATCH)]

    def rank_span(span):
        lo, hi = span
        scores = model.scores(inputs[lo:hi]).data
        cols = targets[lo:hi] - 1
        own = scores[np.arange(hi - lo), cols]
        higher = (scores > own[:, None]).sum(axis=1)
        earlier_tie = np.zeros(hi - lo, dtype=np.int64)
        for i in range(hi - lo):
            row = scores[i]
            earlier_tie[i] = int(np.count_nonzero(row[: cols[i]] == own[i]))
        return lo, 1 + higher + earlier_tie

    ranks = np.zeros(len(samples), dtype=np.int64)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for lo, chunk in pool.map(rank_span, spans):
                ranks[lo:lo + len(chunk)] = chunk
    else:
        for span in spans:
            lo, chunk = rank_span(span)
            ranks[lo:lo + len(chunk)] = chunk
    return ranks


def metrics_from_ranks(ranks: np.ndarray, k_list) -> MetricsTable:
    recall = {}
    ndcg = {}
    n = len(ranks)
    for k in k_list:
        hit = ranks <= k
        recall[int(k)] = float(hit.mean()) if n else 0.0
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        ndcg[int(k)] = float(gains.mean()) if n else 0.0
    return MetricsTable(recall=recall, ndcg=ndcg, sample_count=n)


def rank_metrics(model: ShiftModel, samples: list, k_list=(10, 20), threads: int = 1) -> MetricsTable:
    """Recall@k and NDCG@k under full ranking over the item vocabulary."""
    ranks = target_ranks(model, samples, threads=threads)
    return metrics_from_ranks(ranks, k_list)


def subgroup_by_shift(model: ShiftModel, samples: list, n_levels: int,
                      k_list=(10, 20), threads: int = 1) -> dict:
    """Metrics per assessed shift level; empty levels are absent, not zero."""
    ranks = target_ranks(model, samples, threads=threads)
    levels = np.array([s.shift_level for s in samples])
    out = {}
    for level in range(1, n_levels + 1):
        member = levels == level
        if not member.any():
            continue
        out[level] = metrics_from_ranks(ranks[member], k_list)
    return out


def shift_heatmap(model: ShiftModel, samples: list, n_levels: int) -> tuple:
    """Mean shift distribution at the true target, grouped by assessed level.

    Returns ``(matrix [V, V], counts [V])``; rows with no samples are zero
    and flagged by a zero count.
    """
    inputs, targets, _ = padded_matrix(samples, model.encoder_config.o)
    levels = np.array([s.shift_level for s in samples])
    matrix = np.zeros((n_levels, n_levels))
    counts = np.zeros(n_levels, dtype=np.int64)
    for lo in range(0, len(samples), EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, len(samples))
        reprs = model.representations(inputs[lo:hi])
        dist = distributions_at_targets(reprs, model.target_embeddings(targets[lo:hi]))
        for row, level in zip(dist, levels[lo:hi]):
            matrix[level - 1] += row
            counts[level - 1] += 1
    present = counts > 0
    matrix[present] /= counts[present, None]
    return matrix, counts


def _views_for(model: ShiftModel, sample_ids: list, inputs: np.ndarray) -> np.ndarray:
    out = np.zeros((len(sample_ids), model.encoder_config.d))
    ids = np.asarray(sample_ids)
    for lo in range(0, len(ids), EVAL_BATCH):
        chunk = ids[lo:lo + EVAL_BATCH]
        reprs = model.representations(inputs[chunk])
        out[lo:lo + len(chunk)] = basic_views(reprs).data
    return out


def pair_distance_analysis(model: ShiftModel, samples: list, rng: np.random.Generator,
                           max_pairs: int = 2000) -> tuple:
    """Euclidean distances between summed branch views of sample pairs.

    Same-level pairs share target item and shift level; different-level
    pairs share the target item only.  Returns ``(same, different)`` lists,
    possibly shorter than ``max_pairs`` when the data offers fewer pairs.
    """
    window = model.encoder_config.o
    inputs, _, _ = padded_matrix(samples, window)
    index = build_match_index(samples)

    same_pairs: list = []
    by_target: dict = {}
    for (target, level), group in sorted(index.items()):
        by_target.setdefault(target, []).append((level, group))
        if len(group) >= 2:
            for a, b in zip(group[:-1], group[1:]):
                same_pairs.append((a, b))

    diff_pairs: list = []
    for target, level_groups in sorted(by_target.items()):
        if len(level_groups) < 2:
            continue
        for (_, ga), (_, gb) in zip(level_groups[:-1], level_groups[1:]):
            for a in ga[: max(1, len(gb) // len(ga) + 1)]:
                diff_pairs.append((a, gb[0]))

    def sample_down(pairs):
        if len(pairs) > max_pairs:
            keep = rng.choice(len(pairs), size=max_pairs, replace=False)
            return [pairs[i] for i in sorted(keep)]
        return pairs

    same_pairs = sample_down(same_pairs)
    diff_pairs = sample_down(diff_pairs)

    needed = sorted({i for pair in same_pairs + diff_pairs for i in pair})
    views = _views_for(model, needed, inputs)
    position = {sid: i for i, sid in enumerate(needed)}

    def distances(pairs):
        return [
            float(np.linalg.norm(views[position[a]] - views[position[b]]))
            for a, b in pairs
        ]

    return distances(same_pairs), distances(diff_pairs)


@dataclass
class SweepRow:
    parameter: str
    value: object
    metrics: MetricsTable | None
    train_seconds: float
    eval_seconds: float
    error: str | None = None


def robustness_sweep(parameter: str, values, run_fn) -> list:
    """Train/evaluate once per grid point; failures are recorded, not fatal.

    ``run_fn(parameter, value) -> (model, eval_samples)`` owns data prep and
    training so callers control what the swept parameter means.
    """
    rows: list[SweepRow] = []
    for value in values:
        started = time.perf_counter()
        try:
            model, eval_samples = run_fn(parameter, value)
            trained = time.perf_counter()
            metrics = rank_metrics(model, eval_samples)
            rows.append(SweepRow(
                parameter=parameter,
                value=value,
                metrics=metrics,
                train_seconds=trained - started,
                eval_seconds=time.perf_counter() - trained,
            ))
        except Exception as exc:  # sweep must continue past individual failures
            rows.append(SweepRow(
                parameter=parameter,
                value=value,
                metrics=None,
                train_seconds=time.perf_counter() - started,
                eval_seconds=0.0,
                error=f"{type(exc).__name__}: {exc}",
            ))
    return rows
