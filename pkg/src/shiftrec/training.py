"""Mini-batch training with Adam, early stopping, and seeded reproducibility.

Each epoch shuffles the training samples, and every batch assembles the
three-part objective: the full-vocabulary recommendation loss, the
shift-level decomposition loss, and, when enabled, the shift-matched
contrastive loss against partners drawn from the match index (samples
sharing both target item and shift level).  Batch losses are reduced by
batch size by default so the loss weights keep their meaning across batch
sizes.  Validation Recall@10 drives checkpoint selection and early
stopping.  All randomness flows through generators spawned from the run
seed, so a (seed, data, config) triple reproduces bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import padded_matrix
from .model import (
    ShiftModel,
    basic_views,
    candidate_scores,
    decomposition_loss,
    matching_loss,
    recommendation_loss,
    shift_representations,
    total_loss,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    gamma_dec: float = 0.4
    gamma_mat: float = 0.5
    max_epochs: int = 200
    patience: int = 10
    seed: int = 42
    fixed_shift_level: int | None = None
    grad_clip: float | None = None
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"loss_reduction must be mean or sum, got {self.loss_reduction!r}")
        if self.gamma_dec < 0 or self.gamma_mat < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience, and max_epochs must be positive")


@dataclass
class EpochLog:
    epoch: int
    loss_rec: float
    loss_dec: float
    loss_mat: float
    val_recall10: float
    skipped_match: int
    seconds: float


@dataclass
class FitResult:
    model: ShiftModel
    log: list
    best_epoch: int
    best_recall10: float
    epochs_run: int


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameters."""

    def __init__(self, params: dict, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict) -> None:
        """Apply one update from a tensor -> gradient map; absent entries are skipped."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict, grads: dict, state: Adam, lr: float | None = None) -> Adam:
    """Single functional-style step; returns the mutated state for chaining."""
    if lr is not None:
        state.lr = lr
    state.step(grads)
    return state


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        return {t: g * factor for t, g in grads.items()}
    return grads


def build_match_index(samples: list, levels=None) -> dict:
    """Group training-sample ids by (target item, shift level)."""
    index: dict = {}
    for i, s in enumerate(samples):
        level = int(levels[i]) if levels is not None else s.shift_level
        index.setdefault((s.target_item, level), []).append(i)
    return index


@dataclass
class _Batcher:
    inputs: np.ndarray
    targets: np.ndarray
    levels: np.ndarray

    def take(self, ids: np.ndarray) -> tuple:
        return self.inputs[ids], self.targets[ids], self.levels[ids]


def fit(model: ShiftModel, train_samples: list, val_samples: list, config: TrainConfig,
        eval_fn=None) -> FitResult:
    """Train to convergence on validation Recall@10 and return the best state.

    ``eval_fn(model, samples) -> recall@10`` may be injected for tests; the
    default performs full-ranking evaluation via :mod:`shiftrec.evaluation`.
    """
    from .evaluation import rank_metrics  # local import to avoid a cycle

    if not train_samples or not val_samples:
        raise ValueError("training and validation splits must be non-empty")

    if eval_fn is None:
        def eval_fn(m, samples):
            return rank_metrics(m, samples, (10,)).recall[10]

    window = model.encoder_config.o
    inputs, targets, levels = padded_matrix(train_samples, window)
    if config.fixed_shift_level is not None:
        if not 1 <= config.fixed_shift_level <= model.head_config.n_levels:
            raise ValueError(
                f"fixed_shift_level {config.fixed_shift_level} outside [1, {model.head_config.n_levels}]"
            )
        levels = np.full_like(levels, config.fixed_shift_level)
    if levels.max(initial=1) > model.head_config.n_levels:
        raise ValueError("sample shift levels exceed the model's branch count; re-bucket the dataset")
    batcher = _Batcher(inputs, targets, levels)

    use_dec = config.gamma_dec > 0 and model.head_config.n_levels > 1
    use_mat = config.gamma_mat > 0
    match_index = build_match_index(train_samples, levels) if use_mat else {}

    seq = np.random.SeedSequence([config.seed, 0x5EED])
    shuffle_rng, dropout_rng, partner_rng = (np.random.default_rng(s) for s in seq.spawn(3))

    optimizer = Adam(model.params, config.learning_rate)
    n = len(train_samples)
    log: list[EpochLog] = []
    best_recall = -1.0
    best_epoch = 0
    best_state = model.state_snapshot()
    bad_epochs = 0

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sum_rec = sum_dec = sum_mat = 0.0
        skipped_match = 0

        for lo in range(0, n, config.batch_size):
            ids = order[lo:lo + config.batch_size]
            batch_inputs, batch_targets, batch_levels = batcher.take(ids)
            bsz = len(ids)

            partner_rows = None
            pair_mask = None
            if use_mat:
                chosen = np.full(bsz, -1, dtype=np.int64)
                for j, sample_id in enumerate(ids):
                    s = train_samples[sample_id]
                    group = match_index[(s.target_item, int(batch_levels[j]))]
                    if len(group) < 2:
                        continue
                    # uniform over the group minus the sample itself
                    pick = int(partner_rng.integers(len(group) - 1))
                    partner = group[pick]
                    if partner == sample_id:
                        partner = group[-1]
                    chosen[j] = partner
                pair_mask = chosen >= 0
                skipped_match += int(bsz - pair_mask.sum())
                if pair_mask.sum() >= 2:
                    partner_rows = inputs[chosen[pair_mask]]
                else:
                    skipped_match += int(pair_mask.sum())
                    pair_mask = None

            with Tape() as tape:
                reprs = model.representations(batch_inputs, rng=dropout_rng, train=True)
                scores = candidate_scores(reprs, model.item_embeddings(),
                                          mean_pool=model.head_config.mean_pool_scoring)
                loss_rec = recommendation_loss(scores, batch_targets)
                loss_dec = None
                if use_dec:
                    loss_dec = decomposition_loss(reprs, model.target_embeddings(batch_targets),
                                                  batch_levels)
                loss_mat = None
                if partner_rows is not None:
                    own_views = basic_views(reprs)
                    picked = ad.index_select(own_views, np.flatnonzero(pair_mask), axis=0)
                    augmented = ad.dropout(picked, model.head_config.aug_dropout,
                                           dropout_rng, True)
                    partner_reprs = model.representations(partner_rows, rng=dropout_rng, train=True)
                    partner_views = basic_views(partner_reprs)
                    loss_mat = matching_loss(augmented, partner_views,
                                             model.head_config.match_norm)

                objective = total_loss(loss_rec, loss_dec, loss_mat,
                                       config.gamma_dec, config.gamma_mat)
                if config.loss_reduction == "mean":
                    objective = ad.scale(objective, 1.0 / bsz)
                value = objective.item()
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch} "
                        f"(rec={loss_rec.item():.4g}"
                        + (f", dec={loss_dec.item():.4g}" if loss_dec is not None else "")
                        + (f", mat={loss_mat.item():.4g}" if loss_mat is not None else "")
                        + ")"
                    )
                grads = tape.backward(objective)

            if config.grad_clip is not None:
                grads = clip_gradients(grads, config.grad_clip)
            optimizer.step(grads)

            sum_rec += loss_rec.item()
            sum_dec += loss_dec.item() if loss_dec is not None else 0.0
            sum_mat += loss_mat.item() if loss_mat is not None else 0.0

        val_recall = eval_fn(model, val_samples)
        log.append(EpochLog(
            epoch=epoch,
            loss_rec=sum_rec / n,
            loss_dec=sum_dec / n,
            loss_mat=sum_mat / n,
            val_recall10=val_recall,
            skipped_match=skipped_match,
            seconds=time.perf_counter() - started,
        ))

        if val_recall > best_recall:
            best_recall = val_recall
            best_epoch = epoch
            best_state = model.state_snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    model.load_snapshot(best_state)
    return FitResult(model=model, log=log, best_epoch=best_epoch,
                     best_recall10=best_recall, epochs_run=len(log))
