"""Shift-level representation branches, training losses, and scoring.

On top of the backbone user vector ``z`` the model runs ``V`` independent
branches, each a residual projection followed by dropout and layer norm:
``branch_v(z) = layer_norm(dropout(z + W_v z + b_v))``.  Branch ``v`` is
meant to describe the user under shift level ``v``; three objectives shape
the branches:

* a decomposition loss: softmax cross-entropy over the ``V`` branch-target
  dot products, with the sample's assessed shift level as the true class —
  pulling the indicated branch toward the target embedding and pushing the
  others away;
* a matching loss: symmetric InfoNCE between a dropout-augmented view of a
  user's summed branch vector and the summed branch vector of another
  sample that shares both target item and shift level, against in-batch
  negatives;
* the recommendation loss: softmax cross-entropy over all candidate items.

Scoring weights the branches per candidate: the softmax of the branch-
candidate dot products is the candidate-specific shift distribution, and
the preference score is the distribution-weighted sum of those same dots.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig, encode_batch, init_encoder_params

CHECKPOINT_MAGIC = "shiftrec-checkpoint"
CHECKPOINT_VERSION = 1

MATCH_NORMS = ("l2", "layernorm")


@dataclass(frozen=True)
class HeadConfig:
    """Shift-branch head settings.

    ``n_levels`` is the number of parallel branches; 1 gives the degenerate
    single-branch head used as an ablation baseline.  ``mean_pool_scoring``
    replaces the learned per-candidate mixture with a plain average over
    branches.
    """

    n_levels: int = 5
    sic_dropout: float = 0.1
    aug_dropout: float = 0.1
    match_norm: str = "l2"
    mean_pool_scoring: bool = False

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError(f"need at least one branch, got {self.n_levels}")
        if self.match_norm not in MATCH_NORMS:
            raise ValueError(f"unknown match_norm {self.match_norm!r}, expected one of {MATCH_NORMS}")


def init_head_params(d: int, n_levels: int, rng: np.random.Generator) -> dict:
    params: dict[str, Tensor] = {}
    bound = 1.0 / np.sqrt(d)
    for v in range(n_levels):
        params[f"sic{v}_w"] = Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True, name=f"sic{v}_w")
        params[f"sic{v}_b"] = Tensor(np.zeros(d), requires_grad=True, name=f"sic{v}_b")
        params[f"sic{v}_ln_gain"] = Tensor(np.ones(d), requires_grad=True, name=f"sic{v}_ln_gain")
        params[f"sic{v}_ln_bias"] = Tensor(np.zeros(d), requires_grad=True, name=f"sic{v}_ln_bias")
    return params


def branch_forward(z: Tensor, params: dict, v: int, dropout_rate: float,
                   rng: np.random.Generator | None, train: bool) -> Tensor:
    """One branch: layer_norm(dropout(z + W z + b)) with branch-own parameters."""
    projected = ad.add(ad.matmul(z, ad.transpose(params[f"sic{v}_w"], (1, 0))), params[f"sic{v}_b"])
    residual = ad.add(z, projected)
    dropped = ad.dropout(residual, dropout_rate, rng, train)
    return ad.layer_norm(dropped, params[f"sic{v}_ln_gain"], params[f"sic{v}_ln_bias"])


def shift_representations(z: Tensor, params: dict, config: HeadConfig,
                          rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """All branch outputs stacked: [batch, V, d] from a [batch, d] user vector."""
    branches = [
        branch_forward(z, params, v, config.sic_dropout, rng, train)
        for v in range(config.n_levels)
    ]
    return ad.stack(branches, axis=1)


# ---------------------------------------------------------------------------
# losses


def decomposition_loss(reprs: Tensor, target_emb: Tensor, levels) -> Tensor:
    """Cross-entropy pulling the level-indicated branch toward the target.

    ``reprs`` is [batch, V, d], ``target_emb`` [batch, d], ``levels`` integer
    levels in [1, V].  Returns the summed loss over the batch.
    """
    levels = np.asarray(levels, dtype=np.int64)
    dots = ad.matmul(reprs, ad.reshape(target_emb, (*target_emb.shape, 1)))
    dots = ad.reshape(dots, reprs.shape[:2])  # [batch, V]
    log_probs = ad.log_softmax(dots, axis=1)
    picked = ad.gather(log_probs, (levels - 1)[:, None])
    return ad.scale(ad.tsum(picked), -1.0)


def basic_views(reprs: Tensor) -> Tensor:
    """Sum over branches (not mean): [batch, V, d] -> [batch, d]."""
    return ad.tsum(reprs, axis=1)


def _normalize_views(x: Tensor, how: str) -> Tensor:
    if how == "l2":
        norms = ad.sqrt(ad.tsum(ad.mul(x, x), axis=-1, keepdims=True))
        return ad.div(x, norms)
    # parameter-free standardization over the feature axis
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    std = ad.sqrt(ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True))
    return ad.div(centered, std)


def matching_loss(augmented: Tensor, partner: Tensor, match_norm: str = "l2") -> Tensor:
    """Symmetric InfoNCE over positive view pairs with in-batch negatives.

    ``augmented`` and ``partner`` are [batch, d]; row i of each forms the
    positive pair, all other rows of the opposite matrix are its negatives.
    Similarity is the inner product of normalized vectors; no temperature.
    Returns the sum of both directions over the batch.
    """
    n = augmented.shape[0]
    if n < 2:
        raise ValueError("no in-batch negatives: matching needs at least 2 pairs")
    a = _normalize_views(augmented, match_norm)
    b = _normalize_views(partner, match_norm)
    sims = ad.matmul(a, ad.transpose(b, (1, 0)))  # [n, n]
    diag = np.arange(n)[:, None]
    forward = ad.gather(ad.log_softmax(sims, axis=1), diag)
    backward = ad.gather(ad.log_softmax(sims, axis=0), diag)
    return ad.scale(ad.add(ad.tsum(forward), ad.tsum(backward)), -1.0)


def recommendation_loss(scores: Tensor, targets) -> Tensor:
    """Softmax cross-entropy over all candidates; summed over the batch.

    ``scores`` is [batch, n_items] with column k scoring item index k + 1;
    ``targets`` holds item indices (1-based, padding excluded).
    """
    targets = np.asarray(targets, dtype=np.int64)
    log_probs = ad.log_softmax(scores, axis=1)
    picked = ad.gather(log_probs, (targets - 1)[:, None])
    return ad.scale(ad.tsum(picked), -1.0)


def total_loss(rec: Tensor, dec: Tensor | None, mat: Tensor | None,
               gamma_dec: float, gamma_mat: float) -> Tensor:
    """Weighted multi-task objective; absent components contribute nothing."""
    if gamma_dec < 0 or gamma_mat < 0:
        raise ValueError("loss weights must be nonnegative")
    out = rec
    if dec is not None and gamma_dec > 0:
        out = ad.add(out, ad.scale(dec, gamma_dec))
    if mat is not None and gamma_mat > 0:
        out = ad.add(out, ad.scale(mat, gamma_mat))
    return out


# ---------------------------------------------------------------------------
# prediction


def candidate_scores(reprs: Tensor, candidate_emb: Tensor, mean_pool: bool = False) -> Tensor:
    """Preference scores [batch, n] over candidate embeddings [n, d].

    For each candidate, the branch-candidate dot products are softmaxed into
    the candidate-specific shift distribution and the score is the
    distribution-weighted sum of those dots (equivalently, the dot product
    of the mixed representation with the candidate).  ``mean_pool`` swaps
    the learned mixture for a plain average over branches.
    """
    dots = ad.matmul(reprs, ad.transpose(candidate_emb, (1, 0)))  # [batch, V, n]
    if mean_pool:
        return ad.tmean(dots, axis=1)
    weights = ad.softmax(dots, axis=1)
    return ad.tsum(ad.mul(weights, dots), axis=1)


def shift_distribution(reprs: Tensor, candidate: Tensor) -> Tensor:
    """Softmax weights [batch, V] of one candidate vector [d] against each branch."""
    dots = ad.matmul(reprs, ad.reshape(candidate, (-1, 1)))
    return ad.softmax(ad.reshape(dots, reprs.shape[:2]), axis=1)


def distributions_at_targets(reprs: Tensor, target_emb: Tensor) -> np.ndarray:
    """Shift distribution of every sample at its own target: [batch, V]."""
    dots = ad.matmul(reprs, ad.reshape(target_emb, (*target_emb.shape, 1)))
    return ad.softmax(ad.reshape(dots, reprs.shape[:2]), axis=1).data


# ---------------------------------------------------------------------------
# model bundle


class ShiftModel:
    """Encoder + head parameters with their configs; the trainable unit."""

    def __init__(self, encoder_config: EncoderConfig, head_config: HeadConfig,
                 n_items: int, params: dict):
        self.encoder_config = encoder_config
        self.head_config = head_config
        self.n_items = n_items
        self.params = params

    @classmethod
    def build(cls, encoder_config: EncoderConfig, head_config: HeadConfig,
              n_items: int, seed: int) -> "ShiftModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
        params = init_encoder_params(encoder_config, n_items, rng)
        params.update(init_head_params(encoder_config.d, head_config.n_levels, rng))
        return cls(encoder_config, head_config, n_items, params)

    def item_embeddings(self) -> Tensor:
        """Embeddings of the scoring vocabulary (padding row excluded): [n_items, d]."""
        return ad.index_select(self.params["item_emb"], np.arange(1, self.n_items + 1), axis=0)

    def target_embeddings(self, targets) -> Tensor:
        return ad.embedding_lookup(self.params["item_emb"], np.asarray(targets, dtype=np.int64))

    def representations(self, items, *, rng: np.random.Generator | None = None,
                        train: bool = False) -> Tensor:
        z = encode_batch(self.params, self.encoder_config, items, rng=rng, train=train)
        return shift_representations(z, self.params, self.head_config, rng=rng, train=train)

    def scores(self, items, *, rng: np.random.Generator | None = None,
               train: bool = False) -> Tensor:
        reprs = self.representations(items, rng=rng, train=train)
        return candidate_scores(reprs, self.item_embeddings(),
                                mean_pool=self.head_config.mean_pool_scoring)

    def parameter_list(self) -> list:
        return list(self.params.items())

    # -- persistence --------------------------------------------------------

    def save(self, path, provenance: dict | None = None) -> None:
        meta = {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "n_items": self.n_items,
            "encoder_config": asdict(self.encoder_config),
            "head_config": asdict(self.head_config),
            "provenance": provenance or {},
        }
        arrays = {name: t.data for name, t in self.params.items()}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ShiftModel", dict]:
        with np.load(path, allow_pickle=False) as arrays:
            try:
                meta = json.loads(bytes(arrays["meta"]).decode("utf-8"))
            except KeyError:
                raise ValueError(f"{path}: not a checkpoint (missing metadata)")
            if meta.get("magic") != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint (bad magic)")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            params = {
                name: Tensor(arrays[name], requires_grad=True, name=name)
                for name in arrays.files
                if name != "meta"
            }
        model = cls(
            encoder_config=EncoderConfig(**meta["encoder_config"]),
            head_config=HeadConfig(**meta["head_config"]),
            n_items=meta["n_items"],
            params=params,
        )
        return model, meta.get("provenance", {})

    def state_snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_snapshot(self, snapshot: dict) -> None:
        for name, data in snapshot.items():
            self.params[name].data = data.copy()


def config_digest(payload: dict) -> str:
    """Stable short hash of a config mapping, for output provenance."""
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
