"""Margin contrastive loss with in-batch negatives, analytic gradients, and Adam."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoder import (EncoderConfig, GradientSet, ModelWeights, Tokenizer, backprop_sequences,
                      encode_sequences, entity_rows, query_rows)
from .kg import KnowledgeGraph, Triple


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    temperature: float = 0.05
    margin: float = 0.02
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Triples plus the texts needed to encode them.

    Each triple yields a forward pair (query (h, r), target t) and an inverse
    pair (query (t, r'), target h).
    """
    triples: list[Triple]
    entity_texts: Sequence[str]
    relation_texts: Sequence[str]

    @classmethod
    def from_graph(cls, g: KnowledgeGraph, triples: Sequence[Triple]) -> "Batch":
        return cls([Triple(*t) for t in triples], g.entities, g.relations)

    def __len__(self):
        return len(self.triples)


def negative_mask(target_ids: Sequence[int]) -> np.ndarray:
    """mask[i, j] is True when column j is an in-batch negative for row i.

    Negatives are distinct entities: a column is skipped when its entity equals
    the row's gold entity or when an earlier column already holds that entity.
    """
    ids = np.asarray(target_ids)
    n = len(ids)
    first = np.zeros(n, dtype=bool)
    _, idx = np.unique(ids, return_index=True)
    first[idx] = True
    return (ids[None, :] != ids[:, None]) & first[None, :]


def contrastive_loss(queries: np.ndarray, targets: np.ndarray, neg_mask: np.ndarray,
                     margin: float, temperature: float):
    """Per-row losses and gradients w.r.t. query and target embeddings.

    Row i's positive is targets[i]; its negatives are targets[j] where
    ``neg_mask[i, j]``. Returns (losses, d_queries, d_targets) where the
    gradients are of ``losses.sum()``.
    """
    sims = queries @ targets.T
    logits = sims / temperature
    n = len(queries)
    diag = np.arange(n)
    logits[diag, diag] = (sims[diag, diag] - margin) / temperature
    include = neg_mask.copy()
    include[diag, diag] = True
    masked = np.where(include, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    z = np.exp(masked - top)
    lse = top[:, 0] + np.log(z.sum(axis=1))
    losses = lse - logits[diag, diag]
    probs = z / z.sum(axis=1, keepdims=True)
    probs[diag, diag] -= 1.0
    g_sims = probs / temperature
    return losses, g_sims @ targets, g_sims.T @ queries


def pair_loss(pos_sim: float, neg_sims: Sequence[float], margin: float, temperature: float) -> float:
    """Scalar form of the loss for one query, for spot checks."""
    logits = np.array([(pos_sim - margin) / temperature] + [s / temperature for s in neg_sims])
    top = logits.max()
    return float(top + np.log(np.exp(logits - top).sum()) - logits[0])


def batch_loss(w: ModelWeights, batch: Batch, cfg: TrainConfig, enc: EncoderConfig,
               tk: Tokenizer | None = None, allow_empty_negatives: bool = False):
    """Mean loss over the 2B (query, target) pairs of a batch, and its gradients."""
    if len(batch) < 2 and not allow_empty_negatives:
        raise DegenerateBatchError("batch needs at least 2 triples")
    tk = tk or enc.tokenizer()
    ents, rels = batch.entity_texts, batch.relation_texts
    seqs = []
    for h, r, t in batch.triples:
        seqs.append(query_rows(w, tk, enc, ents[h], rels[r], inverse=False))
    for h, r, t in batch.triples:
        seqs.append(query_rows(w, tk, enc, ents[t], rels[r], inverse=True))
    for h, r, t in batch.triples:
        seqs.append(entity_rows(tk, ents[t]))
    for h, r, t in batch.triples:
        seqs.append(entity_rows(tk, ents[h]))
    emb, cache = encode_sequences(w, seqs)
    b = len(batch)
    q_fwd, q_inv, t_fwd, t_inv = emb[:b], emb[b:2 * b], emb[2 * b:3 * b], emb[3 * b:]

    mask_fwd = negative_mask([t for _, _, t in batch.triples])
    mask_inv = negative_mask([h for h, _, _ in batch.triples])
    if not allow_empty_negatives and not (mask_fwd.any() or mask_inv.any()):
        raise DegenerateBatchError("every pair in the batch has an empty negative set")

    loss_f, gq_f, gt_f = contrastive_loss(q_fwd, t_fwd, mask_fwd, cfg.margin, cfg.temperature)
    loss_i, gq_i, gt_i = contrastive_loss(q_inv, t_inv, mask_inv, cfg.margin, cfg.temperature)
    n_pairs = 2 * b
    loss = (loss_f.sum() + loss_i.sum()) / n_pairs
    g_emb = np.concatenate([gq_f, gq_i, gt_f, gt_i]) / n_pairs
    grads = backprop_sequences(cache, g_emb, {name: w[name].shape for name in cache.names})
    return float(loss), grads


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(w: ModelWeights, grads: GradientSet, state: AdamState, cfg: TrainConfig):
    """In-place Adam update restricted to the rows each gradient touches."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in grads:
        g = grads[name]
        if name not in w:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if g.shape != w[name].shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w[name].shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w[name])
            state.v[name] = np.zeros_like(w[name])
        elif state.m[name].shape != w[name].shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
        rows = grads.rows[name]
        gr = g[rows]
        m = state.m[name]
        v = state.v[name]
        m[rows] = cfg.beta1 * m[rows] + (1.0 - cfg.beta1) * gr
        v[rows] = cfg.beta2 * v[rows] + (1.0 - cfg.beta2) * gr * gr
        w[name][rows] -= cfg.lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + cfg.adam_eps)
    return w, state


def epoch_rng(seed: int, round_idx: int, client: int) -> np.random.Generator:
    return np.random.default_rng([seed & (2**64 - 1), round_idx, client])


def iter_batches(triples: Sequence[Triple], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(triples))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            break
        yield [triples[i] for i in chunk]


def train_local_epoch(w: ModelWeights, g: KnowledgeGraph, cfg: TrainConfig, enc: EncoderConfig,
                      round_idx: int, client: int, state: AdamState | None = None,
                      on_step: Callable[[int, float], None] | None = None):
    """One shuffled pass over ``g``'s train split. Returns (new weights, mean loss).

    ``w`` is not modified. ``state`` (if given) is updated in place so callers
    can carry optimizer moments across epochs.
    """
    if not g.train:
        raise ValueError(f"client {g.client_name!r} has an empty train split")
    w = w.copy()
    state = state if state is not None else AdamState()
    tk = enc.tokenizer()
    total, count = 0.0, 0
    for triples in iter_batches(g.train, cfg.batch_size, epoch_rng(cfg.seed, round_idx, client)):
        loss, grads = batch_loss(w, Batch(triples, g.entities, g.relations), cfg, enc, tk)
        adam_step(w, grads, state, cfg)
        total += loss * len(triples)
        count += len(triples)
        if on_step is not None:
            on_step(state.step, loss)
    if count == 0:
        raise ValueError(f"client {g.client_name!r} has fewer than 2 train triples")
    return w, total / count
