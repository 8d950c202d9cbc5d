"""Finite-difference verification of the contrastive loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, ModelWeights, init_weights
from .kg import Triple
from .training import Batch, TrainConfig, batch_loss

WORDS = ["amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "heron",
         "inlet", "juniper", "kestrel", "larch", "maple", "nectar", "onyx", "pine"]


@dataclass
class GradcheckResult:
    seed: int
    max_rel_error: float
    max_abs_error_small: float
    worst_param: str
    worst_index: tuple
    passed: bool


def random_problem(seed: int, vocab_size=32, dim=8, prefix_len=2, batch_size=4, n_relations=3):
    rng = np.random.default_rng(seed)
    enc = EncoderConfig(dim=dim, prefix_len=prefix_len, vocab_size=vocab_size, max_tokens=4)
    n_ent = 2 * batch_size
    entities = [" ".join(rng.choice(WORDS, size=rng.integers(1, 4))) + f" e{i}" for i in range(n_ent)]
    relations = [f"rel{i} {WORDS[i]}" for i in range(n_relations)]
    triples = []
    heads = rng.permutation(n_ent)[:batch_size]
    tails = rng.permutation(n_ent)[:batch_size]
    for h, t in zip(heads, tails):
        triples.append(Triple(int(h), int(rng.integers(n_relations)), int(t)))
    # standard-normal entries; the loss is invariant to a global rescale of every row
    w = init_weights(enc, relations, seed)
    for name in w:
        w[name] = rng.standard_normal(w[name].shape)
    return w, Batch(triples, entities, relations), enc


def check_gradients(w: ModelWeights, batch: Batch, cfg: TrainConfig, enc: EncoderConfig,
                    eps: float = 1e-4, rel_tol: float = 1e-5, abs_tol: float = 1e-8,
                    small: float = 1e-6, corrupt: bool = False, seed: int = 0) -> GradcheckResult:
    """Compare every analytic partial with a central difference.

    Elements with |grad| < ``small`` are judged on absolute error, the rest on
    relative error.
    """
    _, grads = batch_loss(w, batch, cfg, enc)
    if corrupt:
        name = next(iter(grads))
        row = grads.rows[name][0]
        grads[name][row, 0] += 1e-3
    worst = (0.0, "", ())
    worst_small = 0.0
    ok = True
    probe = w.copy()
    for name in w:
        analytic = grads[name] if name in grads else np.zeros_like(w[name])
        arr = probe[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up, _ = batch_loss(probe, batch, cfg, enc)
            arr[idx] = orig - eps
            down, _ = batch_loss(probe, batch, cfg, enc)
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[idx]
            if max(abs(a), abs(numeric)) < small:
                err = abs(a - numeric)
                worst_small = max(worst_small, err)
                if err > abs_tol:
                    ok = False
                    if worst[0] < np.inf:
                        worst = (np.inf, name, idx)
            else:
                rel = abs(a - numeric) / max(abs(a), abs(numeric))
                if rel > worst[0]:
                    worst = (rel, name, idx)
                if rel > rel_tol:
                    ok = False
    return GradcheckResult(seed, worst[0], worst_small, worst[1], tuple(int(i) for i in worst[2]), ok)


def run_gradcheck(seeds=range(10), eps: float = 1e-4, rel_tol: float = 1e-5,
                  corrupt: bool = False, cfg: TrainConfig | None = None) -> list[GradcheckResult]:
    cfg = cfg or TrainConfig(batch_size=4)
    results = []
    for seed in seeds:
        w, batch, enc = random_problem(seed)
        results.append(check_gradients(w, batch, cfg, enc, eps=eps, rel_tol=rel_tol,
                                       corrupt=corrupt, seed=seed))
    return results
