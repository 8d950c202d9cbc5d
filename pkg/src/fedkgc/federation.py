"""Server/client round loop, weighted aggregation, and the two non-federated baselines."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoder import PREFIX, TOK_EMB, EncoderConfig, ModelWeights, init_weights, prefix_name, relation_key
from .kg import KnowledgeGraph, Triple
from .training import AdamState, TrainConfig, train_local_epoch

log = logging.getLogger(__name__)

SELECTION = ("sequential", "random")
WEIGHTING = ("equal", "triples")
SCOPES = ("all", "tok_emb")
MODES = ("federated", "data_aggregation", "isolated")


class ClientTrainingError(RuntimeError):
    def __init__(self, round_idx: int, client: int, cause: BaseException):
        self.round = round_idx
        self.client = client
        super().__init__(f"round {round_idx}: client {client} failed: {cause}")


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 30
    clients_per_round: int = 1
    selection: str = "sequential"
    weighting: str = "equal"
    scope: str = "all"
    mode: str = "federated"
    eval_weights: str = "global"
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")
        for value, allowed, label in ((self.selection, SELECTION, "selection"),
                                      (self.weighting, WEIGHTING, "weighting"),
                                      (self.scope, SCOPES, "scope"),
                                      (self.mode, MODES, "mode"),
                                      (self.eval_weights, ("global", "local"), "eval_weights")):
            if value not in allowed:
                raise ValueError(f"{label} must be one of {allowed}, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundLog:
    round: int
    selected: list[int]
    losses: dict[int, float]
    checksum: str

    def to_json(self) -> dict:
        return {"round": self.round, "selected": self.selected,
                "losses": {str(k): v for k, v in sorted(self.losses.items())},
                "checksum": self.checksum}


@dataclass
class ServerState:
    weights: ModelWeights
    round: int = 0
    history: list[RoundLog] = field(default_factory=list)


class ClientHandle:
    """A simulated client. The server only sees weights and metadata through it.

    The graph lives in ``_graph``; no public method returns triples or texts.
    """

    def __init__(self, index: int, graph: KnowledgeGraph, enc: EncoderConfig):
        self.index = index
        self._graph = graph
        self._enc = enc
        self._opt = AdamState()
        self._local: ModelWeights | None = None

    @property
    def name(self) -> str:
        return self._graph.client_name

    @property
    def num_train_triples(self) -> int:
        return len(self._graph.train)

    def relation_names(self) -> list[str]:
        """Relation surface texts, i.e. the parameter-name metadata the server needs."""
        return list(self._graph.relations)

    def tokenizer_config(self) -> dict:
        tk = self._enc.tokenizer()
        return {"mode": tk.mode, "num_buckets": tk.num_buckets, "lowercase": tk.lowercase,
                "max_tokens": tk.max_tokens}

    def owned_names(self) -> list[str]:
        names = [TOK_EMB]
        if self._enc.relation_mode == "parameterized":
            names += [prefix_name(relation_key(r, inv)) for r in self._graph.relations for inv in (False, True)]
        return sorted(names)

    def receive(self, global_weights: ModelWeights, scope: str) -> ModelWeights:
        """Merge the global payload into this client's local weights."""
        if self._local is None or scope == "all":
            self._local = global_weights.copy()
        else:
            for name in aggregated_names(global_weights, scope):
                self._local[name] = global_weights[name].copy()
        return self._local

    def train(self, global_weights: ModelWeights, train_cfg: TrainConfig, round_idx: int, scope: str,
              on_step: Callable[[int, float], None] | None = None) -> tuple[ModelWeights, float]:
        """Receive weights, run the local epochs, return a copy of the owned tensors."""
        w = self.receive(global_weights, scope)
        losses = []
        for epoch in range(train_cfg.epochs):
            w, loss = train_local_epoch(w, self._graph, train_cfg, self._enc,
                                        _epoch_index(round_idx, epoch, train_cfg.epochs),
                                        self.index, self._opt, on_step)
            losses.append(loss)
        self._local = w
        return w.subset(self._upload_names(scope)), float(np.mean(losses))

    def local_weights(self) -> ModelWeights | None:
        return None if self._local is None else self._local.copy()

    def evaluate(self, w: ModelWeights, split: str, eval_cfg) -> "MetricsReport":
        from .evaluation import evaluate
        return evaluate(w, self._graph, split, eval_cfg, self._enc)

    def _upload_names(self, scope: str) -> list[str]:
        owned = self.owned_names()
        return owned if scope == "all" else [n for n in owned if n == TOK_EMB]


def _epoch_index(round_idx: int, epoch: int, epochs: int) -> int:
    # distinct shuffle stream per (round, local epoch)
    return (round_idx - 1) * epochs + epoch + 1


def aggregated_names(w, scope: str) -> list[str]:
    return [n for n in w if scope == "all" or n == TOK_EMB]


def select_clients(strategy: str, num_clients: int, m: int, round_idx: int, seed: int) -> list[int]:
    """Client indices for a round (rounds are 1-based)."""
    if not 1 <= m <= num_clients:
        raise ValueError(f"clients per round must be in [1, {num_clients}], got {m}")
    if strategy == "sequential":
        start = (round_idx - 1) * m
        return sorted({(start + j) % num_clients for j in range(m)})
    if strategy == "random":
        rng = np.random.default_rng([seed & (2**64 - 1), round_idx])
        return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))
    raise ValueError(f"unknown selection strategy {strategy!r}")


def _digest(w: ModelWeights) -> bytes:
    return bytes.fromhex(w.checksum())


def aggregate(weight_sets: Sequence[tuple[ModelWeights, float]], scope: str = "all") -> ModelWeights:
    """Weighted average of every in-scope tensor over the inputs that hold it.

    Weights are renormalized over each tensor's owners. Names outside ``scope``
    pass through from their owner (the first one in canonical order if several
    hold it). Inputs are put in a canonical order (by weight, then content
    digest) first, so the result does not depend on argument order.
    """
    if not weight_sets:
        raise ValueError("nothing to aggregate")
    items = []
    for w, n in weight_sets:
        if not n > 0:
            raise ValueError(f"client weights must be > 0, got {n}")
        if not w.is_finite():
            raise ValueError("non-finite value in an aggregation input")
        items.append((float(n), _digest(w), w))
    items.sort(key=lambda x: (x[0], x[1]))

    out = ModelWeights()
    names = sorted({name for _, _, w in items for name in w})
    for name in names:
        owners = [(n, w[name]) for n, _, w in items if name in w]
        shape = owners[0][1].shape
        for _, arr in owners:
            if arr.shape != shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {shape}")
        if len(owners) == 1 or not (scope == "all" or name == TOK_EMB):
            out[name] = owners[0][1].copy()
            continue
        total = sum(n for n, _ in owners)
        acc = np.zeros(shape)
        for n, arr in owners:
            acc += (n / total) * arr
        stack = np.stack([arr for _, arr in owners])
        # rounding can step a hair outside the convex hull; identical inputs come back bit-exact
        out[name] = np.clip(acc, stack.min(axis=0), stack.max(axis=0))
    return out


def _relation_union(clients: Sequence[ClientHandle]) -> list[str]:
    seen: dict[str, None] = {}
    for c in clients:
        for r in c.relation_names():
            seen.setdefault(r, None)
    return sorted(seen)


@dataclass
class FederatedResult:
    global_weights: ModelWeights
    local_weights: dict[int, ModelWeights]
    history: list[RoundLog]


def run_federated(clients: Sequence[ClientHandle], fed: FedConfig, train: TrainConfig,
                  enc: EncoderConfig, threads: int = 1,
                  on_step: Callable[[int, int, int, float], None] | None = None) -> FederatedResult:
    """Run ``fed.rounds`` rounds of select / local train / aggregate."""
    if not clients:
        raise ValueError("need at least one client")
    tk_cfgs = {tuple(sorted(c.tokenizer_config().items())) for c in clients}
    if len(tk_cfgs) != 1:
        raise ValueError("clients disagree on tokenizer configuration")
    server = ServerState(init_weights(enc, _relation_union(clients), fed.seed))
    by_index = {c.index: c for c in clients}
    order = sorted(by_index)

    def work(idx: int, round_idx: int):
        client = by_index[idx]
        hook = None
        if on_step is not None:
            hook = lambda step, loss: on_step(round_idx, idx, step, loss)  # noqa: E731
        try:
            return client.train(server.weights, train, round_idx, fed.scope, hook)
        except Exception as exc:
            raise ClientTrainingError(round_idx, idx, exc) from exc

    for round_idx in range(1, fed.rounds + 1):
        positions = select_clients(fed.selection, len(order), fed.clients_per_round, round_idx, fed.seed)
        selected = [order[p] for p in positions]
        if threads > 1 and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(work, i, round_idx) for i in selected]
                results = [f.result() for f in futures]
        else:
            results = [work(i, round_idx) for i in selected]
        payloads = []
        for idx, (w, _) in zip(selected, results):
            n = by_index[idx].num_train_triples if fed.weighting == "triples" else 1.0
            payloads.append((w, n))
        merged = aggregate(payloads, fed.scope)
        new_global = server.weights.copy()
        for name in merged:
            if fed.scope == "all" or name == TOK_EMB:
                new_global[name] = merged[name]
        if not new_global.is_finite():
            raise ClientTrainingError(round_idx, selected[0], ValueError("non-finite aggregate"))
        server.weights = new_global
        server.round = round_idx
        entry = RoundLog(round_idx, selected, {i: loss for i, (_, loss) in zip(selected, results)},
                         new_global.checksum())
        server.history.append(entry)
        log.info("round %d clients %s loss %s", round_idx, selected,
                 ", ".join(f"{v:.4f}" for v in entry.losses.values()))
    local = {c.index: lw for c in clients if (lw := c.local_weights()) is not None}
    return FederatedResult(server.weights, local, server.history)


def weights_for_client(result_global: ModelWeights, local: ModelWeights | None, scope: str,
                       eval_weights: str = "global") -> ModelWeights:
    """Global weights merged with a client's local-scope tensors (or its last local weights)."""
    if local is None:
        return result_global
    if eval_weights == "local":
        return local
    w = result_global.copy()
    if scope != "all":
        for name in local:
            if name.startswith(PREFIX):
                w[name] = local[name]
    return w


def pool_graphs(graphs: Sequence[KnowledgeGraph]) -> KnowledgeGraph:
    """Disjoint union of train splits. Relations merge by surface text; entities never merge."""
    entities: list[str] = []
    relations: list[str] = sorted({r for g in graphs for r in g.relations})
    rel_index = {r: i for i, r in enumerate(relations)}
    train: list[Triple] = []
    for g in graphs:
        offset = len(entities)
        entities.extend(g.entities)
        for h, r, t in g.train:
            train.append(Triple(h + offset, rel_index[g.relations[r]], t + offset))
    return KnowledgeGraph("pooled", entities, relations, {"train": train})


def run_data_aggregation(graphs: Sequence[KnowledgeGraph], fed: FedConfig, train: TrainConfig,
                         enc: EncoderConfig,
                         on_step: Callable[[int, int, int, float], None] | None = None):
    """Centralized baseline: pool every client's raw train triples and train one model."""
    pooled = pool_graphs(graphs)
    return _train_alone(pooled, 0, fed, train, enc, on_step)


def run_isolated(graph: KnowledgeGraph, index: int, fed: FedConfig, train: TrainConfig,
                 enc: EncoderConfig,
                 on_step: Callable[[int, int, int, float], None] | None = None):
    """One client trained alone for ``fed.rounds * train.epochs`` epochs."""
    return _train_alone(graph, index, fed, train, enc, on_step)


def _train_alone(graph, index, fed, train, enc, on_step):
    # same seed discipline as run_federated with a single client
    client = ClientHandle(index, graph, enc)
    w = init_weights(enc, sorted(set(graph.relations)), fed.seed)
    history = []
    for round_idx in range(1, fed.rounds + 1):
        hook = None
        if on_step is not None:
            hook = lambda step, loss, r=round_idx: on_step(r, index, step, loss)  # noqa: E731
        try:
            w, loss = client.train(w, train, round_idx, fed.scope, hook)
        except Exception as exc:
            raise ClientTrainingError(round_idx, index, exc) from exc
        w = client.local_weights()
        history.append(RoundLog(round_idx, [index], {index: loss}, w.checksum()))
    return w, history
