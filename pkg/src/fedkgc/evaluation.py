"""Link-prediction scoring with neighborhood re-ranking, filtered ranks, MRR and Hits@k."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .encoder import (EncoderConfig, UnknownRelationError, encode_sequences,
                      entity_rows, query_rows)
from .kg import KnowledgeGraph, KnownTripleIndex, build_filter_index, k_hop_neighbors

FILTER_SCOPES = {"all_splits": ("train", "valid", "test"), "train_only": ("train",)}


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.01
    hops: int = 5
    filter_scope: str = "all_splits"
    rerank: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.filter_scope not in FILTER_SCOPES:
            raise ValueError(f"filter_scope must be one of {sorted(FILTER_SCOPES)}")

    def to_dict(self) -> dict:
        return asdict(self)


class Query(NamedTuple):
    anchor: int
    relation: int
    direction: str  # "tail" predicts (anchor, r, ?), "head" predicts (?, r, anchor)


@dataclass
class RankedQueryResult:
    query: Query
    gold: int
    rank: int
    top10: list[tuple[int, float]]

    def to_json(self) -> dict:
        return {"anchor": self.query.anchor, "relation": self.query.relation,
                "direction": self.query.direction, "gold": self.gold, "rank": self.rank,
                "top10": [[i, round(s, 6)] for i, s in self.top10]}


def _summary(ranks: Sequence[int]) -> dict:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        return {"mrr": 0.0, "hits1": 0.0, "hits10": 0.0, "query_count": 0}
    return {"mrr": float(100.0 * np.mean(1.0 / r)),
            "hits1": float(100.0 * np.mean(r <= 1)),
            "hits10": float(100.0 * np.mean(r <= 10)),
            "query_count": int(r.size)}


@dataclass
class MetricsReport:
    client: str
    ranks: dict[str, list[int]] = field(default_factory=lambda: {"tail": [], "head": []})
    skipped_count: int = 0

    def all_ranks(self) -> list[int]:
        return self.ranks["tail"] + self.ranks["head"]

    @property
    def mrr(self) -> float:
        return _summary(self.all_ranks())["mrr"]

    @property
    def hits1(self) -> float:
        return _summary(self.all_ranks())["hits1"]

    @property
    def hits10(self) -> float:
        return _summary(self.all_ranks())["hits10"]

    @property
    def query_count(self) -> int:
        return len(self.all_ranks())

    def to_json(self) -> dict:
        out = _round(_summary(self.all_ranks()))
        out["skipped_count"] = self.skipped_count
        out["directions"] = {d: _round(_summary(self.ranks[d])) for d in ("tail", "head")}
        return out


def _round(d: dict) -> dict:
    return {k: (round(v, 3) if isinstance(v, float) else v) for k, v in d.items()}


def combine_reports(reports: Sequence[MetricsReport], name: str = "all") -> MetricsReport:
    out = MetricsReport(name)
    for r in reports:
        out.ranks["tail"] += r.ranks["tail"]
        out.ranks["head"] += r.ranks["head"]
        out.skipped_count += r.skipped_count
    return out


def report_json(reports: Sequence[MetricsReport]) -> str:
    doc = {"clients": {r.client: r.to_json() for r in reports},
           "aggregate": combine_reports(reports).to_json()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


class Scorer:
    """Caches entity embeddings and neighborhoods for one (weights, graph) pass."""

    def __init__(self, w: Mapping[str, np.ndarray], g: KnowledgeGraph, cfg: EvalConfig,
                 enc: EncoderConfig, chunk: int = 2048):
        self.w, self.g, self.cfg, self.enc = w, g, cfg, enc
        self.tk = enc.tokenizer()
        blocks = []
        for start in range(0, g.num_entities, chunk):
            seqs = [entity_rows(self.tk, text) for text in g.entities[start:start + chunk]]
            emb, _ = encode_sequences(w, seqs)
            blocks.append(emb)
        self.entity_emb = np.concatenate(blocks) if blocks else np.zeros((0, enc.dim))
        self._hood: dict[int, np.ndarray] = {}

    def neighborhood(self, entity: int) -> np.ndarray:
        mask = self._hood.get(entity)
        if mask is None:
            mask = np.zeros(self.g.num_entities, dtype=bool)
            nbrs = k_hop_neighbors(self.g, entity, self.cfg.hops)
            if nbrs:
                mask[list(nbrs)] = True
            self._hood[entity] = mask
        return mask

    def query_rows(self, q: Query):
        return query_rows(self.w, self.tk, self.enc, self.g.entities[q.anchor],
                          self.g.relations[q.relation], inverse=(q.direction == "head"))

    def encode_queries(self, queries: Sequence[Query]):
        """Embeddings for the encodable queries and the positions that were skipped."""
        seqs, keep, skipped = [], [], []
        for i, q in enumerate(queries):
            try:
                seqs.append(self.query_rows(q))
                keep.append(i)
            except UnknownRelationError:
                skipped.append(i)
        emb = encode_sequences(self.w, seqs)[0] if seqs else np.zeros((0, self.enc.dim))
        return emb, keep, skipped

    def scores(self, q: Query, q_emb: np.ndarray | None = None) -> np.ndarray:
        if q_emb is None:
            q_emb = encode_sequences(self.w, [self.query_rows(q)])[0][0]
        s = self.entity_emb @ q_emb
        if self.cfg.rerank and self.cfg.alpha > 0:
            s = s + self.cfg.alpha * self.neighborhood(q.anchor)
        return s


def score_candidates(w, g: KnowledgeGraph, query: Query, cfg: EvalConfig, enc: EncoderConfig) -> np.ndarray:
    """Cosine(query, candidate) plus the neighborhood bonus, for every entity of ``g``."""
    return Scorer(w, g, cfg, enc).scores(Query(*query))


def known_answers(index: KnownTripleIndex, q: Query) -> set[int]:
    if q.direction == "tail":
        return index.lookup_tails(q.anchor, q.relation)
    return index.lookup_heads(q.anchor, q.relation)


def filtered_rank(scores: np.ndarray, gold: int, filtered: set[int] | KnownTripleIndex,
                  query: Query | None = None) -> int:
    """1-based rank of ``gold`` after removing other known answers.

    ``filtered`` is either the set of known answers or an index plus ``query``.
    Ties go to the lower entity id.
    """
    if isinstance(filtered, KnownTripleIndex):
        filtered = known_answers(filtered, Query(*query))
    scores = np.asarray(scores)
    s_gold = scores[gold]
    ids = np.arange(len(scores))
    ahead = (scores > s_gold) | ((scores == s_gold) & (ids < gold))
    if filtered:
        drop = np.fromiter((f for f in filtered if f != gold), dtype=np.int64)
        ahead[drop] = False
    return int(ahead.sum()) + 1


def _top10(scores: np.ndarray, gold: int, filtered: set[int]) -> list[tuple[int, float]]:
    keep = np.ones(len(scores), dtype=bool)
    for f in filtered:
        if f != gold:
            keep[f] = False
    ids = np.flatnonzero(keep)
    order = np.lexsort((ids, -scores[ids]))[:10]
    return [(int(ids[i]), float(scores[ids[i]])) for i in order]


def split_queries(g: KnowledgeGraph, split: str) -> list[tuple[Query, int]]:
    out = []
    for h, r, t in g.splits[split]:
        out.append((Query(h, r, "tail"), t))
        out.append((Query(t, r, "head"), h))
    return out


def evaluate(w, g: KnowledgeGraph, split: str, cfg: EvalConfig, enc: EncoderConfig,
             threads: int = 1, dump: list | None = None) -> MetricsReport:
    """Rank every tail and head query of ``split``. Per-query results go to ``dump`` if given."""
    if split not in g.splits:
        raise ValueError(f"unknown split {split!r}")
    items = split_queries(g, split)
    if not items:
        raise ValueError(f"split {split!r} of {g.client_name!r} is empty")
    scorer = Scorer(w, g, cfg, enc)
    index = build_filter_index(g, FILTER_SCOPES[cfg.filter_scope])
    q_emb, keep, skipped = scorer.encode_queries([q for q, _ in items])
    # neighborhoods are filled lazily; warm them so worker threads only read
    if cfg.rerank and cfg.alpha > 0:
        for i in keep:
            scorer.neighborhood(items[i][0].anchor)

    def rank_one(pos: int):
        q, gold = items[keep[pos]]
        s = scorer.scores(q, q_emb[pos])
        known = known_answers(index, q)
        rank = filtered_rank(s, gold, known)
        top = _top10(s, gold, known) if dump is not None else []
        return RankedQueryResult(q, gold, rank, top)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(rank_one, range(len(keep))))
    else:
        results = [rank_one(p) for p in range(len(keep))]

    report = MetricsReport(g.client_name, skipped_count=len(skipped))
    for res in results:
        report.ranks[res.query.direction].append(res.rank)
    if dump is not None:
        dump.extend(results)
    return report
