"""Synthetic multilingual KGs projected from one shared latent fact set."""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .kg import KnowledgeGraph, Triple, load_kg, save_kg

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    languages: int = 3
    entities: int = 500
    relations: int = 20
    facts: int = 6000
    fractions: tuple[float, ...] = (0.5, 0.3, 0.1)
    surface_mode: str = "shared"
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    clusters: int = 10
    fanout: int = 10
    client_names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "splits", tuple(float(f) for f in self.splits))
        object.__setattr__(self, "client_names", tuple(self.client_names))
        if self.languages < 1:
            raise ValueError("languages must be >= 1")
        if len(self.fractions) != self.languages:
            raise ValueError(f"need {self.languages} fractions, got {len(self.fractions)}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ValueError("splits must be three non-negative fractions summing to 1")
        if self.surface_mode not in ("shared", "distinct"):
            raise ValueError("surface_mode must be 'shared' or 'distinct'")
        if self.client_names and len(self.client_names) != self.languages:
            raise ValueError("client_names must have one entry per language")
        if len(set(self.names())) != self.languages:
            raise ValueError("client names must be unique")
        if not 1 <= self.clusters <= self.entities:
            raise ValueError("clusters must be in [1, entities]")
        if self.clusters < 2:
            raise ValueError("need at least 2 clusters so relations link distinct clusters")
        if self.fanout < 1 or self.relations < 1 or self.facts < 1:
            raise ValueError("fanout, relations and facts must be >= 1")

    def names(self) -> list[str]:
        return list(self.client_names) or [f"kg{i}" for i in range(self.languages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fractions", "splits", "client_names"):
            d[k] = list(d[k])
        return d


@dataclass
class LatentWorld:
    entity_names: list[str]
    relation_names: list[str]
    cluster_of: list[int]
    facts: list[tuple[int, int, int]] = field(default_factory=list)


def _words(rng: np.random.Generator, n: int, syllables: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(list(CONSONANTS)) + rng.choice(list(VOWELS)) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def build_world(cfg: GenConfig) -> LatentWorld:
    """Clustered entities; each relation maps a source cluster to a destination cluster.

    A head at position i in its cluster links to a window of ``fanout`` tails
    around the matching position in a relation-specific ordering of the
    destination cluster. ``cfg.facts`` facts are drawn from that pool, after
    first drawing one fact per entity so every entity is used.
    """
    rng = np.random.default_rng([cfg.seed & (2**64 - 1), 0])
    taken: set[str] = set()
    cluster_words = _words(rng, cfg.clusters, 2, taken)
    entity_words = _words(rng, cfg.entities, 3, taken)
    rel_words = _words(rng, 2 * cfg.relations, 2, taken)
    cluster_of = [int(c) for c in rng.permutation(np.arange(cfg.entities) % cfg.clusters)]
    members = [[e for e in range(cfg.entities) if cluster_of[e] == c] for c in range(cfg.clusters)]
    entity_names = [f"{cluster_words[cluster_of[e]]} {entity_words[e]}" for e in range(cfg.entities)]
    relation_names = [f"{rel_words[2 * r]} {rel_words[2 * r + 1]}" for r in range(cfg.relations)]

    pool = []
    for r in range(cfg.relations):
        src = r % cfg.clusters
        dst = int((src + 1 + rng.integers(cfg.clusters - 1)) % cfg.clusters)
        heads, tails = members[src], [members[dst][i] for i in rng.permutation(len(members[dst]))]
        offset = int(rng.integers(len(tails)))
        width = min(cfg.fanout, len(tails))
        for i, h in enumerate(heads):
            base = i * len(tails) // len(heads) + offset
            for k in range(width):
                pool.append((h, r, tails[(base + k) % len(tails)]))
    pool = sorted(set(pool))
    if cfg.facts > len(pool):
        raise GenerationError(f"requested {cfg.facts} facts but the relational pattern allows {len(pool)}")

    by_entity: dict[int, list[int]] = {}
    for i, (h, _, t) in enumerate(pool):
        by_entity.setdefault(h, []).append(i)
        by_entity.setdefault(t, []).append(i)
    chosen: set[int] = set()
    for e in range(cfg.entities):
        options = by_entity.get(e)
        if not options:
            raise GenerationError(f"entity {e} takes part in no possible fact; raise relations or fanout")
        if not any(i in chosen for i in options):
            chosen.add(int(options[rng.integers(len(options))]))
    if len(chosen) > cfg.facts:
        raise GenerationError(f"covering every entity needs {len(chosen)} facts > facts={cfg.facts}")
    rest = np.array([i for i in range(len(pool)) if i not in chosen])
    extra = rng.choice(rest, size=cfg.facts - len(chosen), replace=False)
    chosen.update(int(i) for i in extra)
    facts = [pool[i] for i in sorted(chosen)]
    return LatentWorld(entity_names, relation_names, cluster_of, facts)


def _surface(text: str, client: str, mode: str) -> str:
    if mode == "shared":
        return text
    return " ".join(f"{tok}_{client}" for tok in text.split())


def _split_facts(facts: list[tuple[int, int, int]], cfg: GenConfig, rng: np.random.Generator, name: str):
    n = len(facts)
    n_valid = int(round(cfg.splits[1] * n))
    n_test = int(round(cfg.splits[2] * n))
    if n - n_valid - n_test < 2 or (cfg.splits[1] > 0 and n_valid < 1) or (cfg.splits[2] > 0 and n_test < 1):
        raise GenerationError(f"client {name!r}: {n} facts cannot cover the requested splits")
    count: dict[tuple[str, int], int] = {}
    for h, r, t in facts:
        for key in (("e", h), ("e", t), ("r", r)):
            count[key] = count.get(key, 0) + 1
    test, valid, train = [], [], []
    for i in rng.permutation(n):
        h, r, t = facts[i]
        keys = (("e", h), ("e", t), ("r", r))
        # held-out facts may only use entities/relations that keep a train occurrence
        movable = all(count[k] >= 2 for k in keys)
        if movable and len(test) < n_test:
            test.append(facts[i])
        elif movable and len(valid) < n_valid:
            valid.append(facts[i])
        else:
            train.append(facts[i])
            continue
        for k in keys:
            count[k] -= 1
    if len(test) < n_test or len(valid) < n_valid:
        raise GenerationError(f"client {name!r}: cannot fill held-out splits while keeping "
                              "every held-out entity in train")
    return {"train": train, "valid": valid, "test": test}


def generate_graphs(cfg: GenConfig) -> tuple[list[KnowledgeGraph], LatentWorld, dict[str, list[int]]]:
    world = build_world(cfg)
    graphs, fact_ids = [], {}
    for c, (name, frac) in enumerate(zip(cfg.names(), cfg.fractions)):
        rng = np.random.default_rng([cfg.seed & (2**64 - 1), 1, c])
        n = int(round(frac * len(world.facts)))
        if n < 4:
            raise GenerationError(f"client {name!r}: fraction {frac} gives only {n} facts")
        ids = sorted(int(i) for i in rng.choice(len(world.facts), size=n, replace=False))
        facts = [world.facts[i] for i in ids]
        splits = _split_facts(facts, cfg, rng, name)
        ents = sorted({e for h, _, t in facts for e in (h, t)})
        rels = sorted({r for _, r, _ in facts})
        e_local = {e: i for i, e in enumerate(ents)}
        r_local = {r: i for i, r in enumerate(rels)}
        local = {split: sorted(Triple(e_local[h], r_local[r], e_local[t]) for h, r, t in triples)
                 for split, triples in splits.items()}
        graphs.append(KnowledgeGraph(
            name,
            [_surface(world.entity_names[e], name, cfg.surface_mode) for e in ents],
            [_surface(world.relation_names[r], name, cfg.surface_mode) for r in rels],
            local))
        fact_ids[name] = ids
    return graphs, world, fact_ids


def generate(cfg: GenConfig, out_dir: str) -> list[str]:
    """Write one kg directory per client plus ``world.json``. Returns the client dirs."""
    graphs, world, fact_ids = generate_graphs(cfg)
    os.makedirs(out_dir, exist_ok=True)
    dirs = []
    for g in graphs:
        path = os.path.join(out_dir, g.client_name)
        save_kg(g, path)
        dirs.append(path)
    manifest = {"config": cfg.to_dict(), "num_facts": len(world.facts),
                "clients": {name: {"fact_ids": ids} for name, ids in fact_ids.items()}}
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    return dirs


def _surface_facts(g: KnowledgeGraph) -> set[tuple[str, str, str]]:
    return {(g.entities[h], g.relations[r], g.entities[t])
            for triples in g.splits.values() for h, r, t in triples}


def overlap_report(dirs: Sequence[str]) -> dict:
    """Pairwise counts of identical surface facts and entity strings."""
    if len(dirs) < 2:
        raise ValueError("overlap_report needs at least two client directories")
    graphs = []
    for d in dirs:
        if not os.path.isdir(d):
            raise FileNotFoundError(f"not a directory: {d}")
        graphs.append(load_kg(d))
    facts = [_surface_facts(g) for g in graphs]
    ents = [set(g.entities) for g in graphs]
    pairs = []
    for i, j in itertools.combinations(range(len(graphs)), 2):
        shared_f = len(facts[i] & facts[j])
        shared_e = len(ents[i] & ents[j])
        pairs.append({
            "a": graphs[i].client_name, "b": graphs[j].client_name,
            "facts_a": len(facts[i]), "facts_b": len(facts[j]),
            "shared_facts": shared_f,
            "fact_overlap_pct": round(100.0 * shared_f / min(len(facts[i]), len(facts[j])), 3),
            "entities_a": len(ents[i]), "entities_b": len(ents[j]),
            "shared_entities": shared_e,
            "entity_overlap_pct": round(100.0 * shared_e / min(len(ents[i]), len(ents[j])), 3),
        })
    return {"clients": [g.client_name for g in graphs], "pairs": pairs}
