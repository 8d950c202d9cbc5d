"""Knowledge-graph storage, TSV ingestion, k-hop neighborhoods and filter indexes."""

from __future__ import annotations

import os
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

SPLITS = ("train", "valid", "test")


class KGFormatError(ValueError):
    """Base class for ingestion errors. Carries the offending file and line."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class MissingFileError(KGFormatError):
    pass


class MalformedLineError(KGFormatError):
    pass


class IdOutOfRangeError(KGFormatError):
    pass


class DuplicateTripleError(KGFormatError):
    pass


class EmptySplitError(KGFormatError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    client_name: str
    entities: list[str]
    relations: list[str]
    splits: dict[str, list[Triple]] = field(default_factory=dict)

    def __post_init__(self):
        for name in SPLITS:
            self.splits.setdefault(name, [])
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split(s): {sorted(unknown)}")
        self.splits = {name: [Triple(*t) for t in self.splits[name]] for name in SPLITS}
        self._check()
        self.adjacency = _build_adjacency(len(self.entities), self.splits["train"])

    def _check(self):
        n_ent, n_rel = len(self.entities), len(self.relations)
        seen: dict[Triple, str] = {}
        for name in SPLITS:
            for t in self.splits[name]:
                if not (0 <= t.head < n_ent and 0 <= t.tail < n_ent and 0 <= t.relation < n_rel):
                    raise IdOutOfRangeError(f"triple {tuple(t)} in split {name!r} out of range")
                if t in seen:
                    raise DuplicateTripleError(
                        f"triple {tuple(t)} appears in {seen[t]!r} and {name!r}")
                seen[t] = name

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def train(self) -> list[Triple]:
        return self.splits["train"]

    @property
    def valid(self) -> list[Triple]:
        return self.splits["valid"]

    @property
    def test(self) -> list[Triple]:
        return self.splits["test"]

    def num_triples(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def stats(self) -> dict:
        out = {"entities": self.num_entities, "relations": self.num_relations,
               "triples": self.num_triples()}
        out.update({name: len(self.splits[name]) for name in SPLITS})
        return out


def _build_adjacency(n: int, triples: Iterable[Triple]) -> list[frozenset[int]]:
    adj: list[set[int]] = [set() for _ in range(n)]
    for h, _, t in triples:
        if h != t:
            adj[h].add(t)
            adj[t].add(h)
    return [frozenset(a) for a in adj]


def _read_lines(path: str) -> list[str]:
    if not os.path.isfile(path):
        raise MissingFileError("file not found", path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        data = fh.read()
    if not data:
        return []
    if "\r" in data:
        raise MalformedLineError("CR line endings are not allowed", path)
    lines = data.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def _read_names(path: str) -> list[str]:
    names = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLineError(f"expected 2 columns, got {len(parts)}", path, lineno)
        try:
            idx = int(parts[0])
        except ValueError:
            raise MalformedLineError(f"non-integer id {parts[0]!r}", path, lineno) from None
        if idx != lineno - 1:
            raise MalformedLineError(f"id {idx} out of order, expected {lineno - 1}", path, lineno)
        names.append(parts[1])
    return names


def _read_triples(path: str, n_ent: int, n_rel: int) -> list[Triple]:
    triples = []
    seen = set()
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedLineError(f"expected 3 columns, got {len(parts)}", path, lineno)
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError:
            raise MalformedLineError(f"non-integer field in {line!r}", path, lineno) from None
        if not 0 <= h < n_ent:
            raise IdOutOfRangeError(f"head id {h} not in [0, {n_ent})", path, lineno)
        if not 0 <= t < n_ent:
            raise IdOutOfRangeError(f"tail id {t} not in [0, {n_ent})", path, lineno)
        if not 0 <= r < n_rel:
            raise IdOutOfRangeError(f"relation id {r} not in [0, {n_rel})", path, lineno)
        triple = Triple(h, r, t)
        if triple in seen:
            raise DuplicateTripleError(f"duplicate triple {(h, r, t)}", path, lineno)
        seen.add(triple)
        triples.append(triple)
    return triples


def load_kg(dir_path: str, client_name: str | None = None) -> KnowledgeGraph:
    """Read one client directory (entities/relations/train/valid/test TSVs)."""
    if client_name is None:
        client_name = os.path.basename(os.path.normpath(dir_path))
    entities = _read_names(os.path.join(dir_path, "entities.tsv"))
    relations = _read_names(os.path.join(dir_path, "relations.tsv"))
    splits = {}
    for name in SPLITS:
        path = os.path.join(dir_path, f"{name}.tsv")
        splits[name] = _read_triples(path, len(entities), len(relations))
    if not splits["train"]:
        raise EmptySplitError("empty split 'train'", os.path.join(dir_path, "train.tsv"))
    seen: dict[Triple, str] = {}
    for name in SPLITS:
        for lineno, t in enumerate(splits[name], start=1):
            if t in seen:
                raise DuplicateTripleError(
                    f"triple {tuple(t)} already present in split {seen[t]!r}",
                    os.path.join(dir_path, f"{name}.tsv"), lineno)
            seen[t] = name
    return KnowledgeGraph(client_name, entities, relations, splits)


def save_kg(g: KnowledgeGraph, dir_path: str) -> None:
    os.makedirs(dir_path, exist_ok=True)

    def write(name, rows):
        with open(os.path.join(dir_path, name), "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write("\t".join(str(x) for x in row) + "\n")

    write("entities.tsv", enumerate(g.entities))
    write("relations.tsv", enumerate(g.relations))
    for name in SPLITS:
        write(f"{name}.tsv", g.splits[name])


def k_hop_neighbors(g: KnowledgeGraph, start: int, k: int) -> set[int]:
    """Entities within ``k`` undirected train-graph steps of ``start``, excluding it."""
    if not 0 <= start < g.num_entities:
        raise IndexError(f"entity {start} not in graph {g.client_name!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = {start: 0}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if dist[node] == k:
            continue
        for nb in g.adjacency[node]:
            if nb not in dist:
                dist[nb] = dist[node] + 1
                queue.append(nb)
    del dist[start]
    return set(dist)


class KnownTripleIndex:
    """(head, relation) -> tails and (tail, relation) -> heads over a set of splits."""

    def __init__(self, triples: Iterable[Triple]):
        self.tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.heads: dict[tuple[int, int], set[int]] = defaultdict(set)
        for h, r, t in triples:
            self.tails[(h, r)].add(t)
            self.heads[(t, r)].add(h)
        self.tails = dict(self.tails)
        self.heads = dict(self.heads)

    def lookup_tails(self, head: int, relation: int) -> set[int]:
        return self.tails.get((head, relation), set())

    def lookup_heads(self, tail: int, relation: int) -> set[int]:
        return self.heads.get((tail, relation), set())

    # the (h, r) form is the common case
    lookup = lookup_tails


def build_filter_index(g: KnowledgeGraph, splits: Iterable[str] = SPLITS) -> KnownTripleIndex:
    splits = list(splits)
    if not splits:
        raise ValueError("at least one split must be selected")
    for name in splits:
        if name not in SPLITS:
            raise ValueError(f"invalid split name {name!r}")
    return KnownTripleIndex(t for name in splits for t in g.splits[name])
