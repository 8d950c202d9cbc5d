"""Hashed tokenizer and the token-embedding bi-encoder.

An input sequence is a list of embedding rows (``tok_emb`` rows for tokens,
``rel_prefix/<key>`` rows for relation prefixes). Its embedding is the mean of
those rows followed by L2 normalization. :func:`encode_sequences` runs the
forward pass for a batch and returns a cache that :func:`backprop_sequences`
turns into sparse gradients.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

TOK_EMB = "tok_emb"
PREFIX = "rel_prefix/"
INVERSE_WORD = "inverse"


class EncodingError(ValueError):
    pass


class EmptyTextError(EncodingError):
    pass


class ZeroNormError(EncodingError):
    pass


class UnknownRelationError(EncodingError, KeyError):
    def __str__(self):
        return ValueError.__str__(self)


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


@lru_cache(maxsize=1 << 16)
def _hash_token(token: str) -> int:
    return fnv1a64(token.encode("utf-8"))


@dataclass(frozen=True)
class Tokenizer:
    mode: str = "hashed"
    num_buckets: int = 4096
    lowercase: bool = True
    max_tokens: int = 12
    vocab: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("hashed", "vocab"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "hashed" and (self.num_buckets < 1 or self.num_buckets & (self.num_buckets - 1)):
            raise ValueError("num_buckets must be a power of two")
        if self.mode == "vocab":
            if not self.vocab:
                raise ValueError("vocab mode needs a vocabulary")
            # id 0 is reserved for unknown tokens
            object.__setattr__(self, "num_buckets", len(self.vocab) + 1)
            object.__setattr__(self, "_index", {tok: i + 1 for i, tok in enumerate(self.vocab)})
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def tokenize(self, text: str) -> list[int]:
        return list(_tokenize_cached(self, text))


@lru_cache(maxsize=1 << 16)
def _tokenize_cached(tk: Tokenizer, text: str) -> tuple[int, ...]:
    if tk.lowercase:
        text = text.lower()
    words = text.split()[: tk.max_tokens]
    if tk.mode == "hashed":
        mask = tk.num_buckets - 1
        return tuple(_hash_token(w) & mask for w in words)
    return tuple(tk._index.get(w, 0) for w in words)


def tokenize(tk: Tokenizer, text: str) -> list[int]:
    return tk.tokenize(text)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    prefix_len: int = 12
    relation_mode: str = "parameterized"
    vocab_size: int = 4096
    max_tokens: int = 12
    lowercase: bool = True

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be >= 1")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.relation_mode not in ("parameterized", "textual"):
            raise ValueError(f"unknown relation_mode {self.relation_mode!r}")

    def tokenizer(self) -> Tokenizer:
        return Tokenizer("hashed", self.vocab_size, self.lowercase, self.max_tokens)

    def to_dict(self) -> dict:
        return asdict(self)


def relation_key(text: str, inverse: bool) -> str:
    return text + ("#inv" if inverse else "#fwd")


def prefix_name(key: str) -> str:
    return PREFIX + key


class ModelWeights(Mapping[str, np.ndarray]):
    """Named float64 tensors, iterated in lexicographic name order."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._t: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._t[name]

    def __setitem__(self, name: str, arr) -> None:
        self._t[name] = np.asarray(arr, dtype=np.float64)

    def __delitem__(self, name: str) -> None:
        del self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def __repr__(self):
        shapes = ", ".join(f"{k}: {self._t[k].shape}" for k in self)
        return f"ModelWeights({shapes})"

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self._t.items()})

    def subset(self, names: Iterable[str]) -> "ModelWeights":
        return ModelWeights({k: self._t[k].copy() for k in names})

    def relation_keys(self) -> list[str]:
        return [k[len(PREFIX):] for k in self if k.startswith(PREFIX)]

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._t.values())

    def equal(self, other: "ModelWeights") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self)

    def checksum(self) -> str:
        """64-bit content digest as 16 hex digits."""
        h = hashlib.blake2b(digest_size=8)
        for name in self:
            arr = np.ascontiguousarray(self[name], dtype="<f8")
            h.update(name.encode("utf-8"))
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def _philox(seed: int, name: str) -> np.random.Generator:
    key = ((seed & MASK64) << 64) | fnv1a64(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(key=key))


def init_weights(cfg: EncoderConfig, relations: Sequence[str], seed: int) -> ModelWeights:
    """Uniform(-0.5/sqrt(d), 0.5/sqrt(d)) init, one counter-based stream per tensor name.

    ``relations`` are relation surface texts; each gets a forward and an inverse
    prefix tensor in parameterized mode.
    """
    if len(set(relations)) != len(relations):
        dupes = sorted({r for r in relations if list(relations).count(r) > 1})
        raise ValueError(f"duplicate relation keys: {dupes}")
    bound = 0.5 / math.sqrt(cfg.dim)
    shapes = {TOK_EMB: (cfg.vocab_size, cfg.dim)}
    if cfg.relation_mode == "parameterized":
        if not relations:
            raise ValueError("relation list must be nonempty")
        for text in relations:
            for inv in (False, True):
                shapes[prefix_name(relation_key(text, inv))] = (cfg.prefix_len, cfg.dim)
    return ModelWeights({name: _philox(seed, name).uniform(-bound, bound, size=shape)
                         for name, shape in shapes.items()})


# -- sequence construction ---------------------------------------------------

Row = tuple[str, int]


def entity_rows(tk: Tokenizer, text: str) -> list[Row]:
    ids = tk.tokenize(text)
    if not ids:
        raise EmptyTextError(f"entity text {text!r} has no tokens")
    return [(TOK_EMB, i) for i in ids]


def relation_rows(w: Mapping[str, np.ndarray], tk: Tokenizer, cfg: EncoderConfig,
                  relation_text: str, inverse: bool) -> list[Row]:
    if cfg.relation_mode == "parameterized":
        name = prefix_name(relation_key(relation_text, inverse))
        if name not in w:
            raise UnknownRelationError(f"no prefix tensor for relation {relation_key(relation_text, inverse)!r}")
        return [(name, i) for i in range(w[name].shape[0])]
    words = relation_text.split()
    if inverse:
        words = [INVERSE_WORD] + words
    ids = tk.tokenize(" ".join(words))
    if not ids:
        raise UnknownRelationError(f"relation text {relation_text!r} has no tokens")
    return [(TOK_EMB, i) for i in ids]


def query_rows(w, tk, cfg, entity_text: str, relation_text: str, inverse: bool) -> list[Row]:
    return relation_rows(w, tk, cfg, relation_text, inverse) + entity_rows(tk, entity_text)


# -- batched forward / backward ------------------------------------------------

@dataclass
class SeqCache:
    names: list[str]
    name_rows: dict[str, np.ndarray]
    name_slices: dict[str, slice]
    index: np.ndarray
    coef: np.ndarray
    norms: np.ndarray
    emb: np.ndarray


def encode_sequences(w: Mapping[str, np.ndarray], seqs: Sequence[Sequence[Row]]) -> tuple[np.ndarray, SeqCache]:
    """Mean-pool and normalize each row sequence. Returns (S, d) embeddings and a cache."""
    if not seqs:
        raise EncodingError("no sequences to encode")
    local: dict[Row, int] = {}
    per_name: dict[str, list[int]] = {}
    lmax = max(len(s) for s in seqs)
    index = np.zeros((len(seqs), lmax), dtype=np.int64)
    coef = np.zeros((len(seqs), lmax))
    for i, seq in enumerate(seqs):
        if not seq:
            raise EmptyTextError(f"sequence {i} is empty")
        for j, row in enumerate(seq):
            slot = local.get(row)
            if slot is None:
                slot = local[row] = len(local)
                per_name.setdefault(row[0], []).append(row[1])
            index[i, j] = slot
        coef[i, : len(seq)] = 1.0 / len(seq)

    # local slots were assigned in first-seen order; regroup by name
    names = sorted(per_name)
    remap = np.empty(len(local), dtype=np.int64)
    name_rows, name_slices, blocks = {}, {}, []
    offset = 0
    for name in names:
        rows = np.asarray(per_name[name], dtype=np.int64)
        name_rows[name] = rows
        name_slices[name] = slice(offset, offset + len(rows))
        for k, r in enumerate(per_name[name]):
            remap[local[(name, r)]] = offset + k
        blocks.append(w[name][rows])
        offset += len(rows)
    index = remap[index]
    table = np.concatenate(blocks, axis=0)

    pooled = np.einsum("sl,sld->sd", coef, table[index])
    norms = np.sqrt(np.einsum("sd,sd->s", pooled, pooled))
    bad = np.flatnonzero(~(norms > 0.0))
    if bad.size:
        raise ZeroNormError(f"pooled vector of sequence {int(bad[0])} has zero norm")
    emb = pooled / norms[:, None]
    return emb, SeqCache(names, name_rows, name_slices, index, coef, norms, emb)


def backprop_sequences(cache: SeqCache, grad_emb: np.ndarray, shapes: Mapping[str, tuple]) -> "GradientSet":
    """Gradients of a scalar w.r.t. every touched row, given dL/d(embedding)."""
    e = cache.emb
    g_pooled = (grad_emb - e * np.einsum("sd,sd->s", e, grad_emb)[:, None]) / cache.norms[:, None]
    contrib = cache.coef[:, :, None] * g_pooled[:, None, :]
    d = e.shape[1]
    g_table = np.zeros((sum(len(r) for r in cache.name_rows.values()), d))
    np.add.at(g_table, cache.index.ravel(), contrib.reshape(-1, d))
    gs = GradientSet()
    for name in cache.names:
        g = np.zeros(shapes[name])
        rows = cache.name_rows[name]
        g[rows] = g_table[cache.name_slices[name]]
        gs.add(name, g, rows)
    return gs


class GradientSet:
    """Dense per-tensor gradients plus the set of rows each one touches."""

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}
        self.rows: dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray, rows: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] += grad
            self.rows[name] = np.union1d(self.rows[name], rows)
        else:
            self.grads[name] = grad
            self.rows[name] = np.unique(rows)

    def merge(self, other: "GradientSet") -> "GradientSet":
        for name in other.grads:
            self.add(name, other.grads[name], other.rows[name])
        return self

    def scale(self, c: float) -> "GradientSet":
        for g in self.grads.values():
            g *= c
        return self

    def __contains__(self, name):
        return name in self.grads

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(sorted(self.grads))

    def __len__(self):
        return len(self.grads)


# -- single-embedding convenience API -------------------------------------------

def encode_entity(w: Mapping[str, np.ndarray], tk: Tokenizer, text: str) -> np.ndarray:
    emb, _ = encode_sequences(w, [entity_rows(tk, text)])
    return emb[0]


def encode_relation_aware(w: Mapping[str, np.ndarray], tk: Tokenizer, cfg: EncoderConfig,
                          entity_text: str, relation: str) -> np.ndarray:
    """Encode (relation, entity). ``relation`` is a key ending in ``#fwd``/``#inv``."""
    if relation.endswith("#fwd"):
        text, inverse = relation[:-4], False
    elif relation.endswith("#inv"):
        text, inverse = relation[:-4], True
    else:
        raise UnknownRelationError(f"relation key {relation!r} lacks a #fwd/#inv suffix")
    emb, _ = encode_sequences(w, [query_rows(w, tk, cfg, entity_text, text, inverse)])
    return emb[0]


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"FKGCKPT1"


def save_weights(w: ModelWeights, path: str) -> None:
    """Write ``MAGIC | u64 manifest length | JSON manifest | raw little-endian float64``."""
    manifest, offset, blobs = [], 0, []
    for name in w:
        arr = np.ascontiguousarray(w[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float64", "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path: str, cfg: EncoderConfig | None = None) -> ModelWeights:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a weights checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    data = raw[16 + hlen:]
    w = ModelWeights()
    for entry in manifest:
        if entry.get("dtype") != "float64":
            raise CheckpointError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        start = entry["offset"]
        if start + n > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} truncated")
        w[entry["name"]] = np.frombuffer(data[start:start + n], dtype="<f8").reshape(shape).copy()
    if cfg is not None:
        _validate_shapes(w, cfg, path)
    return w


def _validate_shapes(w: ModelWeights, cfg: EncoderConfig, path: str) -> None:
    if TOK_EMB not in w:
        raise CheckpointError(f"{path}: missing {TOK_EMB}")
    if w[TOK_EMB].shape != (cfg.vocab_size, cfg.dim):
        raise CheckpointError(f"{path}: {TOK_EMB} has shape {w[TOK_EMB].shape}, "
                              f"expected {(cfg.vocab_size, cfg.dim)}")
    for name in w:
        if name.startswith(PREFIX) and w[name].shape != (cfg.prefix_len, cfg.dim):
            raise CheckpointError(f"{path}: {name} has shape {w[name].shape}, "
                                  f"expected {(cfg.prefix_len, cfg.dim)}")
