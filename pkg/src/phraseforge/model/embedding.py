"""Word-embedding lookup with mean pooling per phrase slot."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..builder import PhraseStructure
from ..seeding import stage_rng

UNK = "<unk>"


@dataclass(frozen=True)
class PhraseEmbedding:
    e_cat: np.ndarray
    e_att: np.ndarray
    e_rel: np.ndarray
    # supporting-object category, drives the category module inside the relation branch
    e_sup: np.ndarray
    has_att: bool
    has_rel: bool

    @property
    def joint(self) -> np.ndarray:
        return np.concatenate([self.e_cat, self.e_att, self.e_rel])


class EmbeddingTable:
    def __init__(self, vectors: dict[str, np.ndarray], unk: np.ndarray):
        dims = {v.shape for v in vectors.values()} | {unk.shape}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self.vectors = vectors
        self.unk = unk
        self.dim = unk.shape[0]

    def __getitem__(self, word: str) -> np.ndarray:
        return self.vectors.get(word, self.unk)

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "EmbeddingTable":
        """Text format: one ``word v1 ... vD`` per line.  A ``<unk>`` row is used if present."""
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) < 2:
                    raise ValueError(f"line {lineno}: embedding row has no values")
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        if not vectors:
            raise ValueError(f"{path}: empty embedding table")
        dim = len(next(iter(vectors.values())))
        unk = vectors.pop(UNK, None)
        if unk is None:
            unk = stage_rng(seed, "embedding", UNK).normal(0.0, 1.0 / np.sqrt(dim), dim)
        return cls(vectors, unk)

    @classmethod
    def random(cls, words: Iterable[str], dim: int, seed: int = 0) -> "EmbeddingTable":
        vocab = sorted(set(words))
        vectors = {w: stage_rng(seed, "embedding", w).normal(0.0, 1.0 / np.sqrt(dim), dim) for w in vocab}
        unk = stage_rng(seed, "embedding", UNK).normal(0.0, 1.0 / np.sqrt(dim), dim)
        return cls(vectors, unk)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for w in sorted(self.vectors):
                fh.write(w + " " + " ".join(repr(float(v)) for v in self.vectors[w]) + "\n")
            fh.write(UNK + " " + " ".join(repr(float(v)) for v in self.unk) + "\n")

    def mean(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            return np.zeros(self.dim)
        return np.mean([self[w] for w in words], axis=0)


def structure_words(structure: PhraseStructure) -> list[str]:
    words = structure.category.split()
    for a in structure.attributes:
        words += a.split()
    for p, s in structure.relationships:
        words += p.split() + s.split()
    return words


def embed_phrase(structure: PhraseStructure, table: EmbeddingTable) -> PhraseEmbedding:
    zero = np.zeros(table.dim)
    att_words = " ".join(structure.attributes)
    rel = structure.relationship
    return PhraseEmbedding(
        e_cat=table.mean(structure.category),
        e_att=table.mean(att_words) if att_words else zero,
        e_rel=table.mean(rel[0]) if rel else zero,
        e_sup=table.mean(rel[1]) if rel else zero,
        has_att=bool(att_words),
        has_rel=rel is not None,
    )
