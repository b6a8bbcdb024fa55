"""Exact cosine top-k retrieval over caption embeddings.

Vectors are kept as a contiguous float32 matrix; similarities are
computed in float64.  Ranking is by similarity, descending, with ties
going to the lower insertion index.  Stores never change in place:
:meth:`VectorStore.append` returns a new store.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .embedio import read_emb, write_emb
from .errors import DegenerateVectorError, DimensionError, FormatError

ORIGINAL = "original"
SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class StoreEntry:
    text_emb: np.ndarray
    caption: str
    provenance: str = ORIGINAL
    iteration: int | None = None
    image_id: str | None = None

    def __post_init__(self):
        if self.provenance not in (ORIGINAL, SYNTHETIC):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == SYNTHETIC and self.iteration is None:
            raise ValueError("synthetic entries need an iteration")


@dataclass(frozen=True)
class Hit:
    similarity: float
    index: int
    entry: StoreEntry

    @property
    def caption(self) -> str:
        return self.entry.caption


def _query_norms(q: np.ndarray) -> np.ndarray:
    # one formula for single and batched queries so both paths agree exactly
    return np.sqrt(np.einsum("ij,ij->i", q, q))


class VectorStore:
    def __init__(self, matrix: np.ndarray, entries: Sequence[StoreEntry], dim: int):
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self._norms = kernels.row_norms(matrix) if matrix.shape[0] else np.zeros(0)
        self._norms.setflags(write=False)
        self._entries = tuple(entries)
        self.dim = dim

    @classmethod
    def build(cls, entries: Iterable[StoreEntry], dim: int | None = None) -> "VectorStore":
        entries = list(entries)
        if dim is None:
            if not entries:
                raise DimensionError("an empty store needs an explicit dim")
            dim = int(entries[0].text_emb.shape[0])
        return cls(_stack(entries, dim), entries, dim)

    def append(self, entries: Iterable[StoreEntry]) -> "VectorStore":
        entries = list(entries)
        if not entries:
            return self
        matrix = np.concatenate([self._matrix, _stack(entries, self.dim)])
        return VectorStore(matrix, self._entries + tuple(entries), self.dim)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[StoreEntry, ...]:
        return self._entries

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def _check_query(self, q) -> tuple[np.ndarray, float]:
        q = np.ascontiguousarray(getattr(q, "values", q), dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionError(f"query shape {q.shape} != ({self.dim},)")
        qn = float(_query_norms(q[None, :])[0])
        if qn == 0.0:
            raise DegenerateVectorError("zero-norm query")
        return q, qn

    def top_k(self, query, k: int) -> list[Hit]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q, qn = self._check_query(query)
        if not self._entries:
            return []
        idx, sims = kernels.cosine_topk(self._matrix, self._norms, q, qn, k)
        return [Hit(float(s), int(i), self._entries[i]) for i, s in zip(idx, sims)]

    def top_k_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and similarities, each (n_queries, min(k, len(store)))."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise DimensionError(f"queries shape {q.shape} != (*, {self.dim})")
        qn = _query_norms(q)
        if np.any(qn == 0.0):
            raise DegenerateVectorError("zero-norm query")
        return kernels.cosine_topk_batch(self._matrix, self._norms, q, qn, k)

    def hits(self, idx_row, sim_row) -> list[Hit]:
        return [Hit(float(s), int(i), self._entries[i]) for i, s in zip(idx_row, sim_row)]

    # -- snapshots -----------------------------------------------------------

    def save(self, prefix) -> None:
        """Write ``<prefix>.emb`` and a ``<prefix>.jsonl`` payload sidecar."""
        prefix = Path(prefix)
        write_emb(prefix.with_suffix(".emb"), self._matrix.reshape(len(self), self.dim))
        with prefix.with_suffix(".jsonl").open("w", encoding="utf-8") as fh:
            for e in self._entries:
                fh.write(json.dumps({"caption": e.caption, "provenance": e.provenance,
                                     "iteration": e.iteration, "image_id": e.image_id},
                                    ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, prefix) -> "VectorStore":
        prefix = Path(prefix)
        matrix = read_emb(prefix.with_suffix(".emb"))
        with prefix.with_suffix(".jsonl").open("r", encoding="utf-8") as fh:
            meta = [json.loads(line) for line in fh if line.strip()]
        if len(meta) != matrix.shape[0]:
            raise FormatError(f"{prefix}: {len(meta)} payload lines for {matrix.shape[0]} vectors")
        entries = [StoreEntry(matrix[i], m["caption"], m["provenance"], m.get("iteration"),
                              m.get("image_id")) for i, m in enumerate(meta)]
        return cls(np.ascontiguousarray(matrix), entries, matrix.shape[1])


def _stack(entries: Sequence[StoreEntry], dim: int) -> np.ndarray:
    for t, e in enumerate(entries):
        if e.text_emb.shape != (dim,):
            raise DimensionError(f"entry {t} has shape {e.text_emb.shape}, store dim is {dim}")
    if not entries:
        return np.zeros((0, dim), dtype=np.float32)
    return np.ascontiguousarray(np.stack([e.text_emb for e in entries]), dtype=np.float32)


build = VectorStore.build


def top_k(store: VectorStore, query, k: int) -> list[Hit]:
    return store.top_k(query, k)


def append(store: VectorStore, entries) -> VectorStore:
    return store.append(entries)
