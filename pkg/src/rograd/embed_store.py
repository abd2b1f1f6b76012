"""Text encoders, unit-norm embedding memory and exact top-k retrieval."""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Protocol, Sequence

import numpy as np

from .tag_graph import TextAttributedGraph, read_features, write_features

NORM_TOL = 1e-6
_TOKEN = re.compile(r"[a-z0-9]+")


class EmbeddingError(ValueError):
    pass


class Encoder(Protocol):
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashingEncoder:
    """Deterministic signed feature-hashing bag-of-words encoder.

    Each token lands in one bucket with a +/-1 sign derived from a keyed
    BLAKE2 digest, so texts with disjoint vocabularies are (up to hash
    collisions) orthogonal. Intended for offline tests and synthetic graphs.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = int(dim)
        self.seed = int(seed)
        self._cache: dict[str, tuple[int, float]] = {}

    def _slot(self, token: str) -> tuple[int, float]:
        slot = self._cache.get(token)
        if slot is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self.seed.to_bytes(8, "little")).digest()
            value = int.from_bytes(digest, "little")
            slot = (value % self.dim, 1.0 if (value >> 63) & 1 else -1.0)
            self._cache[token] = slot
        return slot

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for tok in tokenize(text):
                col, sign = self._slot(tok)
                out[row, col] += sign
        return out


class SentenceTransformerEncoder:
    """Adapter around a local ``sentence-transformers`` model (imported lazily)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2", device: str = "cpu"):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name, device=device)
        self.dim = int(self.model.get_sentence_embedding_dimension())

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(self.model.encode(list(texts), convert_to_numpy=True), dtype=np.float64)


class HttpEmbeddingEncoder:
    """Client for an OpenAI-style ``/embeddings`` service returning ``{"data": [{"embedding": [...]}]}``."""

    def __init__(self, endpoint: str, model: str, dim: int, api_key: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.dim = int(dim)
        self.api_key = api_key
        self.timeout = timeout

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = httpx.post(
            self.endpoint, json={"model": self.model, "input": list(texts)}, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        rows = [item["embedding"] for item in resp.json()["data"]]
        out = np.asarray(rows, dtype=np.float64).reshape(len(texts), -1)
        if out.shape[1] != self.dim:
            raise EmbeddingError(f"service returned dim {out.shape[1]}, expected {self.dim}")
        return out


def normalize_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        bad = np.flatnonzero((norms[:, 0] == 0) | ~np.isfinite(norms[:, 0]))
        raise EmbeddingError(f"zero-norm or non-finite vectors at rows {bad[:5].tolist()}")
    return mat / norms


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise EmbeddingError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


@dataclass(frozen=True)
class Entry:
    id: Hashable
    label: int
    kind: str
    score: float = 0.0


class EmbeddingStore:
    """Unit-norm vectors keyed by id, with class label and kind (original/generated).

    Reads may run concurrently; ``add``/``replace`` take an internal lock.
    Hand a worker ``snapshot()`` when it needs a frozen view.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self._ids: list[Hashable] = []
        self._pos: dict[Hashable, int] = {}
        self._labels: list[int] = []
        self._kinds: list[str] = []
        self._vectors = np.zeros((0, self.dim), dtype=np.float64)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[Hashable]:
        return list(self._ids)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self._labels, dtype=np.int64)

    @property
    def kinds(self) -> np.ndarray:
        return np.asarray(self._kinds, dtype=object)

    @property
    def vectors(self) -> np.ndarray:
        view = self._vectors.view()
        view.setflags(write=False)
        return view

    def __contains__(self, item_id: Hashable) -> bool:
        return item_id in self._pos

    def vector(self, item_id: Hashable) -> np.ndarray:
        return self._vectors[self._pos[item_id]].copy()

    def label_of(self, item_id: Hashable) -> int:
        return self._labels[self._pos[item_id]]

    def add(self, ids: Sequence[Hashable], labels: Sequence[int], vectors: np.ndarray, kind: str = "original") -> None:
        vectors = np.asarray(vectors, dtype=np.float64).reshape(len(ids), -1) if len(ids) else np.zeros((0, self.dim))
        if vectors.shape[1] != self.dim:
            raise EmbeddingError(f"dimension {vectors.shape[1]} != store dimension {self.dim}")
        unit = normalize_rows(vectors) if len(ids) else vectors
        with self._lock:
            for item_id in ids:
                if item_id in self._pos:
                    raise EmbeddingError(f"duplicate id {item_id!r}")
            if len(set(ids)) != len(ids):
                raise EmbeddingError("duplicate ids in batch")
            start = len(self._ids)
            for k, item_id in enumerate(ids):
                self._pos[item_id] = start + k
            self._ids.extend(ids)
            self._labels.extend(int(x) for x in labels)
            self._kinds.extend([kind] * len(ids))
            self._vectors = np.vstack([self._vectors, unit])

    def replace(self, ids: Sequence[Hashable], vectors: np.ndarray) -> None:
        unit = normalize_rows(np.asarray(vectors, dtype=np.float64).reshape(len(ids), -1))
        with self._lock:
            vecs = self._vectors.copy()
            for k, item_id in enumerate(ids):
                vecs[self._pos[item_id]] = unit[k]
            self._vectors = vecs

    def snapshot(self) -> "EmbeddingStore":
        snap = EmbeddingStore(self.dim)
        with self._lock:
            snap._ids = list(self._ids)
            snap._pos = dict(self._pos)
            snap._labels = list(self._labels)
            snap._kinds = list(self._kinds)
            snap._vectors = self._vectors.copy()
        return snap

    def restrict(self, keep_ids: Iterable[Hashable]) -> "EmbeddingStore":
        keep = [i for i in keep_ids if i in self._pos]
        sub = EmbeddingStore(self.dim)
        if keep:
            rows = [self._pos[i] for i in keep]
            sub._ids = list(keep)
            sub._pos = {i: k for k, i in enumerate(keep)}
            sub._labels = [self._labels[r] for r in rows]
            sub._kinds = [self._kinds[r] for r in rows]
            sub._vectors = self._vectors[rows].copy()
        return sub

    def scores(self, query: np.ndarray) -> np.ndarray:
        """Cosine of ``query`` against every stored vector."""
        q = np.asarray(query, dtype=np.float64)
        nq = np.linalg.norm(q)
        if nq == 0:
            raise EmbeddingError("query vector is zero")
        # row-wise sum keeps identical rows bitwise identical (gemv does not promise that)
        return np.sum(self._vectors * (q / nq), axis=1)

    def _ranked(self, scores: np.ndarray, candidates: np.ndarray, k: int) -> list[Entry]:
        if k < 1:
            raise EmbeddingError("k must be >= 1")
        order = sorted(candidates.tolist(), key=lambda r: (-scores[r], self._ids[r]))
        return [
            Entry(self._ids[r], self._labels[r], self._kinds[r], float(scores[r])) for r in order[:k]
        ]

    def top_k_same_class(self, query: np.ndarray, label: int, k: int) -> list[Entry]:
        """``k`` most similar original entries of class ``label``; ties by ascending id."""
        if k < 1:
            raise EmbeddingError("k must be >= 1")
        if not len(self):
            return []
        scores = self.scores(query)
        cand = np.flatnonzero((self.labels == label) & (self.kinds == "original"))
        return self._ranked(scores, cand, k)

    def top_k_any(self, query: np.ndarray, k: int, exclude_ids: Iterable[Hashable] = ()) -> list[Entry]:
        if k < 1:
            raise EmbeddingError("k must be >= 1")
        if not len(self):
            return []
        scores = self.scores(query)
        excluded = {self._pos[i] for i in exclude_ids if i in self._pos}
        cand = np.array([r for r in range(len(self)) if r not in excluded], dtype=np.int64)
        return self._ranked(scores, cand, k)

    def centroid(self, label: int) -> np.ndarray:
        rows = (self.labels == label) & (self.kinds == "original")
        if not rows.any():
            raise EmbeddingError(f"class {label} absent from store")
        return self._vectors[rows].mean(axis=0)

    # persistence: binary matrix + TSV index (id, class, kind)
    def save(self, matrix_path: str | Path, index_path: str | Path) -> None:
        write_features(matrix_path, self._vectors)
        with open(index_path, "w", encoding="utf-8") as fh:
            fh.write("id\tclass\tkind\n")
            for i, lab, kind in zip(self._ids, self._labels, self._kinds):
                fh.write(f"{i}\t{lab}\t{kind}\n")

    @classmethod
    def load(cls, matrix_path: str | Path, index_path: str | Path) -> "EmbeddingStore":
        mat = read_features(matrix_path).astype(np.float64)
        rows = Path(index_path).read_text(encoding="utf-8").splitlines()[1:]
        store = cls(mat.shape[1])
        parsed = [r.split("\t") for r in rows if r]
        for k, (item_id, lab, kind) in enumerate(parsed):
            store.add([item_id], [int(lab)], mat[k : k + 1], kind=kind)
        return store


def build_store(
    graph: TextAttributedGraph, encoder: Encoder, mask: np.ndarray | None = None
) -> EmbeddingStore:
    """Encode node texts into a store; ``mask`` limits which nodes enter (default: all)."""
    rows = np.arange(graph.num_nodes) if mask is None else np.flatnonzero(mask)
    store = EmbeddingStore(encoder.dim)
    if not len(rows):
        return store
    texts = [graph.texts[r] for r in rows]
    if any(not t.strip() for t in texts):
        raise EmbeddingError("graph contains empty node texts")
    vecs = np.asarray(encoder.encode(texts), dtype=np.float64)
    if not np.all(np.isfinite(vecs)):
        raise EmbeddingError("encoder produced non-finite values")
    ids = [graph.node_ids[r] for r in rows]
    labels = graph.labels[rows]
    gen = graph.generated[rows]
    orig = np.flatnonzero(~gen)
    if len(orig):
        store.add([ids[k] for k in orig], labels[orig], vecs[orig], kind="original")
    if gen.any():
        g = np.flatnonzero(gen)
        store.add([ids[k] for k in g], labels[g], vecs[g], kind="generated")
    return store
