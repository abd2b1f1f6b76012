"""Graph enrichment with generated samples.

Every sample becomes a train-labelled node carrying its generation class as
a hard pseudo-label. It is linked to each original node whose feature
cosine exceeds ``tau``; generated nodes are never linked to each other.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embed_store import EmbeddingError, Encoder
from .sggm import GeneratedSample
from .tag_graph import GraphError, TextAttributedGraph

logger = logging.getLogger(__name__)


class EnrichmentError(GraphError):
    pass


@dataclass(frozen=True)
class EnrichmentConfig:
    tau: float = 0.7
    # used only when node features live in a different space than sample embeddings
    encoder: Encoder | None = None

    def __post_init__(self) -> None:
        if not -1.0 < self.tau <= 1.0:
            raise ValueError(f"tau={self.tau} outside (-1, 1]")


@dataclass(frozen=True)
class EnrichmentStats:
    nodes_added: int = 0
    edges_added: int = 0
    neighbor_counts: tuple[int, ...] = ()


@dataclass(frozen=True)
class EnrichedGraph:
    graph: TextAttributedGraph
    stats: EnrichmentStats = field(default_factory=EnrichmentStats)
    base_nodes: int = 0
    base_edges: int = 0
    tau: float = 0.7


def unify_features(graph: TextAttributedGraph, encoder: Encoder) -> TextAttributedGraph:
    """Replace node features with unit-norm text embeddings; rows flagged missing stay zero."""
    vecs = np.asarray(encoder.encode(list(graph.texts)), dtype=np.float64).reshape(graph.num_nodes, -1)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = np.divide(vecs, norms, out=np.zeros_like(vecs), where=norms > 0)
    vecs[graph.feature_missing] = 0.0
    return graph.replace(features=vecs.astype(np.float32))


def _unit_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    valid = norms[:, 0] > 0
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0), valid


def neighborhoods(
    sample_vectors: np.ndarray, node_features: np.ndarray, candidates: np.ndarray, tau: float
) -> list[np.ndarray]:
    """Per sample, the candidate node indices with cosine strictly above ``tau`` (ascending).

    Zero feature rows have no direction and are never neighbours.
    """
    feats, valid = _unit_rows(node_features)
    usable = np.asarray(candidates, dtype=bool) & valid
    cols = np.flatnonzero(usable)
    samples, ok = _unit_rows(np.atleast_2d(sample_vectors))
    if not ok.all():
        raise EmbeddingError("sample embedding is zero")
    sims = samples @ feats[cols].T if len(cols) else np.zeros((len(samples), 0))
    return [cols[row > tau] for row in sims]


def enrich(
    graph: TextAttributedGraph,
    samples: Sequence[GeneratedSample],
    config: EnrichmentConfig = EnrichmentConfig(),
) -> EnrichedGraph:
    """Append ``samples`` as pseudo-labelled train nodes with threshold edges to original nodes."""
    if not samples:
        return EnrichedGraph(graph, EnrichmentStats(), graph.num_nodes, graph.num_edges, config.tau)
    ids = [s.sample_id for s in samples]
    if any(not i for i in ids):
        raise EnrichmentError("every sample needs a non-empty sample_id")
    if len(set(ids)) != len(ids):
        raise EnrichmentError("duplicate sample ids")
    clash = set(ids) & set(graph.node_ids)
    if clash:
        raise EnrichmentError(f"sample ids collide with node ids: {sorted(clash)[:5]}")
    # scan in the stored float32 precision so recounts agree bit for bit
    emb = np.stack([np.asarray(s.embedding, dtype=np.float32) for s in samples]).astype(np.float64)
    if graph.num_nodes and graph.feature_dim != emb.shape[1]:
        if config.encoder is None or config.encoder.dim != emb.shape[1]:
            raise EnrichmentError(
                f"sample dimension {emb.shape[1]} differs from feature dimension {graph.feature_dim} "
                "and no matching encoder was given"
            )
        logger.info("unified embedding mode: re-encoding %d node texts", graph.num_nodes)
        graph = unify_features(graph, config.encoder)
    for s in samples:
        if not 0 <= s.label < graph.num_classes:
            raise EnrichmentError(f"sample {s.sample_id} has label {s.label} outside the graph's classes")

    n, m = graph.num_nodes, len(samples)
    hoods = neighborhoods(emb, graph.features, ~graph.generated, config.tau)
    new_edges = [np.stack([nb, np.full(len(nb), n + i)], axis=1) for i, nb in enumerate(hoods)]
    added = np.concatenate(new_edges).astype(np.int64) if new_edges else np.zeros((0, 2), np.int64)

    ones, zeros = np.ones(m, dtype=bool), np.zeros(m, dtype=bool)
    enriched = graph.replace(
        node_ids=graph.node_ids + tuple(ids),
        texts=graph.texts + tuple(s.sample.main_text for s in samples),
        features=np.vstack([graph.features, emb.astype(np.float32)]) if n else emb.astype(np.float32),
        labels=np.concatenate([graph.labels, [s.label for s in samples]]).astype(np.int64),
        edges=np.vstack([graph.edges, added]),
        train_mask=np.concatenate([graph.train_mask, ones]),
        val_mask=np.concatenate([graph.val_mask, zeros]),
        test_mask=np.concatenate([graph.test_mask, zeros]),
        feature_missing=np.concatenate([graph.feature_missing, zeros]),
        generated=np.concatenate([graph.generated, ones]),
    )
    stats = EnrichmentStats(m, len(added), tuple(len(nb) for nb in hoods))
    return EnrichedGraph(enriched, stats, n, graph.num_edges, config.tau)


def enrichment_stats(enriched: EnrichedGraph) -> EnrichmentStats:
    """Recount additions from the graph itself and check them against the stored stats."""
    g, n = enriched.graph, enriched.base_nodes
    m = g.num_nodes - n
    if m < 0 or not g.generated[n:].all():
        raise EnrichmentError("appended nodes are not all marked generated")
    if m and (not g.train_mask[n:].all() or g.val_mask[n:].any() or g.test_mask[n:].any()):
        raise EnrichmentError("generated nodes must be train-only")
    new_edges = g.edges[enriched.base_edges:]
    if (g.edges[: enriched.base_edges] >= n).any():
        raise EnrichmentError("base edge block was modified")
    if len(new_edges) and ((new_edges[:, 1] < n) | (new_edges[:, 0] >= n)).any():
        raise EnrichmentError("added edges must join an original node to a generated node")
    counts = tuple(int(c) for c in np.bincount(new_edges[:, 1] - n, minlength=m)) if m else ()
    hoods = neighborhoods(g.features[n:], g.features[:n], ~g.generated[:n], enriched.tau) if m else []
    expected = tuple(len(h) for h in hoods)
    recount = EnrichmentStats(m, len(new_edges), counts)
    if recount != enriched.stats or counts != expected:
        raise EnrichmentError(f"stats mismatch: stored {enriched.stats}, recount {recount}, threshold scan {expected}")
    return recount
