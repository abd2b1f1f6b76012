import numpy as np
import pytest

from conftest import make_graph
from rograd.embed_store import HashingEncoder
from rograd.enrichment import (
    EnrichedGraph,
    EnrichmentConfig,
    EnrichmentError,
    enrich,
    enrichment_stats,
    neighborhoods,
)
from rograd.llm_gateway import ParsedSample
from rograd.sggm import GeneratedSample


def sample(vec, label=0, sid="g0"):
    return GeneratedSample(label, ParsedSample("t", "body", ("k",)), np.asarray(vec, float), 1, [], True, sid)


def axis_graph(rows):
    g = make_graph(n=len(rows), num_classes=2, dim=len(rows[0]))
    return g.replace(features=np.asarray(rows, dtype=np.float32))


def test_threshold_is_strict():
    # cosines 0.9 and 0.6 against tau 0.7 give exactly one edge
    g = axis_graph([[0.9, np.sqrt(1 - 0.81)], [0.6, 0.8]])
    out = enrich(g, [sample([1.0, 0.0])], EnrichmentConfig(tau=0.7))
    assert out.stats.edges_added == 1
    assert out.graph.edges[-1].tolist() == [0, 2]


def test_tau_one_adds_no_edges(small_graph):
    s = sample(small_graph.features[0])
    out = enrich(small_graph, [s], EnrichmentConfig(tau=1.0))
    assert out.stats.edges_added == 0 and out.graph.num_nodes == small_graph.num_nodes + 1


def test_empty_samples_is_identity(small_graph):
    out = enrich(small_graph, [])
    assert out.graph is small_graph and out.stats.nodes_added == 0


def test_counts_and_invariants():
    g = axis_graph([[1, 0, 0], [1, 0.1, 0], [0, 1, 0], [0, 1, 0.1], [0, 0, 1], [0.1, 0, 1]])
    samples = [sample(np.eye(3)[c], label=c % 2, sid=f"g{c}") for c in range(3)]
    out = enrich(g, samples)
    assert out.stats.edges_added == 6 and out.stats.neighbor_counts == (2, 2, 2)
    new = out.graph
    n = g.num_nodes
    np.testing.assert_array_equal(new.features[:n], g.features)
    np.testing.assert_array_equal(new.edges[: g.num_edges], g.edges)
    added = new.edges[g.num_edges:]
    assert (added[:, 0] < n).all() and (added[:, 1] >= n).all()
    assert new.train_mask[n:].all() and not new.val_mask[n:].any() and not new.test_mask[n:].any()
    assert new.generated[n:].all() and not new.generated[:n].any()
    assert new.labels[n:].tolist() == [0, 1, 0]
    assert new.texts[n:] == (samples[0].sample.main_text,) * 3
    assert enrichment_stats(out) == out.stats


def test_zero_rows_are_never_neighbours():
    feats = np.array([[1.0, 0.0], [0.0, 0.0]])
    hoods = neighborhoods(np.array([[1.0, 0.0]]), feats, np.array([True, True]), -0.5)
    assert hoods[0].tolist() == [0]


def test_errors(small_graph):
    d = small_graph.feature_dim
    with pytest.raises(EnrichmentError):
        enrich(small_graph, [sample(np.ones(d), sid="n0")])
    with pytest.raises(EnrichmentError):
        enrich(small_graph, [sample(np.ones(d)), sample(np.ones(d))])
    with pytest.raises(EnrichmentError):
        enrich(small_graph, [sample(np.ones(d), label=7)])
    with pytest.raises(EnrichmentError):
        enrich(small_graph, [sample(np.ones(d + 1))])
    with pytest.raises(ValueError):
        EnrichmentConfig(tau=-1.0)


def test_unified_mode_reencodes_texts(small_graph):
    enc = HashingEncoder(16)
    vec = enc.encode([small_graph.texts[0]])[0]
    out = enrich(small_graph, [sample(vec / np.linalg.norm(vec))], EnrichmentConfig(encoder=enc))
    assert out.graph.feature_dim == 16
    assert 0 in out.graph.edges[small_graph.num_edges:, 0]


def test_stats_detect_tampering(small_graph):
    out = enrich(small_graph, [sample(small_graph.features[0])], EnrichmentConfig(tau=0.5))
    forged = EnrichedGraph(out.graph, type(out.stats)(1, out.stats.edges_added + 1, out.stats.neighbor_counts),
                           out.base_nodes, out.base_edges, out.tau)
    with pytest.raises(EnrichmentError):
        enrichment_stats(forged)
