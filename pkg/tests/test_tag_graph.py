import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from rograd.tag_graph import (
    DatasetManifest,
    GraphError,
    MaskSet,
    NodeOrigin,
    TextAttributedGraph,
    _allocate,
    add_edges,
    adjacency_lists,
    floor_count,
    load_graph,
    load_graph_with_report,
    read_features,
    remove_nodes,
    save_graph,
    split_masks,
    write_features,
)


def test_create_canonicalises_edges(caplog):
    g = make_graph(n=4, edges=[(1, 0), (0, 1), (2, 2), (3, 2)])
    assert g.edges.tolist() == [[0, 1], [2, 3]]
    assert "duplicate" in caplog.text


def test_validation_errors():
    g = make_graph()
    with pytest.raises((GraphError, ValueError)):
        g.replace(labels=np.full(g.num_nodes, 7))
    with pytest.raises((GraphError, ValueError)):
        g.replace(node_ids=("a",) * g.num_nodes)
    with pytest.raises(GraphError):
        MaskSet(np.array([True, False]), np.array([True, False]), np.array([False, False]))


def test_arrays_are_read_only(small_graph):
    with pytest.raises(ValueError):
        small_graph.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        small_graph.train_mask[0] = False


def test_node_origin_and_index(small_graph):
    assert small_graph.node_origin[0] is NodeOrigin.ORIGINAL
    assert small_graph.index["n5"] == 5


def test_empty_graph():
    g = TextAttributedGraph.create([], [], np.zeros((0, 0)), [], 2)
    assert g.num_nodes == 0 and g.num_edges == 0


@pytest.mark.parametrize("n", [10, 50, 101, 200])
def test_split_sizes_and_disjointness(n):
    g = make_graph(n=n, num_classes=3, masks=False)
    m = split_masks(g, 0.6, seed=4)
    assert m.val.sum() == round(0.2 * n) and m.test.sum() == round(0.2 * n)
    assert m.train.sum() == round(0.6 * n) or m.train.sum() == n - 2 * round(0.2 * n)
    assert not (m.train & m.val).any() and not (m.val & m.test).any()
    assert split_masks(g, 0.6, seed=4).train.tolist() == m.train.tolist()


def test_split_is_stratified():
    g = make_graph(n=300, num_classes=3, masks=False)
    m = split_masks(g, 0.2, seed=1)
    assert np.bincount(g.labels[m.test], minlength=3).tolist() == [20, 20, 20]
    assert np.bincount(g.labels[m.train], minlength=3).tolist() == [20, 20, 20]


def test_split_rejects_oversized_train():
    with pytest.raises(GraphError):
        split_masks(make_graph(masks=False), 0.7, 0)


@given(st.lists(st.integers(0, 30), min_size=1, max_size=6), st.integers(0, 120))
@settings(max_examples=200, deadline=None)
def test_allocate_properties(counts, total):
    counts = np.array(counts)
    alloc = _allocate(total, counts)
    assert alloc.sum() == min(total, counts.sum())
    assert (alloc <= counts).all() and (alloc >= 0).all()
    present = (counts > 0).sum()
    if total >= present:
        assert (alloc[counts > 0] >= 1).all()


def test_remove_nodes_reindexes(small_graph):
    g = remove_nodes(small_graph, ["n0", "n3"])
    assert g.num_nodes == small_graph.num_nodes - 2
    assert "n0" not in g.index
    before = small_graph.edge_set()
    after = g.edge_set()
    assert after == {e for e in before if "n0" not in e and "n3" not in e}
    with pytest.raises(GraphError):
        remove_nodes(small_graph, ["zzz"])


def test_add_edges_and_adjacency(small_graph):
    g = add_edges(small_graph, [(0, 6), (6, 0)])
    assert g.num_edges == small_graph.num_edges + 1
    assert 6 in adjacency_lists(g)[0]


def test_same_class_edge_mask(small_graph):
    mask = small_graph.same_class_edge_mask()
    e = small_graph.edges
    assert mask.tolist() == (small_graph.labels[e[:, 0]] == small_graph.labels[e[:, 1]]).tolist()


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_feature_roundtrip(tmp_path, suffix):
    x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    write_features(tmp_path / f"f{suffix}", x)
    assert np.array_equal(read_features(tmp_path / f"f{suffix}"), x)


def test_feature_file_rejects_bad_magic(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(GraphError):
        read_features(tmp_path / "f.bin")


def test_graph_roundtrip(tmp_path, small_graph):
    g = small_graph.replace(
        feature_missing=np.arange(small_graph.num_nodes) == 2,
        texts=("tab\there and \"quotes\"",) + small_graph.texts[1:],
    )
    path = save_graph(g, tmp_path / "ds")
    h = load_graph(path)
    assert h.node_ids == g.node_ids and h.texts == g.texts
    assert np.array_equal(h.features, g.features) and np.array_equal(h.edges, g.edges)
    assert np.array_equal(h.train_mask, g.train_mask) and np.array_equal(h.feature_missing, g.feature_missing)
    assert h.class_names == g.class_names


def test_load_reports_duplicates_and_rejects_bad_rows(tmp_path, small_graph):
    path = save_graph(small_graph, tmp_path / "ds")
    m = DatasetManifest.read(path)
    with open(m.edges, "a") as fh:
        fh.write("n0 n1\nn1 n0\nn2 n2\n")
    _, report = load_graph_with_report(path)
    assert report.self_loops == 1 and report.duplicate_edges >= 1
    with open(m.edges, "a") as fh:
        fh.write("n0 ghost\n")
    with pytest.raises(GraphError, match="unknown node"):
        load_graph(path)


def test_floor_count_is_robust():
    assert floor_count(0.9, 70) == 63
    assert floor_count(0.5, 7) == 3
    assert floor_count(0.0, 10) == 0
