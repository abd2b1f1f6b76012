import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from oracles import recount_provenance
from rograd.attacks import (
    AttackError,
    AttackSpec,
    Provenance,
    apply_compound,
    apply_fda,
    apply_nra,
    apply_sha,
    apply_ssa,
    intensity,
    provenance_csv_row,
    ssa_intensity,
    stage_seed,
)
from rograd.tag_graph import split_masks


@pytest.fixture
def g60():
    g = make_graph(n=60, num_classes=3, masks=False, edges=[(i, j) for i in range(60) for j in (i + 1, i + 3, i + 7) if j < 60])
    return g.with_masks(split_masks(g, 0.6, seed=0))


def test_nra_spares_val_and_test(g60):
    out = apply_nra(g60, 0.5, seed=1)
    eligible = (~(g60.val_mask | g60.test_mask)).sum()
    assert out.provenance.nodes_removed == eligible // 2
    assert out.graph.val_mask.sum() == g60.val_mask.sum()
    assert out.graph.test_mask.sum() == g60.test_mask.sum()


def test_sha_only_touches_same_class_edges(g60):
    out = apply_sha(g60, 0.9, seed=2)
    n_same = g60.same_class_edge_mask().sum()
    assert out.provenance.same_class_edges_removed == int(0.9 * n_same + 1e-9)
    assert (~out.graph.same_class_edge_mask()).sum() == (~g60.same_class_edge_mask()).sum()


def test_fda_zeroes_whole_rows(g60):
    out = apply_fda(g60, 0.5, seed=3)
    rows = out.graph.feature_missing
    assert rows.sum() == 30 and out.provenance.feature_rows_zeroed == 30
    assert not out.graph.features[rows].any()
    assert np.array_equal(out.graph.features[~rows], g60.features[~rows])
    again = apply_fda(out.graph, 1.0, seed=4)
    assert again.provenance.feature_rows_zeroed == 30


def test_ssa_sizes_and_stratification(g60):
    out = apply_ssa(g60, 0.2, seed=5)
    assert out.graph.train_mask.sum() == 12
    assert np.bincount(out.graph.labels[out.graph.train_mask], minlength=3).tolist() == [4, 4, 4]
    assert out.provenance.labels_withheld == 36 - 12
    assert not (out.graph.train_mask & (out.graph.val_mask | out.graph.test_mask)).any()


def test_ssa_rejects_starving_classes():
    g = make_graph(n=10, num_classes=3, masks=False)
    g = g.with_masks(split_masks(g, 0.6, 0))
    with pytest.raises(AttackError, match="without training labels"):
        apply_ssa(g, 0.1, seed=0)


def test_ratio_validation(g60):
    with pytest.raises(AttackError):
        AttackSpec(nra_ratio=1.5)
    with pytest.raises(AttackError):
        AttackSpec(labeled_ratio=0.7)
    with pytest.raises(AttackError):
        apply_sha(g60, -0.1, 0)


def test_zero_ratios_are_identity(g60):
    out = apply_compound(g60, AttackSpec(seed=3))
    assert out.graph is g60 and out.provenance == Provenance()


@pytest.mark.parametrize(
    "lr,expected", [(0.6, 0.0), (0.4, 0.33), (0.2, 0.66)]
)
def test_ssa_intensity_table(lr, expected):
    assert ssa_intensity(lr) == expected


def test_intensity_extremes():
    assert intensity(AttackSpec(0.9, 0.9, 0.9, 0.2)) == pytest.approx(3.36)
    assert intensity(AttackSpec(0.5, 0.0, 0.9, 0.4)) == pytest.approx(1.73)


def test_stage_seeds_differ():
    assert len({stage_seed(0, s) for s in ("nra", "sha", "fda", "ssa")}) == 4


def test_compound_is_deterministic(g60):
    spec = AttackSpec(0.5, 0.5, 0.5, 0.2, seed=9)
    a, b = apply_compound(g60, spec), apply_compound(g60, spec)
    assert a.graph.node_ids == b.graph.node_ids and np.array_equal(a.graph.edges, b.graph.edges)
    assert a.provenance == b.provenance


@given(
    st.sampled_from([0.0, 0.25, 0.5, 0.9, 1.0]),
    st.sampled_from([0.0, 0.5, 0.9]),
    st.sampled_from([0.0, 0.3, 0.9]),
    st.sampled_from([0.6, 0.4, 0.2]),
    st.integers(0, 10_000),
)
@settings(max_examples=60, deadline=None)
def test_compound_matches_recount(nra, sha, fda, lr, seed):
    g = make_graph(n=60, num_classes=3, masks=False, edges=[(i, j) for i in range(60) for j in (i + 1, i + 4) if j < 60])
    g = g.with_masks(split_masks(g, 0.6, seed=1))
    out = apply_compound(g, AttackSpec(nra, sha, fda, lr, seed))
    assert recount_provenance(g, out.graph) == {
        k: getattr(out.provenance, k) for k in ("nodes_removed", "same_class_edges_removed",
                                                "feature_rows_zeroed", "labels_withheld")
    }


def test_spec_json_roundtrip():
    spec = AttackSpec(0.5, 0.0, 0.9, 0.4, seed=3)
    assert AttackSpec.from_json(spec.to_json()) == spec


def test_provenance_csv_row():
    text = provenance_csv_row(AttackSpec(0.5, 0.5, 0.5, 0.2, 1), Provenance(1, 2, 3, 4), header=True)
    header, row = text.strip().splitlines()
    assert header.startswith("nra_ratio,") and row.endswith(",2.16,1,2,3,4")
