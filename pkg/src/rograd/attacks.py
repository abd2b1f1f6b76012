"""Injection of the four graph deficiencies and compound attack intensity.

NRA removes trainable nodes, SHA removes same-class edges, FDA zeroes whole
feature rows and SSA shrinks the labelled training set. Compound attacks run
in the fixed order NRA -> SHA -> FDA -> SSA, each stage seeded from the AttackSpec seed
seed through :func:`rograd.seeding.derive_seed`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .seeding import derive_seed, rng as make_rng
from .tag_graph import (
    MAX_TRAIN_FRACTION,
    GraphError,
    TextAttributedGraph,
    _subgraph,
    floor_count,
    stratified_draw,
)

ATTACK_ORDER = ("nra", "sha", "fda", "ssa")
REFERENCE_LABELED_RATIO = MAX_TRAIN_FRACTION


class AttackError(GraphError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    nra_ratio: float = 0.0
    sha_ratio: float = 0.0
    fda_ratio: float = 0.0
    labeled_ratio: float = REFERENCE_LABELED_RATIO
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("nra_ratio", "sha_ratio", "fda_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise AttackError(f"{name}={value} outside [0, 1]")
        if not 0.0 < self.labeled_ratio <= REFERENCE_LABELED_RATIO + 1e-12:
            raise AttackError(f"labeled_ratio={self.labeled_ratio} outside (0, {REFERENCE_LABELED_RATIO}]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttackSpec":
        return cls(**json.loads(text))

    @property
    def is_clean(self) -> bool:
        return intensity(self) == 0.0


@dataclass(frozen=True)
class Provenance:
    nodes_removed: int = 0
    same_class_edges_removed: int = 0
    feature_rows_zeroed: int = 0
    labels_withheld: int = 0

    def __add__(self, other: "Provenance") -> "Provenance":
        return Provenance(
            self.nodes_removed + other.nodes_removed,
            self.same_class_edges_removed + other.same_class_edges_removed,
            self.feature_rows_zeroed + other.feature_rows_zeroed,
            self.labels_withheld + other.labels_withheld,
        )


@dataclass(frozen=True)
class AttackedGraph:
    graph: TextAttributedGraph
    provenance: Provenance = field(default_factory=Provenance)


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise AttackError(f"ratio {ratio} outside [0, 1]")


def apply_nra(graph: TextAttributedGraph, ratio: float, seed: int) -> AttackedGraph:
    """Remove ``floor(ratio * |eligible|)`` nodes; val/test nodes are never eligible."""
    _check_ratio(ratio)
    eligible = np.flatnonzero(~(graph.val_mask | graph.test_mask))
    n_drop = floor_count(ratio, len(eligible))
    if n_drop == 0:
        return AttackedGraph(graph)
    drop = make_rng(seed, "nra").choice(eligible, size=n_drop, replace=False)
    keep = np.ones(graph.num_nodes, dtype=bool)
    keep[drop] = False
    return AttackedGraph(_subgraph(graph, keep), Provenance(nodes_removed=n_drop))


def apply_sha(graph: TextAttributedGraph, ratio: float, seed: int) -> AttackedGraph:
    """Remove ``floor(ratio * |E_same|)`` edges chosen among edges joining same-label nodes."""
    _check_ratio(ratio)
    same = np.flatnonzero(graph.same_class_edge_mask())
    n_drop = floor_count(ratio, len(same))
    if n_drop == 0:
        return AttackedGraph(graph)
    drop = make_rng(seed, "sha").choice(same, size=n_drop, replace=False)
    keep = np.ones(graph.num_edges, dtype=bool)
    keep[drop] = False
    return AttackedGraph(graph.replace(edges=graph.edges[keep]), Provenance(same_class_edges_removed=n_drop))


def apply_fda(graph: TextAttributedGraph, ratio: float, seed: int) -> AttackedGraph:
    """Zero ``floor(ratio * N)`` whole feature rows and flag them as missing."""
    _check_ratio(ratio)
    n_drop = floor_count(ratio, graph.num_nodes)
    if n_drop == 0:
        return AttackedGraph(graph)
    rows = make_rng(seed, "fda").choice(graph.num_nodes, size=n_drop, replace=False)
    feats = graph.features.copy()
    feats[rows] = 0.0
    missing = graph.feature_missing.copy()
    newly = int((~missing[rows]).sum())
    missing[rows] = True
    return AttackedGraph(graph.replace(features=feats, feature_missing=missing), Provenance(feature_rows_zeroed=newly))


def apply_ssa(graph: TextAttributedGraph, labeled_ratio: float, seed: int) -> AttackedGraph:
    """Redraw the train mask with ``round(labeled_ratio * N)`` class-stratified nodes.

    Only nodes outside val/test are drawn; the draw is capped at that pool.
    Every class present in the pool must keep at least one train node.
    """
    if not 0.0 < labeled_ratio <= REFERENCE_LABELED_RATIO + 1e-12:
        raise AttackError(f"labeled_ratio={labeled_ratio} outside (0, {REFERENCE_LABELED_RATIO}]")
    pool = ~(graph.val_mask | graph.test_mask)
    n_train = min(round(labeled_ratio * graph.num_nodes), int(pool.sum()))
    picked = stratified_draw(graph.labels, pool, n_train, graph.num_classes, make_rng(seed, "ssa"))
    train = np.zeros(graph.num_nodes, dtype=bool)
    train[picked] = True
    pool_classes = set(np.unique(graph.labels[pool]).tolist())
    train_classes = set(np.unique(graph.labels[train]).tolist())
    starved = sorted(pool_classes - train_classes)
    if starved:
        raise AttackError(
            f"labeled_ratio={labeled_ratio} leaves classes {starved} without training labels "
            f"({n_train} train nodes for {len(pool_classes)} classes)"
        )
    withheld = int((graph.train_mask & ~train).sum())
    return AttackedGraph(graph.replace(train_mask=train), Provenance(labels_withheld=withheld))


def ssa_intensity(labeled_ratio: float) -> float:
    """SSA term ``1 - labeled_ratio / 0.6`` truncated to two decimals (0.4 -> 0.33, 0.2 -> 0.66)."""
    raw = 1.0 - labeled_ratio / REFERENCE_LABELED_RATIO
    return max(0.0, math.floor(raw * 100 + 1e-9) / 100)


def intensity(spec: AttackSpec) -> float:
    """Compound attack intensity: the sum of the four per-attack intensities."""
    return round(spec.nra_ratio + spec.sha_ratio + spec.fda_ratio + ssa_intensity(spec.labeled_ratio), 10)


def stage_seed(seed: int, attack: str) -> int:
    return derive_seed(seed, "attack", attack)


def apply_compound(graph: TextAttributedGraph, spec: AttackSpec) -> AttackedGraph:
    """Apply NRA, SHA, FDA and SSA in that order with per-stage derived seeds.

    Graphs are expected to carry the reference split (train = every node
    outside val/test), as produced by ``split_masks(graph, 0.6, seed)``.
    """
    out = AttackedGraph(graph)
    stages = (
        ("nra", apply_nra, spec.nra_ratio),
        ("sha", apply_sha, spec.sha_ratio),
        ("fda", apply_fda, spec.fda_ratio),
        ("ssa", apply_ssa, spec.labeled_ratio),
    )
    for name, fn, value in stages:
        if name == "ssa" and ssa_intensity(value) == 0.0:
            # the reference ratio keeps the incoming train mask
            continue
        step = fn(out.graph, value, stage_seed(spec.seed, name))
        out = AttackedGraph(step.graph, out.provenance + step.provenance)
    return out


PROVENANCE_FIELDS = (
    "nra_ratio", "sha_ratio", "fda_ratio", "labeled_ratio", "seed", "intensity",
    "nodes_removed", "same_class_edges_removed", "feature_rows_zeroed", "labels_withheld",
)


def provenance_csv_row(spec: AttackSpec, provenance: Provenance, header: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(PROVENANCE_FIELDS)
    writer.writerow([*asdict(spec).values(), f"{intensity(spec):.2f}", *asdict(provenance).values()])
    return buf.getvalue()
