"""Text-attributed graph model, manifest I/O, splits and structural edits.

Graphs are immutable: every edit returns a new :class:`TextAttributedGraph`.
Undirected edges are stored once as ``(i, j)`` index pairs with ``i < j`` and
are expanded symmetrically only when a message-passing operator is built.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng as make_rng

logger = logging.getLogger(__name__)

VAL_FRACTION = 0.2
TEST_FRACTION = 0.2
MAX_TRAIN_FRACTION = 1.0 - VAL_FRACTION - TEST_FRACTION

FEATURE_MAGIC = b"RGF1"


class GraphError(ValueError):
    """Raised for malformed graphs, manifests or invalid edits."""


class NodeOrigin(str, Enum):
    ORIGINAL = "original"
    GENERATED = "generated"


@dataclass(frozen=True)
class MaskSet:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self) -> None:
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=bool)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.train) == len(self.val) == len(self.test)):
            raise GraphError("mask lengths differ")
        if np.any(self.train & self.val) or np.any(self.train & self.test) or np.any(self.val & self.test):
            raise GraphError("train/val/test masks overlap")

    @property
    def unassigned(self) -> np.ndarray:
        return ~(self.train | self.val | self.test)


def _canonical_edges(edges: Iterable[Sequence[int]] | np.ndarray, n: int) -> tuple[np.ndarray, int, int]:
    """Return sorted unique ``(i<j)`` pairs plus counts of dropped duplicates and self-loops."""
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64), 0, 0
    arr = arr.reshape(-1, 2)
    if arr.min() < 0 or arr.max() >= n:
        raise GraphError("edge endpoint out of range")
    loops = arr[:, 0] == arr[:, 1]
    n_loops = int(loops.sum())
    arr = np.sort(arr[~loops], axis=1)
    uniq = np.unique(arr, axis=0) if len(arr) else np.zeros((0, 2), dtype=np.int64)
    return uniq.astype(np.int64), len(arr) - len(uniq), n_loops


@dataclass(frozen=True, eq=False)
class TextAttributedGraph:
    """A text-attributed graph with features, labels, edges and split masks.

    ``labels`` hold ground truth for every node; ``train_mask`` marks the
    nodes whose label is visible during training.
    """

    node_ids: tuple[str, ...]
    texts: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    edges: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    feature_missing: np.ndarray
    generated: np.ndarray
    class_names: tuple[str, ...] = ()
    name: str = "graph"

    def __post_init__(self) -> None:
        n = len(self.node_ids)
        object.__setattr__(self, "node_ids", tuple(str(i) for i in self.node_ids))
        object.__setattr__(self, "texts", tuple(self.texts))
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            feats = feats.reshape(n, -1) if n else feats.reshape(0, 0)
        arrays = {
            "features": feats,
            "labels": np.asarray(self.labels, dtype=np.int64),
            "edges": np.asarray(self.edges, dtype=np.int64).reshape(-1, 2),
            "train_mask": np.asarray(self.train_mask, dtype=bool),
            "val_mask": np.asarray(self.val_mask, dtype=bool),
            "test_mask": np.asarray(self.test_mask, dtype=bool),
            "feature_missing": np.asarray(self.feature_missing, dtype=bool),
            "generated": np.asarray(self.generated, dtype=bool),
        }
        for key, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class_{k}" for k in range(self.num_classes)))
        else:
            object.__setattr__(self, "class_names", tuple(self.class_names))
        self._validate(n)

    def _validate(self, n: int) -> None:
        if len(set(self.node_ids)) != n:
            raise GraphError("node ids are not unique")
        if not (len(self.texts) == len(self.labels) == self.features.shape[0] == n):
            raise GraphError(
                f"row counts disagree: ids={n} texts={len(self.texts)} "
                f"labels={len(self.labels)} features={self.features.shape[0]}"
            )
        for key in ("train_mask", "val_mask", "test_mask", "feature_missing", "generated"):
            if len(getattr(self, key)) != n:
                raise GraphError(f"{key} has wrong length")
        if self.num_classes < 1:
            raise GraphError("num_classes must be positive")
        if len(self.class_names) != self.num_classes:
            raise GraphError("class_names length differs from num_classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphError("label out of range")
        MaskSet(self.train_mask, self.val_mask, self.test_mask)
        e = self.edges
        if len(e):
            if e.min() < 0 or e.max() >= n:
                raise GraphError("edge endpoint does not exist")
            if np.any(e[:, 0] >= e[:, 1]):
                raise GraphError("edges must be stored as (i, j) with i < j and no self-loops")
            if len(np.unique(e, axis=0)) != len(e):
                raise GraphError("duplicate undirected edge")

    # construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        node_ids: Sequence[str],
        texts: Sequence[str],
        features: np.ndarray,
        labels: Sequence[int],
        num_classes: int,
        edges: Iterable[Sequence[int]] | np.ndarray = (),
        masks: MaskSet | None = None,
        feature_missing: np.ndarray | None = None,
        generated: np.ndarray | None = None,
        class_names: Sequence[str] = (),
        name: str = "graph",
    ) -> "TextAttributedGraph":
        """Build a graph, canonicalising the edge list (dedup, drop self-loops)."""
        n = len(node_ids)
        canon, n_dup, n_loop = _canonical_edges(edges, n)
        if n_dup or n_loop:
            logger.warning("dropped %d duplicate edges and %d self-loops", n_dup, n_loop)
        zeros = np.zeros(n, dtype=bool)
        masks = masks or MaskSet(zeros, zeros, zeros)
        return cls(
            node_ids=tuple(node_ids),
            texts=tuple(texts),
            features=np.asarray(features, dtype=np.float32),
            labels=np.asarray(labels, dtype=np.int64),
            num_classes=int(num_classes),
            edges=canon,
            train_mask=masks.train,
            val_mask=masks.val,
            test_mask=masks.test,
            feature_missing=zeros if feature_missing is None else feature_missing,
            generated=zeros if generated is None else generated,
            class_names=tuple(class_names),
            name=name,
        )

    def replace(self, **changes) -> "TextAttributedGraph":
        return dataclasses.replace(self, **changes)

    # accessors -----------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def masks(self) -> MaskSet:
        return MaskSet(self.train_mask, self.val_mask, self.test_mask)

    @property
    def node_origin(self) -> list[NodeOrigin]:
        return [NodeOrigin.GENERATED if g else NodeOrigin.ORIGINAL for g in self.generated]

    @cached_property
    def index(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def with_masks(self, masks: MaskSet) -> "TextAttributedGraph":
        return self.replace(train_mask=masks.train, val_mask=masks.val, test_mask=masks.test)

    def edge_set(self) -> set[tuple[str, str]]:
        """Edges as unordered id pairs; convenient for comparisons across re-indexing."""
        ids = self.node_ids
        return {tuple(sorted((ids[i], ids[j]))) for i, j in self.edges}

    def same_class_edge_mask(self) -> np.ndarray:
        if not len(self.edges):
            return np.zeros(0, dtype=bool)
        return self.labels[self.edges[:, 0]] == self.labels[self.edges[:, 1]]


# --- splits ---------------------------------------------------------------------


def _allocate(total: int, counts: np.ndarray) -> np.ndarray:
    """Split ``total`` across classes proportionally to ``counts`` (largest remainder).

    Every class with members receives at least one slot when ``total`` allows it.
    """
    counts = np.asarray(counts, dtype=np.int64)
    pool = int(counts.sum())
    alloc = np.zeros_like(counts)
    if total <= 0 or pool == 0:
        return alloc
    total = min(total, pool)
    quota = total * counts / pool
    alloc = np.floor(quota + 1e-9).astype(np.int64)
    alloc = np.minimum(alloc, counts)
    rest = total - int(alloc.sum())
    order = sorted(range(len(counts)), key=lambda k: (-(quota[k] - alloc[k]), k))
    while rest > 0:
        for k in order:
            if rest == 0:
                break
            if alloc[k] < counts[k]:
                alloc[k] += 1
                rest -= 1
    present = np.flatnonzero(counts > 0)
    if total >= len(present):
        for k in present:
            if alloc[k] == 0:
                donor = int(np.argmax(alloc))
                alloc[donor] -= 1
                alloc[k] += 1
    return alloc


def stratified_draw(
    labels: np.ndarray, pool: np.ndarray, n_draw: int, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n_draw`` node indices from the boolean ``pool`` with class-proportional quotas."""
    pool_idx = np.flatnonzero(pool)
    counts = np.bincount(labels[pool_idx], minlength=num_classes)
    alloc = _allocate(n_draw, counts)
    chosen = []
    for k in range(num_classes):
        members = pool_idx[labels[pool_idx] == k]
        if alloc[k]:
            chosen.append(rng.permutation(members)[: alloc[k]])
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def split_masks(graph: TextAttributedGraph, train_fraction: float, seed: int) -> MaskSet:
    """Class-stratified split with val and test fixed at 20% of the nodes each."""
    if not 0 < train_fraction <= MAX_TRAIN_FRACTION + 1e-12:
        raise GraphError(f"train_fraction must lie in (0, {MAX_TRAIN_FRACTION}], got {train_fraction}")
    n = graph.num_nodes
    n_val = round(VAL_FRACTION * n)
    n_test = round(TEST_FRACTION * n)
    n_train = round(train_fraction * n)
    if n_train > n - n_val - n_test:
        raise GraphError(f"train size {n_train} exceeds the {n - n_val - n_test} nodes left after val/test")
    gen = make_rng(seed, "split")
    free = np.ones(n, dtype=bool)
    masks = []
    for size in (n_val, n_test, n_train):
        picked = stratified_draw(graph.labels, free, size, graph.num_classes, gen)
        mask = np.zeros(n, dtype=bool)
        mask[picked] = True
        free &= ~mask
        masks.append(mask)
    val, test, train = masks
    return MaskSet(train=train, val=val, test=test)


# --- structural edits ---------------------------------------------------------------


def remove_nodes(graph: TextAttributedGraph, ids: Iterable[str]) -> TextAttributedGraph:
    """Drop nodes by id together with incident edges; survivors keep their data."""
    ids = list(ids)
    if not ids:
        return graph
    index = graph.index
    unknown = [i for i in ids if i not in index]
    if unknown:
        raise GraphError(f"unknown node ids: {unknown[:5]}")
    keep = np.ones(graph.num_nodes, dtype=bool)
    keep[[index[i] for i in ids]] = False
    return _subgraph(graph, keep)


def _subgraph(graph: TextAttributedGraph, keep: np.ndarray) -> TextAttributedGraph:
    new_pos = np.full(graph.num_nodes, -1, dtype=np.int64)
    new_pos[keep] = np.arange(int(keep.sum()))
    e = graph.edges
    if len(e):
        alive = keep[e[:, 0]] & keep[e[:, 1]]
        e = new_pos[e[alive]]
    kept = np.flatnonzero(keep)
    return graph.replace(
        node_ids=tuple(graph.node_ids[i] for i in kept),
        texts=tuple(graph.texts[i] for i in kept),
        features=graph.features[keep],
        labels=graph.labels[keep],
        edges=e.reshape(-1, 2),
        train_mask=graph.train_mask[keep],
        val_mask=graph.val_mask[keep],
        test_mask=graph.test_mask[keep],
        feature_missing=graph.feature_missing[keep],
        generated=graph.generated[keep],
    )


def remove_edges(graph: TextAttributedGraph, edge_rows: np.ndarray) -> TextAttributedGraph:
    """Drop the edges at the given row positions of ``graph.edges``."""
    keep = np.ones(graph.num_edges, dtype=bool)
    keep[np.asarray(edge_rows, dtype=np.int64)] = False
    return graph.replace(edges=graph.edges[keep])


def set_edges(graph: TextAttributedGraph, edges: Iterable[Sequence[int]] | np.ndarray) -> TextAttributedGraph:
    canon, _, _ = _canonical_edges(edges, graph.num_nodes)
    return graph.replace(edges=canon)


def add_edges(graph: TextAttributedGraph, edges: Iterable[Sequence[int]] | np.ndarray) -> TextAttributedGraph:
    extra = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    return set_edges(graph, np.concatenate([graph.edges, extra]))


def adjacency_lists(graph: TextAttributedGraph) -> list[set[int]]:
    nbrs: list[set[int]] = [set() for _ in range(graph.num_nodes)]
    for i, j in graph.edges:
        nbrs[i].add(int(j))
        nbrs[j].add(int(i))
    return nbrs


# --- persistence ------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """JSON manifest ``{name, num_classes, nodes, edges, features}``; paths are relative to the manifest."""

    name: str
    num_classes: int
    nodes: Path
    edges: Path
    features: Path
    class_names: list[str] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise GraphError(f"manifest not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        try:
            base = path.parent
            return cls(
                name=doc["name"],
                num_classes=int(doc["num_classes"]),
                nodes=base / doc["nodes"],
                edges=base / doc["edges"],
                features=base / doc["features"],
                class_names=list(doc.get("class_names", [])),
            )
        except KeyError as exc:
            raise GraphError(f"manifest missing key {exc}") from None

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        base = path.parent

        def rel(p: Path) -> str:
            try:
                return str(Path(p).relative_to(base))
            except ValueError:
                return str(p)

        doc = {
            "name": self.name,
            "num_classes": self.num_classes,
            "nodes": rel(self.nodes),
            "edges": rel(self.edges),
            "features": rel(self.features),
        }
        if self.class_names:
            doc["class_names"] = self.class_names
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
        return path


def write_features(path: str | Path, features: np.ndarray) -> None:
    """Binary row-major float32 with a ``magic + (N, d)`` header; ``.csv`` paths get text."""
    path = Path(path)
    arr = np.ascontiguousarray(features, dtype=np.float32)
    if path.suffix == ".csv":
        np.savetxt(path, arr, delimiter=",", fmt="%.9g")
        return
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise GraphError(f"feature file not found: {path}")
    if path.suffix == ".csv":
        try:
            arr = np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)
        except ValueError as exc:
            raise GraphError(f"inconsistent feature rows in {path}: {exc}") from None
        return arr
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise GraphError(f"{path} is not a feature matrix file")
    n, d = struct.unpack("<QQ", raw[4:20])
    body = raw[20:]
    if len(body) != 4 * n * d:
        raise GraphError(f"{path}: header says {n}x{d} but payload has {len(body) // 4} values")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(n, d)


_SPLIT_NAMES = ("train", "val", "test")


def save_graph(graph: TextAttributedGraph, directory: str | Path, feature_format: str = "bin") -> Path:
    """Persist ``graph`` next to a manifest and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nodes_path = directory / "nodes.tsv"
    edges_path = directory / "edges.txt"
    feats_path = directory / f"features.{feature_format}"
    with open(nodes_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["id", "label", "text", "origin", "split", "feature_missing"])
        for i, nid in enumerate(graph.node_ids):
            split = next((s for s in _SPLIT_NAMES if getattr(graph, f"{s}_mask")[i]), "")
            writer.writerow([
                nid,
                int(graph.labels[i]),
                graph.texts[i],
                NodeOrigin.GENERATED.value if graph.generated[i] else NodeOrigin.ORIGINAL.value,
                split,
                int(graph.feature_missing[i]),
            ])
    with open(edges_path, "w", encoding="utf-8") as fh:
        for i, j in graph.edges:
            fh.write(f"{graph.node_ids[i]} {graph.node_ids[j]}\n")
    write_features(feats_path, graph.features)
    manifest = DatasetManifest(
        name=graph.name,
        num_classes=graph.num_classes,
        nodes=nodes_path,
        edges=edges_path,
        features=feats_path,
        class_names=list(graph.class_names),
    )
    return manifest.write(directory / "manifest.json")


@dataclass(frozen=True)
class LoadReport:
    duplicate_edges: int
    self_loops: int


def load_graph_with_report(manifest: DatasetManifest | str | Path) -> tuple[TextAttributedGraph, LoadReport]:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    for p in (manifest.nodes, manifest.edges, manifest.features):
        if not Path(p).exists():
            raise GraphError(f"missing file: {p}")

    ids: list[str] = []
    labels: list[int] = []
    texts: list[str] = []
    origin: list[bool] = []
    splits: list[str] = []
    missing: list[bool] = []
    with open(manifest.nodes, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or header[:3] != ["id", "label", "text"]:
            raise GraphError(f"{manifest.nodes}: header must start with id, label, text")
        cols = {name: k for k, name in enumerate(header)}
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            try:
                labels.append(int(row[1]))
            except ValueError:
                raise GraphError(f"non-integer label {row[1]!r} for node {row[0]}") from None
            texts.append(row[2])
            origin.append("origin" in cols and row[cols["origin"]] == NodeOrigin.GENERATED.value)
            splits.append(row[cols["split"]] if "split" in cols else "")
            missing.append("feature_missing" in cols and row[cols["feature_missing"]] == "1")

    feats = read_features(manifest.features)
    if feats.shape[0] != len(ids):
        raise GraphError(f"row-count mismatch: {len(ids)} nodes vs {feats.shape[0]} feature rows")
    for nid, lab in zip(ids, labels):
        if not 0 <= lab < manifest.num_classes:
            raise GraphError(f"label {lab} of node {nid} outside [0, {manifest.num_classes})")

    index = {nid: k for k, nid in enumerate(ids)}
    pairs = []
    with open(manifest.edges, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphError(f"{manifest.edges}:{lineno}: expected two ids")
            try:
                pairs.append((index[parts[0]], index[parts[1]]))
            except KeyError as exc:
                raise GraphError(f"{manifest.edges}:{lineno}: unknown node {exc}") from None
    canon, n_dup, n_loop = _canonical_edges(pairs, len(ids))
    if n_dup or n_loop:
        logger.warning("%s: dropped %d duplicate edges and %d self-loops", manifest.name, n_dup, n_loop)

    split_arr = np.array(splits, dtype=object)
    masks = MaskSet(*(split_arr == s for s in _SPLIT_NAMES)) if ids else None
    graph = TextAttributedGraph.create(
        node_ids=ids,
        texts=texts,
        features=feats,
        labels=labels,
        num_classes=manifest.num_classes,
        edges=canon,
        masks=masks,
        feature_missing=np.array(missing, dtype=bool),
        generated=np.array(origin, dtype=bool),
        class_names=manifest.class_names,
        name=manifest.name,
    )
    return graph, LoadReport(duplicate_edges=n_dup, self_loops=n_loop)


def load_graph(manifest: DatasetManifest | str | Path) -> TextAttributedGraph:
    """Load and validate a graph; duplicate edges and self-loops are dropped with a warning."""
    return load_graph_with_report(manifest)[0]


def floor_count(ratio: float, n: int) -> int:
    """``floor(ratio * n)`` robust to binary representation error (0.9 * 70 -> 63)."""
    return int(math.floor(ratio * n + 1e-9))
