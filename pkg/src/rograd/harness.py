"""Attack grids, method pipelines, robustness curves and representation statistics."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import os
import time
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attacks import AttackSpec, Provenance, apply_compound, intensity
from .backbones import BackboneConfig, train_classifier
from .embed_store import Encoder, HashingEncoder, HttpEmbeddingEncoder, SentenceTransformerEncoder, build_store, tokenize
from .enrichment import EnrichmentConfig, enrich, unify_features
from .llm_gateway import GatewayConfig, LLMGateway, MockLLM
from .r2cl import R2clConfig, R2clResult, train as train_r2cl
from .seeding import derive_seed
from .sggm import SggmConfig, generate_batch
from .synthetic import make_synthetic_tag
from .tag_graph import MAX_TRAIN_FRACTION, TextAttributedGraph, load_graph, split_masks

logger = logging.getLogger(__name__)

METHODS = ("vanilla", "rograd")
RESULT_FIELDS = (
    "method", "backbone", "nra", "sha", "fda", "labeled_ratio", "intensity", "seed", "test_acc", "runtime_s", "status",
)
CURVE_FIELDS = ("intensity", "mean_acc", "n_cells")
GRID_RATIOS = (0.0, 0.5, 0.9)
GRID_LABELED = (0.6, 0.4, 0.2)


# configuration


@dataclass(frozen=True)
class GridSpec:
    """One experiment: a dataset, an attack grid and the method pipelines to run on it.

    ``dataset`` is a manifest path or ``"synthetic"`` (see ``synthetic``
    for generator arguments). ``encoder`` is ``hashing[:dim]``,
    ``st:<model>`` or ``http:<endpoint>|<model>|<dim>``; ``llm`` is
    ``mock`` or ``http`` (endpoint from the environment).
    """

    dataset: str = "synthetic"
    synthetic: Mapping = field(default_factory=dict)
    nra: tuple[float, ...] = GRID_RATIOS
    sha: tuple[float, ...] = GRID_RATIOS
    fda: tuple[float, ...] = GRID_RATIOS
    labeled: tuple[float, ...] = GRID_LABELED
    seeds: int = 1
    seed: int = 0
    methods: tuple[str, ...] = ("vanilla",)
    backbone: BackboneConfig = BackboneConfig()
    sggm: SggmConfig = SggmConfig()
    samples_per_class: int = 10
    tau: float = 0.7
    r2cl: R2clConfig = R2clConfig()
    encoder: str = "hashing:256"
    llm: str = "mock"
    workers: int = 1

    def __post_init__(self) -> None:
        for name in ("nra", "sha", "fda", "labeled", "methods"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be >= 0")

    def cells(self) -> list[tuple[str, float, float, float, float, int]]:
        return [
            (m, a, b, c, lr, rep)
            for m in self.methods
            for a, b, c, lr in itertools.product(self.nra, self.sha, self.fda, self.labeled)
            for rep in range(self.seeds)
        ]

    def cell_seed(self, nra: float, sha: float, fda: float, labeled: float, rep: int) -> int:
        # method is left out so paired methods see identical attacked graphs
        return derive_seed(self.seed, "cell", nra, sha, fda, labeled, rep) % (1 << 63)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "GridSpec":
        data = dict(data)
        nested = {"backbone": BackboneConfig, "sggm": SggmConfig, "r2cl": R2clConfig}
        for key, kind in nested.items():
            if isinstance(data.get(key), Mapping):
                data[key] = kind(**data[key])
        for key in ("nra", "sha", "fda", "labeled", "methods"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_encoder(spec: str) -> Encoder:
    kind, _, arg = spec.partition(":")
    if kind == "hashing":
        return HashingEncoder(dim=int(arg or 256))
    if kind == "st":
        return SentenceTransformerEncoder(arg or "sentence-transformers/all-MiniLM-L6-v2")
    if kind == "http":
        endpoint, model, dim = arg.split("|")
        return HttpEmbeddingEncoder(endpoint, model, int(dim), os.environ.get("ROGRAD_EMBED_TOKEN"))
    raise ValueError(f"unknown encoder spec {spec!r}")


def vocab_from_graph(graph: TextAttributedGraph, top: int = 40) -> dict[str, list[str]]:
    """Most class-specific training tokens per class, for driving the mock LLM on real data."""
    counts = [Counter() for _ in range(graph.num_classes)]
    for i in np.flatnonzero(graph.train_mask):
        counts[graph.labels[i]].update(set(tokenize(graph.texts[i])))
    total = sum(counts, Counter())
    names = graph.class_names or tuple(f"class_{k}" for k in range(graph.num_classes))
    vocab = {}
    for k, cnt in enumerate(counts):
        ranked = sorted(cnt, key=lambda w: (-(cnt[w] / total[w]) * math.log1p(cnt[w]), w))
        vocab[names[k]] = ranked[:top] or [f"topic{k}"]
    return vocab


@dataclass
class Resources:
    """Dataset, encoder and mock vocabulary shared by every cell of a grid."""

    graph: TextAttributedGraph
    encoder: Encoder
    vocab: dict[str, list[str]]

    @classmethod
    def load(cls, grid: GridSpec) -> "Resources":
        encoder = make_encoder(grid.encoder)
        if grid.dataset == "synthetic":
            tag = make_synthetic_tag(seed=grid.seed, encoder=encoder, **dict(grid.synthetic))
            return cls(tag.graph, encoder, tag.vocab)
        graph = load_graph(grid.dataset)
        if not graph.train_mask.any():
            graph = graph.with_masks(split_masks(graph, MAX_TRAIN_FRACTION, grid.seed))
        return cls(graph, encoder, vocab_from_graph(graph))


def make_gateway(grid: GridSpec, vocab: Mapping[str, Sequence[str]], seed: int) -> LLMGateway:
    if grid.llm == "mock":
        return LLMGateway(MockLLM(vocab, seed=seed))
    if grid.llm == "http":
        return LLMGateway.from_config(GatewayConfig.from_env())
    raise ValueError(f"unknown llm {grid.llm!r}")


# cells


@dataclass
class ResultRow:
    method: str
    backbone: str
    nra: float
    sha: float
    fda: float
    labeled_ratio: float
    intensity: float
    seed: int
    test_acc: float
    runtime_s: float
    status: str = "ok"
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in RESULT_FIELDS}
        row["intensity"] = f"{self.intensity:.2f}"
        row["test_acc"] = "" if math.isnan(self.test_acc) else f"{self.test_acc:.4f}"
        row["runtime_s"] = f"{self.runtime_s:.3f}"
        return row

    @classmethod
    def from_csv(cls, row: Mapping[str, str]) -> "ResultRow":
        return cls(
            row["method"], row["backbone"], float(row["nra"]), float(row["sha"]), float(row["fda"]),
            float(row["labeled_ratio"]), float(row["intensity"]), int(row["seed"]),
            float(row["test_acc"]) if row["test_acc"] else float("nan"), float(row["runtime_s"]), row["status"],
        )

    def key(self) -> tuple:
        return (self.method, self.backbone, self.nra, self.sha, self.fda, self.labeled_ratio, self.seed)


def rograd_stages(
    attacked: TextAttributedGraph, grid: GridSpec, resources: Resources, seed: int
) -> tuple[TextAttributedGraph, R2clResult | None]:
    """SGGM and enrichment, then R2CL unless ``grid.r2cl.epochs`` is 0."""
    encoder = resources.encoder
    graph = attacked if attacked.feature_dim == encoder.dim else unify_features(attacked, encoder)
    gateway = make_gateway(grid, resources.vocab, seed)
    samples = []
    if grid.samples_per_class:
        store = build_store(graph, encoder, graph.train_mask)
        present = sorted(set(graph.labels[graph.train_mask].tolist()))
        counts = {k: grid.samples_per_class for k in present}
        samples = generate_batch(counts, store, dict(zip(graph.node_ids, graph.texts)), gateway, encoder,
                                 grid.sggm, seed=derive_seed(seed, "sggm"), class_names=graph.class_names)
    enriched = enrich(graph, samples, EnrichmentConfig(tau=grid.tau, encoder=encoder)).graph
    if grid.r2cl.epochs == 0:
        return enriched, None
    result = train_r2cl(enriched, dataclasses.replace(grid.r2cl, seed=derive_seed(seed, "r2cl") % (1 << 63)),
                        gateway, encoder)
    return enriched, result


def rograd_pipeline(
    attacked: TextAttributedGraph, grid: GridSpec, resources: Resources, seed: int
) -> TextAttributedGraph:
    """SGGM -> enrichment -> R2CL; returns the graph handed to the downstream classifier."""
    enriched, result = rograd_stages(attacked, grid, resources, seed)
    return enriched if result is None else result.downstream_graph()


def run_cell(
    grid: GridSpec,
    nra: float,
    sha: float,
    fda: float,
    labeled_ratio: float,
    seed: int,
    method: str | None = None,
    resources: Resources | None = None,
) -> ResultRow:
    """Attack the dataset, run one method pipeline and score it; failures become error rows."""
    method = method or grid.methods[0]
    spec = AttackSpec(nra, sha, fda, labeled_ratio, seed=seed)
    start = time.perf_counter()
    prov = Provenance()
    try:
        resources = resources or Resources.load(grid)
        attacked = apply_compound(resources.graph, spec)
        prov = attacked.provenance
        graph = attacked.graph
        if method == "rograd":
            graph = rograd_pipeline(graph, grid, resources, seed)
        backbone = dataclasses.replace(grid.backbone, seed=seed)
        _, report = train_classifier(graph, config=backbone)
        acc, status = report.test_acc, "ok"
    except Exception as exc:  # a failed cell is recorded and the grid continues
        logger.exception("cell %s failed", spec)
        acc, status = float("nan"), f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return ResultRow(method, grid.backbone.architecture, nra, sha, fda, labeled_ratio, intensity(spec), seed,
                     acc, time.perf_counter() - start, status, prov)


# curves and metrics


@dataclass(frozen=True)
class CurvePoint:
    intensity: float
    mean_acc: float
    n_cells: int


def aggregate_by_intensity(rows: Iterable[ResultRow]) -> list[CurvePoint]:
    """Mean accuracy per intensity (rounded to 2 decimals), ascending; failed rows are ignored."""
    groups: dict[float, list[float]] = defaultdict(list)
    for r in rows:
        if r.ok and not math.isnan(r.test_acc):
            groups[round(r.intensity, 2)].append(r.test_acc)
    if not groups:
        raise ValueError("no successful rows to aggregate")
    return [CurvePoint(i, float(np.mean(groups[i])), len(groups[i])) for i in sorted(groups)]


@dataclass(frozen=True)
class RobustnessReport:
    clean_acc: float
    worst_acc: float
    avg_acc: float
    norm_auc: float
    label: str = "compound"


def norm_auc(curve: Sequence[CurvePoint]) -> float:
    """Trapezoidal area under accuracy/100 over [0, I_max], divided by I_max."""
    if len(curve) < 2:
        raise ValueError("norm_auc needs at least two curve points")
    x = np.array([p.intensity for p in curve], dtype=np.float64)
    y = np.array([p.mean_acc for p in curve], dtype=np.float64) / 100.0
    if x[0] != 0.0:
        raise ValueError("curve must start at intensity 0")
    # trapezoid weights per point; their sum is I_max
    dx = np.diff(x)
    w = np.concatenate([dx, [0.0]]) / 2.0 + np.concatenate([[0.0], dx]) / 2.0
    # offset by the clean value so a flat curve comes out exact
    return float(y[0] + math.fsum(w * (y - y[0])) / math.fsum(w))


def robustness_metrics(curve: Sequence[CurvePoint], label: str = "compound") -> RobustnessReport:
    curve = sorted(curve, key=lambda p: p.intensity)
    if not curve or curve[0].intensity != 0.0:
        raise ValueError("curve has no clean (intensity 0) point")
    accs = [p.mean_acc for p in curve]
    auc = norm_auc(curve) if len(curve) >= 2 else float("nan")
    return RobustnessReport(accs[0], min(accs), float(np.mean(accs)), auc, label)


ATTACK_AXES = {"nra": "nra", "sha": "sha", "fda": "fda", "ssa": "labeled_ratio"}


def single_attack_reports(rows: Sequence[ResultRow]) -> dict[str, RobustnessReport]:
    """Reports over cells where exactly one attack is active (plus the clean cells), per attack type."""
    out = {}
    for name in ATTACK_AXES:
        subset = [r for r in rows if _active(r) <= {name}]
        if any(_active(r) == {name} for r in subset) and any(not _active(r) for r in subset):
            try:
                out[name] = robustness_metrics(aggregate_by_intensity(subset), label=f"single:{name}")
            except ValueError:
                continue
    return out


def _active(r: ResultRow) -> set[str]:
    active = {k for k in ("nra", "sha", "fda") if getattr(r, k) > 0}
    if r.labeled_ratio < MAX_TRAIN_FRACTION - 1e-12:
        active.add("ssa")
    return active


@dataclass(frozen=True)
class RepresentationQualityReport:
    intra_variance: np.ndarray  # per class
    inter_margin: np.ndarray  # class x class centroid distances
    classes: tuple[int, ...]

    @property
    def mean_intra(self) -> float:
        return float(self.intra_variance.mean())

    @property
    def min_inter(self) -> float:
        k = len(self.classes)
        if k < 2:
            return float("nan")
        return float(self.inter_margin[~np.eye(k, dtype=bool)].min())


def representation_quality(embeddings: np.ndarray, labels: np.ndarray) -> RepresentationQualityReport:
    """Per-class mean squared distance to the centroid and pairwise centroid distances."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if len(z) != len(y):
        raise ValueError("embeddings and labels differ in length")
    classes = tuple(sorted(set(y.tolist())))
    if not classes:
        raise ValueError("no classes")
    centroids = np.stack([z[y == c].mean(axis=0) for c in classes])
    intra = np.array([np.mean(np.sum((z[y == c] - centroids[k]) ** 2, axis=1)) for k, c in enumerate(classes)])
    diff = centroids[:, None, :] - centroids[None, :, :]
    margins = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(margins, 0.0)
    return RepresentationQualityReport(intra, margins, classes)


# grid runner


@dataclass
class GridOutcome:
    rows: list[ResultRow]
    curves: dict[str, list[CurvePoint]]
    reports: dict[str, RobustnessReport]

    @property
    def failures(self) -> list[ResultRow]:
        return [r for r in self.rows if not r.ok]


_WORKER: dict = {}


def _init_worker(grid: GridSpec) -> None:
    _WORKER["grid"] = grid
    _WORKER["resources"] = Resources.load(grid)


def _run_one(cell: tuple) -> ResultRow:
    grid = _WORKER["grid"]
    method, a, b, c, lr, rep = cell
    return run_cell(grid, a, b, c, lr, grid.cell_seed(a, b, c, lr, rep), method, _WORKER["resources"])


def read_results(path: str | Path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ResultRow.from_csv(r) for r in csv.DictReader(fh)]


def write_results(path: str | Path, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        writer.writerows(r.csv_row() for r in rows)


def write_curve(path: str | Path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
        writer.writerows((f"{p.intensity:.2f}", f"{p.mean_acc:.4f}", p.n_cells) for p in curve)


def summarize(rows: Sequence[ResultRow]) -> tuple[dict[str, list[CurvePoint]], dict[str, RobustnessReport]]:
    """Compound and single-attack curves/reports per method."""
    curves, reports = {}, {}
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        try:
            curves[method] = aggregate_by_intensity(mine)
            reports[f"{method}/compound"] = robustness_metrics(curves[method])
        except ValueError as exc:
            logger.warning("no compound report for %s: %s", method, exc)
        for name, rep in single_attack_reports(mine).items():
            reports[f"{method}/{rep.label}"] = rep
    return curves, reports


def run_grid(grid: GridSpec, out_dir: str | Path, resume: bool = False) -> GridOutcome:
    """Run every (method, cell, seed); persist results.csv, curve_<method>.csv and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    done: dict[tuple, ResultRow] = {}
    if resume and results_path.exists():
        done = {r.key(): r for r in read_results(results_path) if r.ok}
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2, default=str), encoding="utf-8")

    cells = grid.cells()
    keyed = [((m, grid.backbone.architecture, a, b, c, lr, grid.cell_seed(a, b, c, lr, rep)), (m, a, b, c, lr, rep))
             for m, a, b, c, lr, rep in cells]
    todo = [cell for key, cell in keyed if key not in done]
    logger.info("%d cells, %d already done, %d to run", len(cells), len(cells) - len(todo), len(todo))

    new_rows: list[ResultRow] = []
    # rows are appended as they finish so an interrupted run can resume
    with open(results_path, "a" if done else "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if not done:
            writer.writeheader()
        if grid.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(grid.workers, initializer=_init_worker, initargs=(grid,)) as pool:
                for row in pool.map(_run_one, todo):
                    writer.writerow(row.csv_row())
                    fh.flush()
                    new_rows.append(row)
        else:
            _init_worker(grid)
            for cell in todo:
                row = _run_one(cell)
                writer.writerow(row.csv_row())
                fh.flush()
                new_rows.append(row)

    by_key = {**done, **{r.key(): r for r in new_rows}}
    rows = [by_key[key] for key, _ in keyed if key in by_key]
    write_results(results_path, rows)
    curves, reports = summarize(rows)
    for method, curve in curves.items():
        write_curve(out / f"curve_{method}.csv", curve)
    (out / "report.json").write_text(
        json.dumps({k: asdict(v) for k, v in reports.items()}, indent=2), encoding="utf-8"
    )
    outcome = GridOutcome(rows, curves, reports)
    if outcome.failures:
        logger.error("%d of %d cells failed", len(outcome.failures), len(rows))
    return outcome
