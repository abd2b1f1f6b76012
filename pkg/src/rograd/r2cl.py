"""Contrastive training over a stochastic view and an LLM-refined view.

Every ``period`` epochs the second view is replaced by a retrieval-refined
graph: sampled anchors get their text rewritten with same- and cross-class
context and their edges to retrieved candidates set by LLM verdicts. The
refined graph accumulates across events. Between events both views are
random edge-drop / feature-mask copies.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import GCNLayer, GraphTensors, prepare
from .embed_store import EmbeddingStore, Encoder, Entry
from .llm_gateway import (
    GatewayError,
    GenerationRequest,
    LLMGateway,
    Verdict,
    parse_edge_verdicts,
    parse_sample,
    render_edge_prompt,
    render_modify_prompt,
)
from .seeding import derive_seed, rng as make_rng
from .tag_graph import TextAttributedGraph

logger = logging.getLogger(__name__)


class R2clError(RuntimeError):
    pass


@dataclass(frozen=True)
class R2clConfig:
    depth: int = 4
    hidden: int = 256
    projection: int = 128
    batch_size: int = 128
    temperature: float = 0.07
    omega: float = 2.0
    epochs: int = 50
    period: int = 5
    n_anchors: int = 15
    same_k: int = 3
    cross_k: int = 7
    edge_drop: float = 0.1
    feature_mask: float = 0.1
    lr: float = 1e-3
    seed: int = 0
    temperature_llm: float = 0.7
    attempts: int = 3

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        for name in ("edge_drop", "feature_mask"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.period < 1 or self.depth < 1 or self.batch_size < 2:
            raise ValueError("period, depth must be >= 1 and batch_size >= 2")
        if min(self.n_anchors, self.same_k, self.cross_k, self.epochs) < 0:
            raise ValueError("counts must be >= 0")

    @property
    def retrieve_k(self) -> int:
        return self.same_k + self.cross_k

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GraphView:
    features: np.ndarray
    edges: np.ndarray
    provenance: str = "stochastic"
    texts: tuple[str, ...] = ()

    @property
    def num_nodes(self) -> int:
        return len(self.features)

    @classmethod
    def of(cls, graph: TextAttributedGraph, provenance: str = "source") -> "GraphView":
        return cls(np.asarray(graph.features, dtype=np.float32), graph.edges.copy(), provenance, graph.texts)


@dataclass(frozen=True)
class NodeRepresentations:
    h: np.ndarray
    z: np.ndarray


def make_stochastic_view(
    graph: TextAttributedGraph | GraphView, edge_drop: float, feature_mask: float, seed: int
) -> GraphView:
    """Drop each edge and zero each feature entry independently."""
    if not (0.0 <= edge_drop < 1.0 and 0.0 <= feature_mask < 1.0):
        raise ValueError("rates must lie in [0, 1)")
    gen = make_rng(seed, "view")
    keep = gen.random(len(graph.edges)) >= edge_drop
    feats = np.asarray(graph.features, dtype=np.float32)
    mask = gen.random(feats.shape) >= feature_mask
    texts = graph.texts if isinstance(graph, GraphView) else tuple(graph.texts)
    return GraphView(feats * mask, graph.edges[keep].copy(), "stochastic", texts)


def select_anchors(graph: TextAttributedGraph, n: int, seed: int) -> list[str]:
    if not 0 <= n <= graph.num_nodes:
        raise ValueError(f"cannot pick {n} anchors from {graph.num_nodes} nodes")
    order = make_rng(seed, "anchors").permutation(graph.num_nodes)[:n]
    return [graph.node_ids[i] for i in order]


def split_neighbors(
    anchor_id: Hashable,
    retrieved: Sequence[Entry],
    labels: Mapping[Hashable, int],
    same_count: int = 3,
    cross_count: int = 7,
) -> tuple[list[Entry], list[Entry]]:
    """Partition retrieved entries by label agreement with the anchor, keeping retrieval order."""
    anchor_label = labels[anchor_id]
    others = [e for e in retrieved if e.id != anchor_id]
    same = [e for e in others if e.label == anchor_label][:same_count]
    cross = [e for e in others if e.label != anchor_label][:cross_count]
    return same, cross


def supcon_terms(
    z: torch.Tensor, labels: torch.Tensor, temperature: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor SupCon terms and the mask of anchors that have at least one positive."""
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = (z @ z.T / temperature).masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    summed = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(1)
    return -summed / n_pos.clamp(min=1), n_pos > 0


def supcon_loss(
    z: torch.Tensor,
    labels: torch.Tensor,
    generated_mask: torch.Tensor | None = None,
    temperature: float = 0.07,
    omega: float = 2.0,
) -> torch.Tensor:
    """Weighted supervised contrastive loss; generated anchors weigh ``omega``.

    Anchors without an in-batch positive are skipped.
    """
    terms, ok = supcon_terms(z, labels, temperature)
    if not ok.any():
        raise R2clError("no anchor in the batch has a positive")
    skipped = int((~ok).sum())
    if skipped:
        logger.debug("supcon: %d anchors without positives skipped", skipped)
    w = torch.ones_like(terms)
    if generated_mask is not None:
        w = torch.where(generated_mask.to(torch.bool), torch.full_like(terms, omega), w)
    return (w * terms)[ok].mean()


class ContrastiveEncoder(nn.Module):
    """GCN encoder f and projection head g with unit-norm output."""

    def __init__(self, in_dim: int, config: R2clConfig):
        super().__init__()
        dims = [in_dim] + [config.hidden] * config.depth
        self.convs = nn.ModuleList(GCNLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.head = nn.Sequential(
            nn.Linear(config.hidden, config.hidden), nn.ReLU(), nn.Linear(config.hidden, config.projection)
        )

    def encode(self, g: GraphTensors) -> torch.Tensor:
        h = g.x
        for k, conv in enumerate(self.convs):
            h = conv(h, g)
            if k < len(self.convs) - 1:
                h = F.relu(h)
        return h

    def forward(self, g: GraphTensors) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encode(g)
        return h, F.normalize(self.head(h), dim=1)


@dataclass
class RagState:
    """Mutable refined graph carried across refinement events."""

    features: np.ndarray
    edges: set[tuple[int, int]]
    texts: list[str]

    @classmethod
    def from_graph(cls, graph: TextAttributedGraph) -> "RagState":
        return cls(np.array(graph.features, dtype=np.float32), {tuple(e) for e in graph.edges.tolist()}, list(graph.texts))

    def view(self) -> GraphView:
        edges = np.array(sorted(self.edges), dtype=np.int64).reshape(-1, 2)
        return GraphView(self.features.copy(), edges, "rag", tuple(self.texts))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def anchor_label(graph: TextAttributedGraph, idx: int, store: EmbeddingStore) -> int:
    """Known label for labelled anchors; nearest store centroid otherwise (no test labels used)."""
    node = graph.node_ids[idx]
    if graph.train_mask[idx]:
        return int(graph.labels[idx])
    if node in store:
        query = store.vector(node)
    else:
        raise R2clError(f"anchor {node} has neither a label nor a stored representation")
    classes = sorted(set(store.labels.tolist()))
    sims = [float(np.dot(_unit(store.centroid(c)), query)) for c in classes]
    return classes[int(np.argmax(sims))]


def make_rag_view(
    graph: TextAttributedGraph,
    store: EmbeddingStore,
    gateway: LLMGateway,
    encoder: Encoder,
    config: R2clConfig = R2clConfig(),
    seed: int = 0,
    state: RagState | None = None,
    query_store: EmbeddingStore | None = None,
) -> GraphView:
    """Rewrite anchor texts and reset anchor-candidate edges from LLM verdicts.

    ``store`` holds the retrievable (labelled) nodes; ``query_store`` holds
    the current representation of every node and defaults to ``store``.
    ``state`` is updated in place when given, which makes refinements
    accumulate across calls.
    """
    state = state or RagState.from_graph(graph)
    query_store = query_store or store
    if config.n_anchors == 0 or not len(store):
        return state.view()
    if encoder.dim != state.features.shape[1]:
        raise R2clError(
            f"encoder dimension {encoder.dim} differs from feature dimension {state.features.shape[1]}; "
            "run enrichment in unified embedding mode first"
        )
    index = graph.index
    labels_of = {i: store.label_of(i) for i in store.ids}
    for a, anchor in enumerate(select_anchors(graph, config.n_anchors, seed)):
        idx = index[anchor]
        if anchor not in query_store:
            logger.warning("anchor %s has no stored representation; skipped", anchor)
            continue
        label = anchor_label(graph, idx, query_store)
        retrieved = (
            store.top_k_any(query_store.vector(anchor), config.retrieve_k, exclude_ids=[anchor])
            if config.retrieve_k else []
        )
        same, cross = split_neighbors(anchor, retrieved, {**labels_of, anchor: label}, config.same_k, config.cross_k)
        category = graph.class_names[label] if graph.class_names else f"class_{label}"
        cands = [index[e.id] for e in retrieved]
        try:
            rewritten = gateway.complete_parsed(
                GenerationRequest(
                    "modify_anchor",
                    render_modify_prompt(state.texts[idx], [state.texts[index[e.id]] for e in same],
                                         [state.texts[index[e.id]] for e in cross], category),
                    temperature=config.temperature_llm, attempts=config.attempts,
                    seed=derive_seed(seed, "rag", a, "modify"),
                ),
                parse_sample,
            )
            verdicts: tuple[Verdict, ...] = ()
            if cands:
                prompt = render_edge_prompt(rewritten.main_text, [state.texts[c] for c in cands], category)
                verdicts = gateway.complete_parsed(
                    GenerationRequest("edge_analysis", prompt, temperature=config.temperature_llm,
                                      attempts=config.attempts, seed=derive_seed(seed, "rag", a, "edges")),
                    lambda raw, n=len(cands): parse_edge_verdicts(raw, n),
                ).verdicts
        except GatewayError as exc:
            logger.warning("anchor %s left unmodified: %s", anchor, exc)
            continue

        vec = np.asarray(encoder.encode([rewritten.main_text]), dtype=np.float64).reshape(-1)
        if np.any(vec):
            state.features[idx] = _unit(vec).astype(np.float32)
        state.texts[idx] = rewritten.main_text
        for c, verdict in zip(cands, verdicts):
            edge = (min(idx, c), max(idx, c))
            if verdict is Verdict.CONNECT:
                state.edges.add(edge)
            else:
                state.edges.discard(edge)
    return state.view()


@dataclass
class R2clResult:
    representations: NodeRepresentations
    rag_graph: TextAttributedGraph
    log: list[dict] = field(default_factory=list)
    model: ContrastiveEncoder | None = None

    @property
    def refinement_events(self) -> int:
        return sum(1 for row in self.log if row["refined"])

    def downstream_graph(self) -> TextAttributedGraph:
        """Refined graph with the learned representations as node features."""
        return self.rag_graph.replace(features=self.representations.h.astype(np.float32))


def _embed(model: ContrastiveEncoder, g: GraphTensors) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    with torch.no_grad():
        h, z = model(g)
    return h.double().numpy(), z.double().numpy()


def _labelled_store(graph: TextAttributedGraph, h: np.ndarray) -> tuple[EmbeddingStore, EmbeddingStore]:
    """Current representations of every node, and the subset that carries training labels."""
    full = EmbeddingStore(h.shape[1])
    ok = np.linalg.norm(h, axis=1) > 0
    kinds = np.where(graph.generated, "generated", "original")
    for kind in ("original", "generated"):
        rows = np.flatnonzero(ok & (kinds == kind))
        full.add([graph.node_ids[r] for r in rows], graph.labels[rows], h[rows], kind=kind)
    labelled = full.restrict(graph.node_ids[r] for r in np.flatnonzero(graph.train_mask & ok))
    return full, labelled


def train(
    graph: TextAttributedGraph,
    config: R2clConfig = R2clConfig(),
    gateway: LLMGateway | None = None,
    encoder: Encoder | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> R2clResult:
    """Train the contrastive encoder on ``graph`` (typically the enriched graph).

    Mini-batches are drawn from train-masked nodes only, since the loss
    needs labels. Without a gateway the refinement events are skipped and
    view 2 stays stochastic.
    """
    train_idx = np.flatnonzero(graph.train_mask)
    if config.epochs and len(train_idx) < 2:
        raise R2clError("need at least two labelled nodes")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "r2cl", "init") % (1 << 63))
        model = ContrastiveEncoder(graph.feature_dim, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    base = prepare(graph)
    labels = torch.tensor(graph.labels, dtype=torch.long)
    generated = torch.tensor(graph.generated)
    state = RagState.from_graph(graph)
    batch_rng = make_rng(config.seed, "r2cl", "batches")
    log: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        v1 = prepare(make_stochastic_view(graph, config.edge_drop, config.feature_mask,
                                          derive_seed(config.seed, "view1", epoch)))
        refined = epoch % config.period == 0 and gateway is not None and encoder is not None
        if refined:
            h, _ = _embed(model, base)
            full, labelled = _labelled_store(graph, h)
            rag = make_rag_view(graph, labelled, gateway, encoder, config,
                                seed=derive_seed(config.seed, "rag", epoch), state=state, query_store=full)
            v2 = prepare(rag)
        else:
            v2 = prepare(make_stochastic_view(graph, config.edge_drop, config.feature_mask,
                                              derive_seed(config.seed, "view2", epoch)))
        model.train()
        order = batch_rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = torch.as_tensor(order[start : start + config.batch_size], dtype=torch.long)
            if len(batch) < 2:
                continue
            _, z1 = model(v1)
            _, z2 = model(v2)
            z = torch.cat([z1[batch], z2[batch]])
            y = torch.cat([labels[batch], labels[batch]])
            gm = torch.cat([generated[batch], generated[batch]])
            try:
                loss = supcon_loss(z, y, gm, config.temperature, config.omega)
            except R2clError:
                continue
            if not torch.isfinite(loss):
                raise R2clError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "refined": refined})

    h, z = _embed(model, base)
    rag_view = state.view()
    rag_graph = graph.replace(features=rag_view.features, edges=rag_view.edges, texts=rag_view.texts)
    result = R2clResult(NodeRepresentations(h, z), rag_graph, log, model)
    if log_path:
        write_log(log_path, log)
    if checkpoint_path:
        save_checkpoint(model, config, checkpoint_path)
    return result


def write_log(path: str | Path, log: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "refined"])
        writer.writeheader()
        writer.writerows(log)


def save_checkpoint(model: ContrastiveEncoder, config: R2clConfig, path: str | Path) -> None:
    torch.save({"config": asdict(config), "fingerprint": config.fingerprint(),
                "in_dim": model.convs[0].lin.in_features, "state": model.state_dict()}, path)


def load_checkpoint(path: str | Path, config: R2clConfig | None = None) -> ContrastiveEncoder:
    blob = torch.load(path, weights_only=False)
    stored = R2clConfig(**blob["config"])
    if config is not None and config.fingerprint() != blob["fingerprint"]:
        raise R2clError("checkpoint was trained with a different configuration")
    model = ContrastiveEncoder(blob["in_dim"], stored)
    model.load_state_dict(blob["state"])
    return model
