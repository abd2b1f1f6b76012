"""GCN, GAT and GraphSAGE node classifiers written directly on torch tensors.

Message passing uses an explicit edge list (both directions) and
``index_add_``/``scatter_reduce`` so every model can be checked against a
dense-matrix oracle.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .seeding import derive_seed
from .tag_graph import MaskSet

logger = logging.getLogger(__name__)

ARCHITECTURES = ("gcn", "gat", "sage")
DEFAULT_LAYERS = {"gcn": 3, "gat": 2, "sage": 2}


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "gcn"
    hidden: int = 512
    dropout: float = 0.3
    lr: float = 0.01
    weight_decay: float = 0.0
    layers: int | None = None
    heads: int = 8
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.hidden < 1 or self.heads < 1 or self.num_layers < 1:
            raise ValueError("dimensions must be positive")
        if self.architecture == "gat" and self.hidden % self.heads:
            raise ValueError("GAT hidden size must be divisible by the head count")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

    @property
    def num_layers(self) -> int:
        return self.layers if self.layers is not None else DEFAULT_LAYERS[self.architecture]


@dataclass
class TrainReport:
    best_val_acc: float
    test_acc: float
    epochs_run: int
    best_epoch: int
    losses: list[float] = field(default_factory=list)


class GraphLike(Protocol):
    features: np.ndarray
    edges: np.ndarray

    @property
    def num_nodes(self) -> int: ...


@dataclass(frozen=True)
class GraphTensors:
    """Features plus the message-passing operators every architecture needs."""

    x: torch.Tensor
    src: torch.Tensor  # directed edges j -> i, self-loops included
    dst: torch.Tensor
    gcn_weight: torch.Tensor  # D^-1/2 (A+I) D^-1/2 entry per directed edge
    num_nodes: int

    @property
    def neighbor_edges(self) -> tuple[torch.Tensor, torch.Tensor]:
        keep = self.src != self.dst
        return self.src[keep], self.dst[keep]


def _directed(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([e[:, 0], e[:, 1], loops])
    dst = np.concatenate([e[:, 1], e[:, 0], loops])
    # collapse duplicates so repeated input edges do not double-count
    uniq = np.unique(np.stack([dst, src], axis=1), axis=0)
    return uniq[:, 1], uniq[:, 0]


def normalize_adjacency(edges: np.ndarray, n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Sparse ``D^-1/2 (A + I) D^-1/2`` as a coalesced COO tensor."""
    src, dst = _directed(edges, n)
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[src] * deg[dst]) if len(src) else np.zeros(0)
    idx = torch.as_tensor(np.stack([dst, src]), dtype=torch.long)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(vals, dtype=dtype), (n, n), check_invariants=True).coalesce()


def prepare(graph: GraphLike, dtype: torch.dtype = torch.float32) -> GraphTensors:
    n = graph.num_nodes
    src, dst = _directed(graph.edges, n)
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    w = 1.0 / np.sqrt(deg[src] * deg[dst]) if len(src) else np.zeros(0)
    feats = np.asarray(graph.features, dtype=np.float64).reshape(n, -1)
    return GraphTensors(
        x=torch.as_tensor(feats, dtype=dtype),
        src=torch.as_tensor(src, dtype=torch.long),
        dst=torch.as_tensor(dst, dtype=torch.long),
        gcn_weight=torch.as_tensor(w, dtype=dtype),
        num_nodes=n,
    )


def _scatter_sum(values: torch.Tensor, dst: torch.Tensor, n: int) -> torch.Tensor:
    out = values.new_zeros((n,) + values.shape[1:])
    return out.index_add_(0, dst, values)


def segment_softmax(scores: torch.Tensor, dst: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of edge scores grouped by destination node (works per head along dim 1)."""
    idx = dst.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores)
    peak = scores.new_full((n,) + scores.shape[1:], float("-inf"))
    peak = peak.scatter_reduce(0, idx, scores, reduce="amax", include_self=True)
    ex = torch.exp(scores - peak[dst])
    return ex / _scatter_sum(ex, dst, n)[dst]


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim)
        # Glorot weights and zero bias, the usual GCN initialisation
        nn.init.xavier_uniform_(self.lin.weight)
        nn.init.zeros_(self.lin.bias)

    def forward(self, h: torch.Tensor, g: GraphTensors) -> torch.Tensor:
        z = h @ self.lin.weight.T
        msg = z[g.src] * g.gcn_weight.unsqueeze(1)
        return _scatter_sum(msg, g.dst, g.num_nodes) + self.lin.bias


class GATLayer(nn.Module):
    """Additive attention over each node's neighbourhood including itself."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, concat: bool, slope: float = 0.2):
        super().__init__()
        self.heads, self.out_dim, self.concat, self.slope = heads, out_dim, concat, slope
        self.lin = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, out_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, out_dim))
        self.bias = nn.Parameter(torch.zeros(heads * out_dim if concat else out_dim))
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)
        self.last_attention: torch.Tensor | None = None

    def forward(self, h: torch.Tensor, g: GraphTensors) -> torch.Tensor:
        z = self.lin(h).view(-1, self.heads, self.out_dim)
        score = (z * self.att_src).sum(-1)[g.src] + (z * self.att_dst).sum(-1)[g.dst]
        alpha = segment_softmax(F.leaky_relu(score, self.slope), g.dst, g.num_nodes)
        self.last_attention = alpha.detach()
        out = _scatter_sum(z[g.src] * alpha.unsqueeze(-1), g.dst, g.num_nodes)
        out = out.reshape(g.num_nodes, -1) if self.concat else out.mean(dim=1)
        return out + self.bias


class SAGELayer(nn.Module):
    """``W_self h_i + W_nbr mean_j h_j``, i.e. a linear map of the concatenation."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.self_lin = nn.Linear(in_dim, out_dim)
        self.nbr_lin = nn.Linear(in_dim, out_dim, bias=False)

    def forward(self, h: torch.Tensor, g: GraphTensors) -> torch.Tensor:
        src, dst = g.neighbor_edges
        summed = _scatter_sum(h[src], dst, g.num_nodes)
        deg = torch.bincount(dst, minlength=g.num_nodes).clamp(min=1).to(h.dtype)
        return self.self_lin(h) + self.nbr_lin(summed / deg.unsqueeze(1))


class NodeClassifier(nn.Module):
    """Stack of graph layers (ReLU + dropout after each), a linear head and log-softmax."""

    def __init__(self, config: BackboneConfig, in_dim: int, num_classes: int):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        h = config.hidden
        layers: list[nn.Module] = []
        if config.architecture == "gcn":
            dims = [in_dim] + [h] * config.num_layers
            layers = [GCNLayer(a, b) for a, b in zip(dims[:-1], dims[1:])]
        elif config.architecture == "sage":
            dims = [in_dim] + [h] * config.num_layers
            layers = [SAGELayer(a, b) for a, b in zip(dims[:-1], dims[1:])]
        else:
            d = in_dim
            for k in range(config.num_layers):
                last = k == config.num_layers - 1
                heads = 1 if last else config.heads
                layers.append(GATLayer(d, h if last else h // heads, heads, concat=not last))
                d = h
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(h, num_classes)

    def forward(self, g: GraphTensors) -> torch.Tensor:
        if g.x.shape[1] != self.in_dim:
            raise BackboneError(f"feature dimension {g.x.shape[1]} != model input {self.in_dim}")
        h = g.x
        for layer in self.layers:
            h = F.dropout(F.relu(layer(h, g)), self.config.dropout, self.training)
        return F.log_softmax(self.head(h), dim=1)

    def attention(self) -> list[torch.Tensor]:
        """Per GAT layer, the edge attention of the latest forward pass (edges x heads)."""
        return [l.last_attention for l in self.layers if isinstance(l, GATLayer) and l.last_attention is not None]


def build_model(config: BackboneConfig, in_dim: int, num_classes: int) -> NodeClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "backbone", "init"))
        return NodeClassifier(config, in_dim, num_classes)


def forward(model: NodeClassifier, graph: GraphLike | GraphTensors) -> torch.Tensor:
    """Evaluation-mode class log-probabilities."""
    g = graph if isinstance(graph, GraphTensors) else prepare(graph, next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        return model(g)


def accuracy(log_probs: torch.Tensor, labels: torch.Tensor, mask: np.ndarray) -> float:
    idx = torch.as_tensor(np.flatnonzero(mask), dtype=torch.long)
    if not len(idx):
        return float("nan")
    return 100.0 * float((log_probs[idx].argmax(1) == labels[idx]).double().mean())


def train_classifier(
    graph, masks: MaskSet | None = None, config: BackboneConfig = BackboneConfig()
) -> tuple[NodeClassifier, TrainReport]:
    """Full-batch NLL training with early stopping on validation accuracy.

    ``graph`` needs ``features``, ``edges``, ``labels``, ``num_classes`` and
    (unless ``masks`` is given) train/val/test masks.
    """
    masks = masks or MaskSet(graph.train_mask, graph.val_mask, graph.test_mask)
    if not masks.train.any():
        raise BackboneError("train mask is empty")
    labels_np = np.asarray(graph.labels)
    missing = set(range(graph.num_classes)) - set(np.unique(labels_np[masks.train]).tolist())
    if missing:
        logger.warning("classes %s have no training nodes", sorted(missing))

    g = prepare(graph)
    labels = torch.tensor(labels_np, dtype=torch.long)
    train_idx = torch.as_tensor(np.flatnonzero(masks.train), dtype=torch.long)
    model = build_model(config, g.x.shape[1], graph.num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    has_val = bool(masks.val.any())

    val_idx = torch.as_tensor(np.flatnonzero(masks.val if has_val else masks.train), dtype=torch.long)
    # rank checkpoints by (val accuracy, -val loss) so a saturated accuracy still improves
    best_key, best_epoch, best_state, stale = (-1.0, float("-inf")), 0, copy.deepcopy(model.state_dict()), 0
    losses: list[float] = []
    epoch = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "backbone", "dropout"))
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            opt.zero_grad()
            loss = F.nll_loss(model(g)[train_idx], labels[train_idx])
            if not torch.isfinite(loss):
                raise BackboneError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            out = forward(model, g)
            key = (accuracy(out, labels, masks.val) if has_val else 0.0,
                   -float(F.nll_loss(out[val_idx], labels[val_idx])))
            if key > best_key:
                best_key, best_epoch, stale = key, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= config.patience:
                    break
    model.load_state_dict(best_state)
    out = forward(model, g)
    report = TrainReport(
        best_val_acc=accuracy(out, labels, masks.val),
        test_acc=accuracy(out, labels, masks.test),
        epochs_run=epoch,
        best_epoch=best_epoch,
        losses=losses,
    )
    return model, report


def save_checkpoint(model: NodeClassifier, path) -> None:
    torch.save({"config": model.config.__dict__, "in_dim": model.in_dim,
                "num_classes": model.head.out_features, "state": model.state_dict()}, path)


def load_checkpoint(path) -> NodeClassifier:
    blob = torch.load(path, weights_only=False)
    model = NodeClassifier(BackboneConfig(**blob["config"]), blob["in_dim"], blob["num_classes"])
    model.load_state_dict(blob["state"])
    return model
