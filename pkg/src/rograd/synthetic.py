"""Synthetic text-attributed graphs with per-class vocabularies.

Each class owns a pool of topic words; every document mixes words from its
own pool, a few from other pools (controlled by ``purity``) and shared
filler words. Node features are the normalised encoder embeddings of the
documents, optionally perturbed with Gaussian noise. The class pools are
returned so the mock LLM can write papers in the same vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_store import Encoder, HashingEncoder
from .seeding import rng as make_rng
from .tag_graph import TextAttributedGraph, split_masks

CLASS_NAMES = (
    "Neural Networks", "Genetic Algorithms", "Reinforcement Learning", "Probabilistic Methods",
    "Case Based", "Rule Learning", "Theory", "Signal Processing", "Robotics", "Databases",
)


@dataclass(frozen=True)
class SyntheticTAG:
    graph: TextAttributedGraph
    vocab: dict[str, list[str]]
    encoder: Encoder


def make_synthetic_tag(
    n_nodes: int = 200,
    n_classes: int = 2,
    seed: int = 0,
    pool_size: int = 12,
    class_words: int = 24,
    shared_pool_size: int = 200,
    shared_words: int = 4,
    purity: float = 1.0,
    avg_degree: float = 4.0,
    homophily: float = 0.8,
    feature_noise: float = 0.0,
    encoder: Encoder | None = None,
    train_fraction: float | None = 0.6,
    name: str = "synthetic",
) -> SyntheticTAG:
    """Generate a labelled TAG; classes are balanced up to remainder."""
    gen = make_rng(seed, "synthetic")
    encoder = encoder or HashingEncoder(dim=256, seed=0)
    names = [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"Category {k}" for k in range(n_classes)]
    vocab = {names[k]: [f"c{k}t{i:03d}" for i in range(pool_size)] for k in range(n_classes)}
    shared = [f"w{i:03d}" for i in range(shared_pool_size)]

    labels = np.arange(n_nodes) % n_classes
    gen.shuffle(labels)
    texts = []
    for y in labels:
        own = vocab[names[y]]
        words = []
        for _ in range(class_words):
            if n_classes > 1 and gen.random() > purity:
                other = names[(y + 1 + gen.integers(n_classes - 1)) % n_classes]
                words.append(vocab[other][gen.integers(pool_size)])
            else:
                words.append(own[gen.integers(pool_size)])
        words += [shared[i] for i in gen.integers(shared_pool_size, size=shared_words)]
        gen.shuffle(words)
        texts.append(f"{' '.join(words[:5])}. {' '.join(words[5:])}")

    feats = np.asarray(encoder.encode(texts), dtype=np.float64)
    feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    if feature_noise > 0:
        feats = feats + feature_noise * gen.standard_normal(feats.shape) / np.sqrt(feats.shape[1])
        feats /= np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)

    n_edges = int(round(avg_degree * n_nodes / 2))
    same = labels[:, None] == labels[None, :]
    iu = np.triu_indices(n_nodes, k=1)
    pair_same = same[iu]
    n_same = int(round(homophily * n_edges))
    same_idx = np.flatnonzero(pair_same)
    diff_idx = np.flatnonzero(~pair_same)
    pick = np.concatenate([
        gen.choice(same_idx, size=min(n_same, len(same_idx)), replace=False),
        gen.choice(diff_idx, size=min(n_edges - n_same, len(diff_idx)), replace=False),
    ])
    edges = np.stack([iu[0][pick], iu[1][pick]], axis=1)

    graph = TextAttributedGraph.create(
        node_ids=[f"n{i:05d}" for i in range(n_nodes)],
        texts=texts,
        features=feats,
        labels=labels,
        num_classes=n_classes,
        edges=edges,
        class_names=names,
        name=name,
    )
    if train_fraction is not None:
        graph = graph.with_masks(split_masks(graph, train_fraction, seed))
    return SyntheticTAG(graph=graph, vocab=vocab, encoder=encoder)
