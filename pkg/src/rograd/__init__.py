"""Robustness toolkit for text-attributed graphs: deficiency attacks, retrieval-guided
sample generation, graph enrichment, contrastive training over refined views and
robustness evaluation."""

from .attacks import AttackSpec, AttackedGraph, Provenance, apply_compound, intensity
from .backbones import BackboneConfig, TrainReport, train_classifier
from .embed_store import EmbeddingStore, HashingEncoder, build_store
from .enrichment import EnrichedGraph, EnrichmentConfig, enrich, enrichment_stats
from .harness import GridSpec, aggregate_by_intensity, representation_quality, robustness_metrics, run_cell, run_grid
from .llm_gateway import LLMGateway, MockLLM
from .r2cl import R2clConfig, supcon_loss, train as train_r2cl
from .sggm import SggmConfig, diagnose, generate_batch, generate_sample
from .synthetic import make_synthetic_tag
from .tag_graph import TextAttributedGraph, load_graph, save_graph, split_masks

__version__ = "0.1.0"
