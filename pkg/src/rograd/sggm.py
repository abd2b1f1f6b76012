"""Semantic-guided generation: retrieve exemplars, draft, diagnose, revise.

Each synthetic sample goes through up to ``max_rounds`` drafts. A draft is
embedded as ``normalize(main + lambda * keywords)`` and scored against the
store with four cosine diagnostics (redundancy, class alignment, off-category
drift, duplication). Violated diagnostics become written feedback for the
next draft.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed_store import EmbeddingError, EmbeddingStore, Encoder
from .llm_gateway import (
    GenerationRequest,
    LLMGateway,
    ParsedSample,
    parse_sample,
    render_initial_prompt,
    render_refine_prompt,
)
from .seeding import derive_seed


@dataclass(frozen=True)
class SggmConfig:
    k: int = 10
    theta_r: float = 0.85
    theta_a: float = 0.6
    theta_o: float = 0.3
    theta_d: float = 0.7
    max_rounds: int = 3
    keyword_weight: float = 2.0
    temperature: float = 0.7
    max_tokens: int = 1024
    attempts: int = 3
    domain: str = "research paper"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.keyword_weight < 0:
            raise ValueError("keyword_weight must be >= 0")
        for name in ("theta_r", "theta_a", "theta_o", "theta_d"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1]")


METRICS = ("redundancy", "alignment", "off_category", "duplication")


@dataclass(frozen=True)
class DiagnosticReport:
    redundancy: float
    alignment: float
    off_category: float
    duplication: float
    thresholds: tuple[float, float, float, float] = (0.85, 0.6, 0.3, 0.7)

    @property
    def flags(self) -> dict[str, bool]:
        tr, ta, to, td = self.thresholds
        return {
            "redundancy": self.redundancy > tr,
            "alignment": self.alignment < ta,
            "off_category": self.off_category > to,
            "duplication": self.duplication > td,
        }

    @property
    def violations(self) -> tuple[str, ...]:
        return tuple(m for m in METRICS if self.flags[m])

    @property
    def clean(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS} | {"violations": list(self.violations)}


def diagnose(
    candidate: np.ndarray,
    store: EmbeddingStore,
    previous_generated: np.ndarray | Sequence[np.ndarray],
    label: int,
    config: SggmConfig = SggmConfig(),
) -> DiagnosticReport:
    """Score a unit-norm draft embedding against the store's original entries."""
    scores = store.scores(candidate)
    original = store.kinds == "original"
    same = original & (store.labels == label)
    if not same.any():
        raise EmbeddingError(f"class {label} absent from store")
    cross = original & (store.labels != label)
    same_scores = scores[same]
    top = np.sort(same_scores)[::-1][: config.k]
    prev = np.asarray(previous_generated, dtype=np.float64)
    if prev.size:
        prev = prev.reshape(-1, store.dim)
        cand = np.asarray(candidate, dtype=np.float64)
        dup = float(np.max(np.sum(prev * (cand / np.linalg.norm(cand)), axis=1)))
    else:
        dup = 0.0
    return DiagnosticReport(
        redundancy=float(same_scores.max()),
        alignment=float(top.mean()),
        off_category=float(scores[cross].max()) if cross.any() else 0.0,
        duplication=dup,
        thresholds=(config.theta_r, config.theta_a, config.theta_o, config.theta_d),
    )


NOVELTY = "introduce novel elements (a different problem setting, method or finding)"
REINFORCE = "reinforce category-specific terms and methodology"
REMOVE_DRIFT = "remove off-category terminology"


def build_feedback(report: DiagnosticReport, config: SggmConfig = SggmConfig()) -> str:
    """Turn violated diagnostics into revision instructions, in the order r, a, o, d."""
    if report.clean:
        raise ValueError("no violated diagnostics to report")
    flags = report.flags
    parts = []
    if flags["redundancy"]:
        parts.append(
            f"Redundancy {report.redundancy:.3f} exceeds {config.theta_r}: the draft nearly repeats an existing "
            f"paper of this category; {NOVELTY}."
        )
    if flags["alignment"]:
        parts.append(f"Class alignment {report.alignment:.3f} is below {config.theta_a}: {REINFORCE}.")
    if flags["off_category"]:
        parts.append(
            f"Off-category drift {report.off_category:.3f} exceeds {config.theta_o}: {REMOVE_DRIFT}."
        )
    if flags["duplication"]:
        parts.append(
            f"Duplication {report.duplication:.3f} exceeds {config.theta_d}: the draft overlaps a previously "
            f"generated paper; {NOVELTY}."
        )
    return " ".join(parts)


def fuse_keyword_embedding(main: np.ndarray, keyword: np.ndarray, weight: float) -> np.ndarray:
    """``normalize(main + weight * keyword)``."""
    main = np.asarray(main, dtype=np.float64)
    if not np.any(main):
        raise EmbeddingError("main embedding is zero")
    fused = main + weight * np.asarray(keyword, dtype=np.float64)
    norm = np.linalg.norm(fused)
    if norm <= 1e-12:
        raise EmbeddingError("fused embedding vanished (antiparallel main and keyword vectors)")
    return fused / norm


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise EmbeddingError("encoder returned a zero vector")
    return v / n


def embed_sample(sample: ParsedSample, encoder: Encoder, weight: float) -> np.ndarray:
    main, kw = np.asarray(encoder.encode([sample.main_text, sample.keyword_text]), dtype=np.float64)
    return fuse_keyword_embedding(_unit(main), _unit(kw), weight)


@dataclass
class GeneratedSample:
    label: int
    sample: ParsedSample
    embedding: np.ndarray
    rounds_used: int
    reports: list[DiagnosticReport]
    clean: bool
    sample_id: str = ""

    def to_record(self, class_names: Sequence[str] | None = None) -> dict:
        return {
            "id": self.sample_id,
            "class": self.label,
            "category": class_names[self.label] if class_names else None,
            "title": self.sample.title,
            "abstract": self.sample.abstract,
            "keywords": list(self.sample.keywords),
            "rounds": self.rounds_used,
            "diagnostics": [r.as_dict() for r in self.reports],
            "clean": self.clean,
            "embedding": self.embedding.tolist(),
        }

    @classmethod
    def from_record(cls, rec: Mapping, config: SggmConfig = SggmConfig()) -> "GeneratedSample":
        thresholds = (config.theta_r, config.theta_a, config.theta_o, config.theta_d)
        reports = [
            DiagnosticReport(*(float(d[m]) for m in METRICS), thresholds=thresholds) for d in rec["diagnostics"]
        ]
        return cls(
            label=int(rec["class"]),
            sample=ParsedSample(rec["title"], rec["abstract"], tuple(rec["keywords"])),
            embedding=np.asarray(rec["embedding"], dtype=np.float64),
            rounds_used=int(rec["rounds"]),
            reports=reports,
            clean=bool(rec["clean"]),
            sample_id=rec.get("id", ""),
        )


@dataclass
class Draft:
    sample: ParsedSample
    embedding: np.ndarray
    report: DiagnosticReport


def generate_sample(
    label: int,
    store: EmbeddingStore,
    texts: Mapping[str, str],
    gateway: LLMGateway,
    encoder: Encoder,
    config: SggmConfig = SggmConfig(),
    previous_generated: Sequence[np.ndarray] = (),
    seed: int = 0,
    category_name: str | None = None,
) -> GeneratedSample:
    """Run the retrieval-diagnosis-revision loop for one sample of class ``label``.

    Round 0 retrieves exemplars against the class centroid; later rounds
    retrieve against the latest draft embedding. Stops at the first clean
    draft, otherwise returns the draft with the fewest violations (latest on
    ties) after ``max_rounds``.
    """
    category = category_name or f"class_{label}"
    query = store.centroid(label)
    drafts: list[Draft] = []
    for rnd in range(config.max_rounds):
        exemplars = [texts[e.id] for e in store.top_k_same_class(query, label, config.k)]
        if not drafts:
            prompt = render_initial_prompt(category, exemplars, domain=config.domain)
            template = "initial"
        else:
            last = drafts[-1]
            prompt = render_refine_prompt(last.sample, build_feedback(last.report, config), exemplars, category)
            template = "refine"
        req = GenerationRequest(
            template=template,
            prompt=prompt,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            attempts=config.attempts,
            seed=derive_seed(seed, "sggm", label, rnd),
        )
        sample = gateway.complete_parsed(req, parse_sample)
        emb = embed_sample(sample, encoder, config.keyword_weight)
        report = diagnose(emb, store, list(previous_generated), label, config)
        drafts.append(Draft(sample, emb, report))
        if report.clean:
            break
        query = emb
    best = min(reversed(range(len(drafts))), key=lambda i: len(drafts[i].report.violations))
    chosen = drafts[best]
    return GeneratedSample(
        label=label,
        sample=chosen.sample,
        embedding=chosen.embedding,
        rounds_used=len(drafts),
        reports=[d.report for d in drafts],
        clean=chosen.report.clean,
    )


def generate_batch(
    counts: Mapping[int, int] | Sequence[int],
    store: EmbeddingStore,
    texts: Mapping[str, str],
    gateway: LLMGateway,
    encoder: Encoder,
    config: SggmConfig = SggmConfig(),
    seed: int = 0,
    class_names: Sequence[str] | None = None,
) -> list[GeneratedSample]:
    """Generate samples class by class; duplication is scored against every earlier sample of the batch."""
    items = counts.items() if isinstance(counts, Mapping) else enumerate(counts)
    out: list[GeneratedSample] = []
    previous: list[np.ndarray] = []
    for label, n in items:
        if n < 0:
            raise ValueError("sample counts must be >= 0")
        for j in range(n):
            gs = generate_sample(
                int(label), store, texts, gateway, encoder, config, previous,
                seed=derive_seed(seed, "batch", int(label), j),
                category_name=class_names[label] if class_names else None,
            )
            gs.sample_id = f"gen-{int(label)}-{j:04d}"
            out.append(gs)
            previous.append(gs.embedding)
    return out


def write_samples(path: str | Path, samples: Iterable[GeneratedSample], class_names: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(class_names)) + "\n")


def read_samples(path: str | Path, config: SggmConfig = SggmConfig()) -> list[GeneratedSample]:
    with open(path, encoding="utf-8") as fh:
        return [GeneratedSample.from_record(json.loads(line), config) for line in fh if line.strip()]
