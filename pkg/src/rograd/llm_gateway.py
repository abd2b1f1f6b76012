"""Prompt templates, LLM transport with retries, reply parsers and a deterministic mock.

Everything that talks to a language model goes through :class:`LLMGateway`.
Backends are plain callables ``request -> str``; :class:`HttpChatBackend`
speaks the common chat-completion JSON shape and :class:`MockLLM` produces
format-compliant synthetic papers offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence, TypeVar

import numpy as np

from .embed_store import tokenize

logger = logging.getLogger(__name__)

T = TypeVar("T")

TEMPLATES = ("initial", "refine", "modify_anchor", "edge_analysis")


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """The backend could not produce a reply (network, HTTP status, bad JSON)."""


class BudgetExhausted(GatewayError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    template: str
    prompt: str
    temperature: float = 0.7
    max_tokens: int = 1024
    attempts: int = 3
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if not self.prompt.strip():
            raise ValueError("prompt is empty")
        if self.attempts < 1:
            raise ValueError("attempt budget must be >= 1")


@dataclass(frozen=True)
class ParsedSample:
    title: str
    abstract: str
    keywords: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.title.strip() or not self.abstract.strip():
            raise ParseError("title and abstract must be non-empty")
        if not self.keywords:
            raise ParseError("keywords must be non-empty")
        object.__setattr__(self, "keywords", tuple(self.keywords))

    @property
    def main_text(self) -> str:
        """Text used as the node document and for the main embedding."""
        return f"{self.title}. {self.abstract}"

    @property
    def keyword_text(self) -> str:
        return ", ".join(self.keywords)

    def render(self) -> str:
        return f"Title: {self.title}  Abstract: {self.abstract}  Keywords: {self.keyword_text}"

    @classmethod
    def from_text(cls, text: str, keywords: Sequence[str] = ("none",)) -> "ParsedSample":
        """Split a ``"Title. Abstract"`` document back into fields (inverse of ``main_text``)."""
        title, sep, abstract = text.partition(". ")
        if not sep:
            title, abstract = text, text
        return cls(title, abstract, tuple(keywords))


class Verdict(str, Enum):
    CONNECT = "CONNECT"
    REMOVE = "REMOVE"


@dataclass(frozen=True)
class EdgeVerdicts:
    verdicts: tuple[Verdict, ...]

    def __len__(self) -> int:
        return len(self.verdicts)

    def __iter__(self):
        return iter(self.verdicts)

    def __getitem__(self, i: int) -> Verdict:
        return self.verdicts[i]


# --- prompts ---------------------------------------------------------------------


def _one_line(text: str) -> str:
    return " ".join(text.split())


def _paper_block(texts: Sequence[str], label: str = "Paper") -> str:
    return "\n".join(f"[{label} {i}] {_one_line(t)}" for i, t in enumerate(texts, 1))


FORMAT_RULES = (
    "Format constraints: plain text only. Each of Title, Abstract, Keywords on a single line; "
    'exact prefixes "Title:", "Abstract:", "Keywords:" with two spaces before "Abstract:" and "Keywords:".'
)


def render_initial_prompt(category_name: str, exemplar_texts: Sequence[str], domain: str = "research paper") -> str:
    """Prompt for a first draft in ``category_name`` grounded on retrieved exemplars."""
    cat = f"[{category_name}]"
    lines = [f"Please generate a {domain} in the category {cat}, including a title, an abstract, and keywords."]
    if exemplar_texts:
        lines += [
            "Step 1: Analyze the example papers below to identify:",
            f"- common terms and methodologies specific to {cat};",
            f"- typical research problems in {cat};",
            f"- distinctive approaches separating {cat} from other categories.",
            "Example papers:",
            _paper_block(exemplar_texts, "Example"),
            "Step 2: Generate a paper that",
            "- uses EXACT terms (15-20) from the example papers;",
        ]
    else:
        lines += ["Generate a paper that", "- uses 15-20 terms characteristic of the category;"]
    lines += [
        f"- addresses a typical research problem in {cat};",
        f"- employs characteristic methodologies of {cat};",
        "- avoids approaches typical of other categories.",
        "Keywords: 15-20 terms grouped as methodologies (5-7), approaches (5-7), indicators (3-4), study types (2-3).",
        f"Screening: outputs are checked for similarity with {cat} papers; insufficient alignment will be rejected.",
        FORMAT_RULES,
    ]
    return "\n".join(lines)


def render_refine_prompt(
    draft: ParsedSample, feedback_text: str, exemplar_texts: Sequence[str], category_name: str = ""
) -> str:
    if not feedback_text.strip():
        raise ValueError("feedback_text must be non-empty")
    cat = f"[{category_name}]" if category_name else "its category"
    lines = [
        f"You have generated: {draft.render()}",
        f"Similarity analysis: {_one_line(feedback_text)}",
        f"Task: Revise the paper to align more closely with the category {cat} while maintaining originality:",
        "- retain Title-Abstract-Keywords format;",
        "- use the examples of similar papers as guidance;",
        '- extract 15-20 key terms from the revised abstract and place them immediately after the abstract '
        '(two spaces before "Keywords:").',
    ]
    if exemplar_texts:
        lines += ["Similar papers:", _paper_block(exemplar_texts, "Example")]
    lines.append(FORMAT_RULES)
    return "\n".join(lines)


def render_modify_prompt(
    anchor_text: str, same_class_texts: Sequence[str], cross_class_texts: Sequence[str], category_name: str
) -> str:
    lines = [f"Anchor paper (Category: {category_name}): {_one_line(anchor_text)}"]
    if same_class_texts:
        lines += ["Similar papers (same category):", _paper_block(same_class_texts, "Same")]
    if cross_class_texts:
        lines += ["Similar papers (other categories):", _paper_block(cross_class_texts, "Other")]
    lines += [
        "Task: Modify the anchor paper so that:",
        "- it clearly remains in its category;",
        "- it is more distinctive from similar papers;",
        "- key concepts and methodologies are preserved, but the research focus or terminology is varied;",
        "- output format: Title-Abstract-Keywords only, no explanations.",
        FORMAT_RULES,
    ]
    return "\n".join(lines)


def render_edge_prompt(anchor_text: str, candidate_texts: Sequence[str], category_name: str = "") -> str:
    if not candidate_texts:
        raise ValueError("at least one candidate is required")
    head = f"Anchor paper (Category: {category_name}): " if category_name else "Anchor paper: "
    listing = "\n".join(f"Paper {i}: {_one_line(t)}" for i, t in enumerate(candidate_texts, 1))
    return "\n".join([
        head + _one_line(anchor_text),
        "Candidate papers:",
        listing,
        "Task: Decide which candidates should connect to the anchor based on:",
        "- methodology similarity;",
        "- shared research domains or targets;",
        "- conceptual relationships.",
        "Edge rules:",
        "- connect same-category papers with strong methodological proximity;",
        "- connect across categories only with strong overlap;",
        "- be selective.",
        "Output format: Paper 1: CONNECT/REMOVE; Paper 2: CONNECT/REMOVE; ...",
    ])


# --- parsers ---------------------------------------------------------------------

_FIELDS = ("Title:", "Abstract:", "Keywords:")


def parse_sample(raw: str) -> ParsedSample:
    """Extract Title/Abstract/Keywords; keywords split on ``,``/``;`` and deduplicated case-insensitively."""
    positions = {}
    for prefix in _FIELDS:
        pos = raw.find(prefix)
        if pos < 0:
            raise ParseError(f"missing field {prefix[:-1]!r}")
        positions[prefix] = pos
    t, a, k = (positions[p] for p in _FIELDS)
    if not t < a < k:
        raise ParseError("fields out of order; expected Title, Abstract, Keywords")
    title = _one_line(raw[t + len("Title:") : a])
    abstract = _one_line(raw[a + len("Abstract:") : k])
    kw_raw = raw[k + len("Keywords:") :].strip().splitlines()
    kw_line = kw_raw[0] if kw_raw else ""
    if not title:
        raise ParseError("empty field 'Title'")
    if not abstract:
        raise ParseError("empty field 'Abstract'")
    seen: set[str] = set()
    keywords = []
    for part in re.split(r"[;,]", kw_line):
        word = part.strip().rstrip(".")
        if word and word.lower() not in seen:
            seen.add(word.lower())
            keywords.append(word)
    if not keywords:
        raise ParseError("empty field 'Keywords'")
    return ParsedSample(title, abstract, tuple(keywords))


_VERDICT = re.compile(r"Paper\s+(\d+)\s*:\s*([A-Za-z]+)", re.IGNORECASE)


def parse_edge_verdicts(raw: str, n_candidates: int) -> EdgeVerdicts:
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    found = _VERDICT.findall(raw)
    if len(found) != n_candidates:
        raise ParseError(f"expected {n_candidates} verdicts, found {len(found)}")
    verdicts = []
    for expect, (num, token) in enumerate(found, 1):
        if int(num) != expect:
            raise ParseError(f"verdict for Paper {num} out of order (expected Paper {expect})")
        try:
            verdicts.append(Verdict(token.upper()))
        except ValueError:
            raise ParseError(f"unknown verdict token {token!r}") from None
    return EdgeVerdicts(tuple(verdicts))


# --- transport -------------------------------------------------------------------

Backend = Callable[[GenerationRequest], str]


@dataclass
class GatewayConfig:
    endpoint: str = ""
    model: str = ""
    token_env: str = "ROGRAD_LLM_TOKEN"
    timeout: float = 60.0
    attempts: int = 3
    max_in_flight: int = 4
    audit_path: str | None = None

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ) -> "GatewayConfig":
        return cls(
            endpoint=environ.get("ROGRAD_LLM_ENDPOINT", ""),
            model=environ.get("ROGRAD_LLM_MODEL", ""),
            token_env=environ.get("ROGRAD_LLM_TOKEN_ENV", "ROGRAD_LLM_TOKEN"),
            timeout=float(environ.get("ROGRAD_LLM_TIMEOUT", 60.0)),
            attempts=int(environ.get("ROGRAD_LLM_ATTEMPTS", 3)),
            max_in_flight=int(environ.get("ROGRAD_LLM_MAX_IN_FLIGHT", 4)),
            audit_path=environ.get("ROGRAD_LLM_AUDIT") or None,
        )


class HttpChatBackend:
    """POST ``{model, messages, temperature, max_tokens}``; read ``choices[0].message.content``."""

    def __init__(self, endpoint: str, model: str, token: str | None = None, timeout: float = 60.0):
        if not endpoint:
            raise GatewayError("no LLM endpoint configured")
        self.endpoint = endpoint
        self.model = model
        self.token = token
        self.timeout = timeout

    @classmethod
    def from_config(cls, cfg: GatewayConfig) -> "HttpChatBackend":
        return cls(cfg.endpoint, cfg.model, os.environ.get(cfg.token_env), cfg.timeout)

    def __call__(self, request: GenerationRequest) -> str:
        import httpx

        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed % (1 << 31)
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            resp = httpx.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except httpx.HTTPError as exc:
            raise TransportError(f"endpoint unreachable or failed: {exc}") from exc
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed transport reply: {exc}") from exc


class LLMGateway:
    """Retrying front door to a backend, with an in-flight cap and optional JSONL audit log."""

    def __init__(self, backend: Backend, max_in_flight: int = 4, audit_path: str | Path | None = None):
        self.backend = backend
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._audit_lock = threading.Lock()
        self.audit_path = Path(audit_path) if audit_path else None
        self.calls = 0
        self.retries = 0

    @classmethod
    def from_config(cls, cfg: GatewayConfig) -> "LLMGateway":
        return cls(HttpChatBackend.from_config(cfg), cfg.max_in_flight, cfg.audit_path)

    def _audit(self, request: GenerationRequest, reply: str | None, error: str | None, attempt: int) -> None:
        if self.audit_path is None:
            return
        record = {
            "time": time.time(),
            "template": request.template,
            "attempt": attempt,
            "prompt": request.prompt,
            "reply": reply,
            "error": error,
            "prompt_chars": len(request.prompt),
            "reply_chars": len(reply or ""),
        }
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

    def complete(self, request: GenerationRequest) -> str:
        return self.complete_parsed(request, lambda raw: raw)

    def complete_parsed(self, request: GenerationRequest, parser: Callable[[str], T]) -> T:
        """Call the backend until ``parser`` accepts a reply or the attempt budget runs out."""
        last: Exception | None = None
        for attempt in range(1, request.attempts + 1):
            if attempt > 1:
                self.retries += 1
                logger.info("retrying %s request (attempt %d/%d): %s", request.template, attempt, request.attempts, last)
            with self._slots:
                self.calls += 1
                try:
                    raw = self.backend(request)
                except TransportError as exc:
                    self._audit(request, None, str(exc), attempt)
                    last = exc
                    continue
            self._audit(request, raw, None, attempt)
            try:
                return parser(raw)
            except ParseError as exc:
                last = exc
        raise BudgetExhausted(f"budget exhausted after {request.attempts} attempts: {last}")


class ScriptedBackend:
    """Replays a fixed list of replies; ``Exception`` items are raised instead of returned."""

    def __init__(self, script: Sequence[str | Exception]):
        self.script = list(script)
        self.calls = 0

    def __call__(self, request: GenerationRequest) -> str:
        item = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        if isinstance(item, Exception):
            raise item
        return item


# --- deterministic mock ---------------------------------------------------------------


@dataclass
class MockLLM:
    """Offline stand-in for the generator LLM.

    Papers are assembled from per-category word pools, seeded by a digest of
    ``(seed, template, prompt)`` so identical requests give identical text.

    Modes for generation prompts:
      ``compliant``     class words plus fresh filler tokens; lands inside the
                        diagnostic thresholds for pools built by
                        :func:`rograd.synthetic.make_synthetic_tag`.
      ``off_category``  words from another category's pool (never aligned).
      ``copy``          repeats the first exemplar (redundant).
      ``malformed``     drops the ``Keywords:`` field.
    ``modify_mode`` is ``rewrite`` (steer anchor toward its category) or ``echo``.
    ``edge_policy`` is ``overlap`` (token Jaccard >= ``edge_threshold``),
    ``connect`` or ``remove``.
    """

    vocab: Mapping[str, Sequence[str]]
    seed: int = 0
    mode: str = "compliant"
    class_words: int = 12
    novel_words: int = 7
    keyword_count: int = 12
    keyword_novel: int = 5
    modify_mode: str = "rewrite"
    modify_class_words: int = 6
    edge_policy: str = "overlap"
    edge_threshold: float = 0.2
    calls: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        self.vocab = {k: list(v) for k, v in self.vocab.items()}
        self._owner = {}
        for cat, words in self.vocab.items():
            for w in words:
                self._owner.setdefault(w, cat)

    def _rng(self, request: GenerationRequest) -> np.random.Generator:
        digest = hashlib.blake2b(
            f"{self.seed}\x00{request.seed}\x00{request.template}\x00{request.prompt}".encode("utf-8"), digest_size=16
        ).digest()
        return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))

    def __call__(self, request: GenerationRequest) -> str:
        self.calls += 1
        rng = self._rng(request)
        if request.template in ("initial", "refine"):
            return self._generate(request.prompt, rng)
        if request.template == "modify_anchor":
            return self._modify(request.prompt, rng)
        return self._edges(request.prompt)

    # helpers

    def _category(self, prompt: str) -> str:
        m = re.search(r"in the category \[(.*)\], including", prompt) or re.search(
            r"with the category \[(.*)\] while", prompt
        ) or re.search(r"Anchor paper \(Category: (.*?)\): ", prompt)
        if not m:
            raise TransportError("mock could not find a category in the prompt")
        return m.group(1)

    def _pool(self, category: str) -> list[str]:
        if category in self.vocab:
            return self.vocab[category]
        return sorted({w for words in self.vocab.values() for w in words})

    def _novel(self, rng: np.random.Generator, n: int) -> list[str]:
        return ["x" + format(int(v), "07x") for v in rng.integers(0, 1 << 28, size=n)]

    def _paper(self, words: list[str], keywords: list[str]) -> str:
        cut = max(3, len(words) // 5)
        title = " ".join(words[:cut]).capitalize()
        abstract = " ".join(words[cut:]) or title
        return f"Title: {title}  Abstract: {abstract}  Keywords: {', '.join(keywords)}"

    def _generate(self, prompt: str, rng: np.random.Generator) -> str:
        category = self._category(prompt)
        if self.mode == "copy":
            m = re.search(r"^\[Example 1\] (.*)$", prompt, re.MULTILINE)
            text = m.group(1) if m else category
            words = tokenize(text)
            return self._paper(words, words[: self.keyword_count])
        if self.mode == "off_category":
            others = [c for c in self.vocab if c != category]
            pool = self._pool(others[int(rng.integers(len(others)))]) if others else self._novel(rng, 40)
        else:
            pool = self._pool(category)
        n_class, n_fresh = self.class_words, self.novel_words
        if self.mode == "compliant":
            # act on revision feedback the way an instruction-following model would
            if "Class alignment" in prompt:
                n_class, n_fresh = n_class + 6, max(2, n_fresh // 2)
            if "Duplication" in prompt or "Redundancy" in prompt:
                n_fresh += 8
        n_class = min(n_class, len(pool))
        chosen = [pool[i] for i in rng.choice(len(pool), size=n_class, replace=False)]
        words = chosen + self._novel(rng, n_fresh)
        rng.shuffle(words)
        chosen_set = set(chosen)
        novel = [w for w in words if w not in chosen_set]
        n_nov = min(self.keyword_novel, len(novel), self.keyword_count)
        n_kw = min(self.keyword_count - n_nov, n_class)
        keywords = [chosen[i] for i in rng.choice(n_class, size=n_kw, replace=False)] + novel[:n_nov]
        if self.mode == "malformed":
            cut = max(3, len(words) // 5)
            return f"Title: {' '.join(words[:cut])}  Abstract: {' '.join(words[cut:])}"
        return self._paper(words, keywords)

    def _modify(self, prompt: str, rng: np.random.Generator) -> str:
        m = re.search(r"Anchor paper \(Category: (.*?)\): (.*)$", prompt, re.MULTILINE)
        if not m:
            raise TransportError("mock could not find the anchor paper")
        category, anchor = m.group(1), m.group(2)
        if self.modify_mode == "echo":
            sample = ParsedSample.from_text(anchor, tokenize(anchor)[:5] or ["none"])
            return sample.render()
        pool = self._pool(category)
        own = set(pool)
        other_ctx = set()
        for line in re.findall(r"^\[Other \d+\] (.*)$", prompt, re.MULTILINE):
            other_ctx.update(tokenize(line))
        kept = [w for w in tokenize(anchor) if w in own or w not in other_ctx]
        kept = [w for w in kept if self._owner.get(w, category) == category]
        extra = [pool[i] for i in rng.choice(len(pool), size=min(self.modify_class_words, len(pool)), replace=False)]
        words = kept + extra
        if len(words) < 4:
            words = words + extra
        keywords = list(dict.fromkeys(w for w in words if w in own))[: self.keyword_count] or words[:5]
        return self._paper(words, keywords)

    def _edges(self, prompt: str) -> str:
        anchor_m = re.search(r"^Anchor paper(?: \(Category: .*?\))?: (.*)$", prompt, re.MULTILINE)
        anchor = set(tokenize(anchor_m.group(1))) if anchor_m else set()
        cands = re.findall(r"^Paper (\d+): (.*)$", prompt, re.MULTILINE)
        parts = []
        for num, text in cands:
            if self.edge_policy == "connect":
                verdict = "CONNECT"
            elif self.edge_policy == "remove":
                verdict = "REMOVE"
            else:
                toks = set(tokenize(text))
                union = anchor | toks
                jac = len(anchor & toks) / len(union) if union else 0.0
                verdict = "CONNECT" if jac >= self.edge_threshold else "REMOVE"
            parts.append(f"Paper {num}: {verdict}")
        return "; ".join(parts)

