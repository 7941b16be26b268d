"""Candidate bookkeeping and prompt plumbing for the code-generation RL loop.

Covers everything that does not need a language model: a score-indexed
candidate store, softmax exemplar sampling, reward shaping, and rendering /
parsing of the prompt and response templates.
"""

from __future__ import annotations

import json
import math
import re
import uuid
import warnings
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ModuleTag",
    "CandidateRecord",
    "CandidateDatabase",
    "EmptyDatabaseError",
    "SamplerConfig",
    "softmax_probabilities",
    "register_candidate",
    "sample_exemplars",
    "smooth_rewards",
    "normalize_group_rewards",
    "PromptBundle",
    "assemble_prompt",
    "ResponseSections",
    "ResponseParseError",
    "render_response",
    "parse_response",
]

WINSOR_PERCENTILES = (5.0, 95.0)


class ModuleTag(str, Enum):
    GRAPH_CONSTRUCTION = "graph_construction"
    SEARCH = "search"
    REFINEMENT = "refinement"


class EmptyDatabaseError(RuntimeError):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class CandidateRecord:
    id: str
    module_tag: ModuleTag
    score: float
    code: str
    created_at: str

    def __post_init__(self):
        object.__setattr__(self, "module_tag", ModuleTag(self.module_tag))
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["module_tag"] = self.module_tag.value
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CandidateRecord":
        doc = json.loads(line)
        return cls(
            id=doc["id"],
            module_tag=doc["module_tag"],
            score=float(doc["score"]),
            code=doc["code"],
            created_at=doc["created_at"],
        )


class CandidateDatabase:
    """Candidate history, optionally mirrored to an append-only JSON-lines file.

    Writes are expected from a single writer; reads may run concurrently with
    each other.
    """

    def __init__(self, path=None, clock: Callable[[], str] = _utc_now):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self._records: list[CandidateRecord] = []
        self._ids: set[str] = set()

    @classmethod
    def load(cls, path, clock: Callable[[], str] = _utc_now) -> "CandidateDatabase":
        db = cls(path, clock)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = CandidateRecord.from_json(line)
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad candidate record ({exc})") from exc
                db._remember(rec)
        return db

    def _remember(self, rec: CandidateRecord) -> None:
        if rec.id in self._ids:
            raise ValueError(f"duplicate candidate id {rec.id!r}")
        self._records.append(rec)
        self._ids.add(rec.id)

    def add(self, rec: CandidateRecord) -> None:
        if rec.id in self._ids:
            raise ValueError(f"duplicate candidate id {rec.id!r}")
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
        self._remember(rec)

    @property
    def records(self) -> tuple[CandidateRecord, ...]:
        return tuple(self._records)

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self._records], dtype=np.float64)

    def mean_score(self) -> float:
        if not self._records:
            raise EmptyDatabaseError("candidate database is empty")
        return float(self.scores().mean())

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)


def register_candidate(db: CandidateDatabase, code: str, score: float, module_tag) -> str:
    """Store a scored candidate and return its new id.  Duplicate code is kept."""
    score = float(score)
    if not math.isfinite(score):
        raise ValueError(f"score must be finite, got {score}")
    rec = CandidateRecord(
        id=uuid.uuid4().hex,
        module_tag=ModuleTag(module_tag),
        score=score,
        code=code,
        created_at=db.clock(),
    )
    db.add(rec)
    return rec.id


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    exemplar_count: int = 2

    def __post_init__(self):
        if not self.temperature > 0 or not math.isfinite(self.temperature):
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.exemplar_count < 1:
            raise ValueError(f"exemplar_count must be >= 1, got {self.exemplar_count}")


def softmax_probabilities(scores, temperature: float, mean: float | None = None) -> np.ndarray:
    """P_i proportional to exp((s_i - mean) / temperature).

    ``mean`` defaults to the mean of ``scores``; it cancels mathematically but
    keeps the exponent arguments centred.  A max-shift guards against overflow.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one score")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    mu = s.mean() if mean is None else mean
    z = (s - mu) / temperature
    w = np.exp(z - z.max())
    return w / w.sum()


def sample_exemplars(
    db: CandidateDatabase, cfg: SamplerConfig, rng: np.random.Generator
) -> list[CandidateRecord]:
    """Draw ``cfg.exemplar_count`` records without replacement.

    Each draw uses the softmax over the records still left, with the centring
    mean fixed to the mean over the whole database for the duration of the call.
    """
    records = db.records
    if not records:
        raise EmptyDatabaseError("cannot sample from an empty candidate database")
    count = cfg.exemplar_count
    if count > len(records):
        warnings.warn(
            f"requested {count} exemplars but the database holds {len(records)}; returning all",
            RuntimeWarning,
            stacklevel=2,
        )
        count = len(records)
    scores = db.scores()
    mu = float(scores.mean())
    remaining = list(range(len(records)))
    out = []
    for _ in range(count):
        p = softmax_probabilities(scores[remaining], cfg.temperature, mu)
        pick = int(rng.choice(len(remaining), p=p))
        out.append(records[remaining.pop(pick)])
    return out


def smooth_rewards(raw: Sequence[float]) -> list[float]:
    """Winsorize to the group's 5th/95th percentiles, then scale by the max magnitude.

    Weakly order-preserving.  A group whose clipped values are all zero maps to
    zeros.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValueError("need at least one reward")
    if not np.all(np.isfinite(x)):
        raise ValueError("rewards must be finite")
    lo, hi = np.percentile(x, WINSOR_PERCENTILES)
    clipped = np.clip(x, lo, hi)
    peak = np.abs(clipped).max()
    if peak == 0:
        return [0.0] * x.size
    return (clipped / peak).tolist()


def normalize_group_rewards(rewards: Sequence[float], G: int) -> list[float]:
    """(r - mean) / std within one group, using the population std.

    A constant group has no spread to normalize; it returns zeros and warns.
    """
    if G < 2:
        raise ValueError(f"group size must be >= 2, got {G}")
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != (G,):
        raise ValueError(f"expected {G} rewards, got {r.size}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    centred = r - r.mean()
    std = np.sqrt(np.mean(centred * centred))
    if np.all(r == r[0]) or std == 0:
        warnings.warn("zero-variance reward group; returning zeros", RuntimeWarning, stacklevel=2)
        return [0.0] * G
    out = centred / std
    # one more centring pass absorbs the rounding left by the division
    out -= out.mean()
    return out.tolist()


# -- prompt protocol ---------------------------------------------------------

PROMPT_HEADERS = (
    "Task Description",
    "Previous Implementations with Speed",
    "Generation Protocol",
    "Critical Requirements",
)
RESPONSE_HEADERS = ("Performance Analysis", "Algorithm Design", "Code Implementation")


def _fence_for(code: str) -> str:
    longest = max((len(m) for m in re.findall(r"`+", code)), default=0)
    return "`" * max(3, longest + 1)


def _fenced(code: str, lang: str = "") -> str:
    fence = _fence_for(code)
    return f"{fence}{lang}\n{code}\n{fence}"


@dataclass(frozen=True)
class PromptBundle:
    task_description: str
    exemplars: tuple[tuple[str, float], ...] = field(default_factory=tuple)
    generation_protocol: str = ""
    critical_requirements: str = ""

    @classmethod
    def from_records(cls, task: str, records: Iterable[CandidateRecord], protocol: str,
                     requirements: str) -> "PromptBundle":
        return cls(task, tuple((r.code, r.score) for r in records), protocol, requirements)


def assemble_prompt(bundle: PromptBundle) -> str:
    """Render the four prompt sections in order, one fenced block per exemplar."""
    if not bundle.exemplars:
        raise ValueError("prompt section 'Previous Implementations with Speed' is empty")
    for n, (code, score) in enumerate(bundle.exemplars, 1):
        if not code.strip():
            raise ValueError(f"exemplar {n} has empty code")
        if not math.isfinite(score):
            raise ValueError(f"exemplar {n} has non-finite score {score}")
    texts = {
        PROMPT_HEADERS[0]: bundle.task_description,
        PROMPT_HEADERS[2]: bundle.generation_protocol,
        PROMPT_HEADERS[3]: bundle.critical_requirements,
    }
    for name, text in texts.items():
        if not text.strip():
            raise ValueError(f"prompt section {name!r} is empty")
    exemplar_text = "\n\n".join(
        f"Implementation {n} (score: {score:.4f})\n{_fenced(code, 'cpp')}"
        for n, (code, score) in enumerate(bundle.exemplars, 1)
    )
    body = [
        bundle.task_description.strip(),
        exemplar_text,
        bundle.generation_protocol.strip(),
        bundle.critical_requirements.strip(),
    ]
    return "\n\n".join(f"## {h}\n\n{b}" for h, b in zip(PROMPT_HEADERS, body)) + "\n"


@dataclass(frozen=True)
class ResponseSections:
    performance_analysis: str
    algorithm_design: str
    code_implementation: str


class ResponseParseError(ValueError):
    """Raised with ``part`` naming the missing or misplaced piece."""

    def __init__(self, part: str, message: str):
        super().__init__(message)
        self.part = part


_HEADER_RE = re.compile(
    r"^[ \t]*(?:#+[ \t]*)?(?:\*\*|__)?[ \t]*(?:(?:step[ \t]*)?\d+[.):]?[ \t]*)?"
    r"(performance[ \t]+analysis|algorithm[ \t]+design|code[ \t]+implementation)"
    r"[ \t]*(?:\*\*|__)?[ \t]*:?[ \t]*(?:\*\*|__)?[ \t]*$",
    re.IGNORECASE | re.MULTILINE,
)
_FENCE_RE = re.compile(r"^[ \t]*(`{3,}|~{3,})[^\n]*\n(.*?)^[ \t]*\1[ \t]*$", re.DOTALL | re.MULTILINE)


def render_response(sections: ResponseSections, lang: str = "cpp") -> str:
    """Canonical response layout that :func:`parse_response` accepts."""
    return (
        f"## 1. {RESPONSE_HEADERS[0]}\n\n{sections.performance_analysis.strip()}\n\n"
        f"## 2. {RESPONSE_HEADERS[1]}\n\n{sections.algorithm_design.strip()}\n\n"
        f"## 3. {RESPONSE_HEADERS[2]}\n\n{_fenced(sections.code_implementation, lang)}\n"
    )


def parse_response(text: str) -> ResponseSections:
    """Split a model response into its three required sections.

    Headers match case-insensitively and may carry markdown or numbering
    decoration.  They must appear in protocol order.  The code is the first
    fenced block after the last header.
    """
    found: dict[str, re.Match] = {}
    for m in _HEADER_RE.finditer(text):
        key = " ".join(m.group(1).lower().split())
        found.setdefault(key, m)
    keys = [h.lower() for h in RESPONSE_HEADERS]
    for h, key in zip(RESPONSE_HEADERS, keys):
        if key not in found:
            raise ResponseParseError(h, f"missing section header {h!r}")
    starts = [found[k].start() for k in keys]
    for a, b, ha, hb in zip(starts, starts[1:], RESPONSE_HEADERS, RESPONSE_HEADERS[1:]):
        if b < a:
            raise ResponseParseError(hb, f"section {hb!r} appears before {ha!r}")
    analysis = text[found[keys[0]].end() : starts[1]].strip()
    design = text[found[keys[1]].end() : starts[2]].strip()
    fence = _FENCE_RE.search(text, found[keys[2]].end())
    if fence is None:
        raise ResponseParseError("code fence", f"no fenced code block after {RESPONSE_HEADERS[2]!r}")
    if not analysis:
        raise ResponseParseError(RESPONSE_HEADERS[0], f"section {RESPONSE_HEADERS[0]!r} is empty")
    if not design:
        raise ResponseParseError(RESPONSE_HEADERS[1], f"section {RESPONSE_HEADERS[1]!r} is empty")
    code = fence.group(2)[:-1]  # the newline before the closing fence
    if not code.strip():
        raise ResponseParseError("code fence", "code block is empty")
    return ResponseSections(analysis, design, code)
