"""Data preparation for translated reasoning corpora.

Before translation: drop samples that talk about translating into, or
answering in, a particular language. For translation: cut long texts into
token-budgeted chunks at paragraph or sentence boundaries. After
translation: drop empty outputs, compression-ratio and length-ratio
outliers, and samples longer than the training context.
"""

from __future__ import annotations

import json
import math
import os
import re
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import PreconditionError

DEFAULT_K_SIGMA = 3.0
DEFAULT_MAX_TOKENS = 32768
DEFAULT_CHARS_PER_TOKEN = 4.0
DEFAULT_CHUNK_BUDGET = 2000

DEFLATE = {"library": "zlib", "level": 9, "wbits": 15, "mem_level": 8, "strategy": "default"}

_LANGS = (
    r"(?:english|french|german|spanish|chinese|mandarin|cantonese|swahili|italian|portuguese|"
    r"japanese|korean|russian|arabic|hindi|bengali|dutch|polish|turkish|vietnamese|thai|"
    r"indonesian|greek|hebrew|persian|urdu|ukrainian|swedish|norwegian|danish|finnish|czech|"
    r"romanian|hungarian|latin)"
)
DEFAULT_SELF_REFERENCE_PATTERNS = (
    rf"\btranslat\w*\b[^.?!\n]{{0,60}}?\b(?:into|to|in|from)\s+{_LANGS}\b",
    rf"\b(?:answer|respond|reply|write|explain|response|output)\w*\b[^.?!\n]{{0,40}}?\bin\s+{_LANGS}\b",
    rf"\b{_LANGS}\s+(?:translation|version)\b",
    rf"\bin\s+{_LANGS}\s+only\b",
)


@dataclass
class Sample:
    id: str
    question: str = ""
    reasoning: str = ""
    answer: str = ""
    language: str = ""

    @property
    def full_text(self) -> str:
        return "\n\n".join(p for p in (self.question, self.reasoning, self.answer) if p)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Sample":
        if "id" not in d:
            raise PreconditionError(f"sample without id: {dict(d)!r:.80}")
        return cls(
            id=str(d["id"]),
            question=str(d.get("question") or ""),
            reasoning=str(d.get("reasoning") or ""),
            answer=str(d.get("answer") or ""),
            language=str(d.get("language") or ""),
        )


class CharTokenEstimator:
    """Token estimate as ``ceil(len(text) / chars_per_token)``."""

    def __init__(self, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN):
        if chars_per_token <= 0:
            raise PreconditionError("chars_per_token must be positive")
        self.chars_per_token = chars_per_token

    def __call__(self, text: str) -> int:
        return math.ceil(len(text) / self.chars_per_token)

    def describe(self) -> dict:
        return {"kind": "chars", "chars_per_token": self.chars_per_token}


Estimator = Callable[[str], int]


def self_reference_filter(sample: Sample, patterns: Sequence[str] = DEFAULT_SELF_REFERENCE_PATTERNS) -> bool:
    """True if the sample mentions translating into, or answering in, a specific language."""
    if not patterns:
        raise PreconditionError("need at least one self-reference pattern")
    try:
        compiled = [re.compile(p, re.IGNORECASE) for p in patterns]
    except re.error as e:
        raise PreconditionError(f"invalid self-reference pattern: {e}") from None
    fields = (sample.question, sample.reasoning, sample.answer)
    return any(rx.search(text) for rx in compiled for text in fields)


# ---------------------------------------------------------------------------
# chunking

# blank line plus any whitespace after it stays with the preceding paragraph
_PARAGRAPH_END = re.compile(r"\n[^\S\n]*\n\s*")
# full-width CJK terminators end a sentence even without following whitespace
_SENTENCE_END = re.compile(r"[.!?…]+(?:\s+|$)|[。！？]+\s*")


def _split_after(text: str, boundary: re.Pattern) -> list[str]:
    pieces, pos = [], 0
    for m in boundary.finditer(text):
        if m.end() > pos:
            pieces.append(text[pos : m.end()])
            pos = m.end()
    if pos < len(text):
        pieces.append(text[pos:])
    return pieces


def _hard_split(text: str, budget: int, estimate: Estimator) -> list[str]:
    out = []
    while text:
        if estimate(text) <= budget:
            out.append(text)
            break
        lo, hi = 1, len(text) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if estimate(text[:mid]) <= budget:
                lo = mid
            else:
                hi = mid - 1
        out.append(text[:lo])
        text = text[lo:]
    return out


def _pack(pieces: list[str], budget: int, estimate: Estimator, oversize: Callable[[str], list[str]]) -> list[str]:
    chunks: list[str] = []
    cur = ""
    for piece in pieces:
        if estimate(cur + piece) <= budget:
            cur += piece
            continue
        if cur:
            chunks.append(cur)
            cur = ""
        if estimate(piece) <= budget:
            cur = piece
        else:
            sub = oversize(piece)
            chunks.extend(sub[:-1])
            cur = sub[-1]
    if cur:
        chunks.append(cur)
    return chunks


def chunk_text(text: str, budget_tokens: int = DEFAULT_CHUNK_BUDGET, estimator: Estimator | None = None) -> list[str]:
    """Split ``text`` into chunks of at most ``budget_tokens`` estimated tokens.

    Paragraph boundaries are preferred, then sentence boundaries; a sentence
    that alone exceeds the budget is cut at the longest prefix that fits.
    ``"".join(chunks) == text`` always holds.
    """
    if budget_tokens < 1:
        raise PreconditionError(f"budget must be >= 1, got {budget_tokens}")
    estimate = estimator or CharTokenEstimator()

    def sentences(paragraph: str) -> list[str]:
        return _pack(
            _split_after(paragraph, _SENTENCE_END),
            budget_tokens,
            estimate,
            lambda s: _hard_split(s, budget_tokens, estimate),
        )

    return _pack(_split_after(text, _PARAGRAPH_END), budget_tokens, estimate, sentences)


# ---------------------------------------------------------------------------
# post-translation filters


def compression_ratio(text: str | bytes) -> float:
    """Compressed size over raw size of the UTF-8 bytes, using the pinned :data:`DEFLATE` settings."""
    raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")
    if not raw:
        raise PreconditionError("compression ratio of empty text is undefined")
    comp = zlib.compressobj(
        level=DEFLATE["level"], method=zlib.DEFLATED, wbits=DEFLATE["wbits"],
        memLevel=DEFLATE["mem_level"], strategy=zlib.Z_DEFAULT_STRATEGY,
    )
    return len(comp.compress(bytes(raw)) + comp.flush()) / len(raw)


@dataclass
class FilterVerdict:
    id: str
    kept: bool
    reasons: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _moments(values: list[float]) -> tuple[float, float] | None:
    if len(values) < 2:
        return None
    arr = np.asarray(values)
    if arr.min() == arr.max():
        # exact zero spread; rounding in mean/std would otherwise leave ulp-sized residue
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std())


def _z(value: float | None, moments: tuple[float, float] | None) -> float | None:
    if value is None or moments is None:
        return None
    mean, std = moments
    return (value - mean) / std if std > 0 else 0.0


def anomaly_filters(
    corpus: Sequence[tuple[Sample, Sample]],
    k_sigma: float = DEFAULT_K_SIGMA,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    estimator: Estimator | None = None,
    token_counts: Mapping[str, tuple[int, int]] | None = None,
    self_reference_patterns: Sequence[str] | None = None,
) -> list[FilterVerdict]:
    """One verdict per ``(source, translated)`` pair.

    Pass 1 computes per-sample ratios: compression ratio of the translation
    over that of the source, and translated over source token counts. Pass
    2 flags samples whose ratio lies more than ``k_sigma`` population
    standard deviations from the corpus mean (empty translations excluded
    from the moments). ``token_counts`` maps sample id to exact
    ``(source, translated)`` counts and overrides ``estimator``.
    """
    if not corpus:
        raise PreconditionError("corpus is empty")
    if k_sigma <= 0:
        raise PreconditionError(f"k_sigma must be positive, got {k_sigma}")
    estimate = estimator or CharTokenEstimator()
    seen: set[str] = set()
    rows = []
    for src, tr in corpus:
        if src.id in seen:
            raise PreconditionError(f"duplicate sample id {src.id!r}")
        seen.add(src.id)
        src_text, tr_text = src.full_text, tr.full_text
        if not src_text.strip():
            raise PreconditionError(f"sample {src.id!r}: source text is empty")
        if token_counts is not None:
            if src.id not in token_counts:
                raise PreconditionError(f"no token counts for sample {src.id!r}")
            src_tokens, tr_tokens = token_counts[src.id]
        else:
            src_tokens, tr_tokens = estimate(src_text), estimate(tr_text)
        if src_tokens <= 0:
            raise PreconditionError(f"sample {src.id!r}: source token count must be positive")
        empty = not tr_text.strip()
        rho_c = rho_l = None
        if not empty:
            rho_c = compression_ratio(tr_text) / compression_ratio(src_text)
            rho_l = tr_tokens / src_tokens
        rows.append((src, empty, rho_c, rho_l, tr_tokens))

    comp_moments = _moments([r[2] for r in rows if r[2] is not None])
    len_moments = _moments([r[3] for r in rows if r[3] is not None])
    if comp_moments is None:
        warnings.warn("fewer than two non-empty translations: anomaly filters disabled", stacklevel=2)

    verdicts = []
    for src, empty, rho_c, rho_l, tr_tokens in rows:
        reasons = []
        if self_reference_patterns and self_reference_filter(src, self_reference_patterns):
            reasons.append("self_reference")
        if empty:
            reasons.append("empty")
        z_c, z_l = _z(rho_c, comp_moments), _z(rho_l, len_moments)
        if rho_c is not None and comp_moments and abs(rho_c - comp_moments[0]) > k_sigma * comp_moments[1]:
            reasons.append("compression_anomaly")
        if rho_l is not None and len_moments and abs(rho_l - len_moments[0]) > k_sigma * len_moments[1]:
            reasons.append("length_anomaly")
        if tr_tokens > max_tokens:
            reasons.append("over_context")
        stats = {
            "compression_ratio": rho_c,
            "length_ratio": rho_l,
            "token_estimate": int(tr_tokens),
            "z_compression": z_c,
            "z_length": z_l,
        }
        verdicts.append(FilterVerdict(src.id, not reasons, reasons, stats))
    return verdicts


# ---------------------------------------------------------------------------
# I/O


def _iter_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as e:
                    raise PreconditionError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None


def read_samples(path: str | os.PathLike) -> list[Sample]:
    return [Sample.from_dict(obj) for _, obj in _iter_jsonl(path)]


def read_pairs(path: str | os.PathLike) -> list[tuple[Sample, Sample]]:
    """Read ``{"source": {...}, "translated": {...}}`` lines; ``translated.id`` defaults to the source id."""
    pairs = []
    for lineno, obj in _iter_jsonl(path):
        if not isinstance(obj, dict) or "source" not in obj or "translated" not in obj:
            raise PreconditionError(f"{path}:{lineno}: expected 'source' and 'translated' objects")
        src = Sample.from_dict(obj["source"])
        tr = Sample.from_dict({"id": src.id, **obj["translated"]})
        pairs.append((src, tr))
    return pairs


def read_token_counts(path: str | os.PathLike) -> dict[str, tuple[int, int]]:
    """Sidecar of exact counts: lines ``{"id", "source_tokens", "translated_tokens"}``."""
    out = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            out[str(obj["id"])] = (int(obj["source_tokens"]), int(obj["translated_tokens"]))
        except (KeyError, TypeError, ValueError):
            raise PreconditionError(f"{path}:{lineno}: expected id, source_tokens, translated_tokens") from None
    return out


def write_jsonl(rows: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
