"""Character n-gram rank-profile language identification and language fidelity.

A profile is the top-K character n-grams (n = 1..4) of a language's training
text, ranked by frequency. A document is classified by the out-of-place
distance between its own ranked n-grams and each profile; n-grams missing
from a profile cost K.
"""

from __future__ import annotations

import json
import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import NoSignalError, PreconditionError

DEFAULT_K = 300
NGRAM_RANGE = (1, 4)
UNDETERMINED = "und"


def normalize(text: str) -> str:
    """NFC, case-folded, letters and combining marks kept, everything else a single space."""
    text = unicodedata.normalize("NFC", text).casefold()
    kept = [ch if ch.isalpha() or unicodedata.category(ch).startswith("M") else " " for ch in text]
    return " ".join(unicodedata.normalize("NFC", "".join(kept)).split())


def ngram_counts(text: str, n_range: tuple[int, int] = NGRAM_RANGE) -> Counter:
    """Count n-grams of each space-padded word of the normalized text."""
    counts: Counter = Counter()
    lo, hi = n_range
    for word in normalize(text).split():
        padded = f" {word} "
        for n in range(lo, hi + 1):
            for i in range(len(padded) - n + 1):
                gram = padded[i : i + n]
                if gram.strip():
                    counts[gram] += 1
    return counts


def rank_ngrams(counts: Counter, k: int) -> dict[str, int]:
    """Top ``k`` n-grams by count (ties lexicographic) mapped to ranks 0..k-1."""
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return {gram: rank for rank, (gram, _) in enumerate(top)}


@dataclass(frozen=True)
class LanguageProfile:
    label: str
    ngram_ranks: Mapping[str, int]


def train_profiles(
    corpora: Mapping[str, Sequence[str]],
    k: int = DEFAULT_K,
    n_range: tuple[int, int] = NGRAM_RANGE,
) -> list[LanguageProfile]:
    if len(corpora) < 2:
        raise PreconditionError("need corpora for at least two labels")
    if k < 1:
        raise PreconditionError(f"profile size must be >= 1, got {k}")
    profiles = []
    for label in sorted(corpora):
        counts: Counter = Counter()
        for doc in corpora[label]:
            counts.update(ngram_counts(doc, n_range))
        if not counts:
            raise PreconditionError(f"empty corpus for label {label!r}")
        profiles.append(LanguageProfile(label, rank_ngrams(counts, k)))
    return profiles


def classify(
    text: str,
    profiles: Sequence[LanguageProfile],
    k: int = DEFAULT_K,
    n_range: tuple[int, int] = NGRAM_RANGE,
) -> tuple[str, dict[str, int]]:
    """Return the closest label and the out-of-place distance to every profile."""
    if not profiles:
        raise PreconditionError("need at least one profile")
    counts = ngram_counts(text, n_range)
    if not counts:
        raise NoSignalError("no signal: text has no letters after normalization")
    doc = rank_ngrams(counts, k)
    distances = {}
    for p in profiles:
        ranks = p.ngram_ranks
        distances[p.label] = sum(abs(r - ranks[g]) if g in ranks else k for g, r in doc.items())
    label = min(distances, key=lambda lab: (distances[lab], lab))
    return label, distances


@dataclass
class FidelityReport:
    target: str
    total: int
    per_label_counts: dict[str, int] = field(default_factory=dict)

    @property
    def fidelity(self) -> float:
        return self.per_label_counts.get(self.target, 0) / self.total

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "total": self.total,
            "per_label_counts": dict(sorted(self.per_label_counts.items())),
            "fidelity": self.fidelity,
        }


def fidelity(
    traces: Sequence[str],
    target: str,
    profiles: Sequence[LanguageProfile],
    k: int = DEFAULT_K,
    prefix_chars: int | None = None,
) -> FidelityReport:
    """Fraction of traces classified as ``target``; unclassifiable traces count as ``und``.

    Each trace is classified whole unless ``prefix_chars`` limits it to a prefix.
    """
    if not traces:
        raise PreconditionError("need at least one trace")
    counts: Counter = Counter()
    for trace in traces:
        if prefix_chars is not None:
            trace = trace[:prefix_chars]
        try:
            label, _ = classify(trace, profiles, k)
        except NoSignalError:
            label = UNDETERMINED
        counts[label] += 1
    return FidelityReport(target, len(traces), dict(counts))


def save_profiles(profiles: Iterable[LanguageProfile], path: str | os.PathLike) -> None:
    data = {
        p.label: [[g, r] for g, r in sorted(p.ngram_ranks.items(), key=lambda kv: kv[1])]
        for p in sorted(profiles, key=lambda p: p.label)
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=0)


def load_profiles(path: str | os.PathLike) -> list[LanguageProfile]:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    profiles = []
    for label in sorted(data):
        ranks = {str(g): int(r) for g, r in data[label]}
        if sorted(ranks.values()) != list(range(len(ranks))):
            raise PreconditionError(f"profile {label!r}: ranks must be 0..{len(ranks) - 1} and unique")
        profiles.append(LanguageProfile(label, ranks))
    return profiles


def bundled_corpus() -> dict[str, list[str]]:
    """Sample sentences shipped with the package, one list per language code."""
    out = {}
    for entry in resources.files("layerswap").joinpath("data", "lid").iterdir():
        if entry.name.endswith(".txt"):
            lines = entry.read_text(encoding="utf-8").splitlines()
            out[entry.name[:-4]] = [ln.strip() for ln in lines if ln.strip()]
    return dict(sorted(out.items()))


def read_traces(path: str | os.PathLike) -> list[str]:
    """Read ``{"text": ...}`` objects from a JSON-lines file."""
    traces = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                traces.append(str(json.loads(line)["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise PreconditionError(f"{path}:{lineno}: expected an object with a 'text' field ({e})") from None
    return traces
