"""Scoring sense vectors for attribute sensitivity and building sense maps.

For an opposite-gender word pair (negative, positive), the cosine between the
two words' l-th sense vectors says how that sense treats the pair: near +1
means the sense ignores the contrast, near -1 means the sense encodes it with
opposite signs. Averaging over a pair lexicon gives a per-sense score s_l;
the most negative senses are the most gender-sensitive, and a sense map
assigns those a weight lambda < 1 (all others 1) for inference-time
suppression.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolarityPair:
    """An opposite-attribute word pair; terms must differ."""

    negative: str
    positive: str

    def __post_init__(self):
        if self.negative == self.positive:
            raise DomainError(f"polarity pair terms must be distinct: {self.negative!r}")


@dataclass(frozen=True)
class AttributeScores:
    """Per-sense mean pair cosine; lower (more negative) = more sensitive."""

    s: tuple[float, ...]

    def __post_init__(self):
        if not self.s:
            raise DomainError("attribute scores must cover at least one sense")
        for v in self.s:
            if not -1.0 <= v <= 1.0:
                raise DomainError(f"attribute score {v} outside [-1, 1]")

    def ranked(self) -> list[int]:
        """Sense indices from most to least sensitive; ties favor lower index."""
        return sorted(range(len(self.s)), key=lambda i: (self.s[i], i))


@dataclass(frozen=True)
class SenseMap:
    """Positive per-sense multipliers: lambda on the suppressed set, 1 elsewhere."""

    weights: tuple[float, ...]
    lam: float
    suppressed: frozenset[int]

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise DomainError("lambda must be in (0, 1]")
        for i in self.suppressed:
            if not 0 <= i < len(self.weights):
                raise DomainError(f"suppressed sense {i} out of range")
        for i, w in enumerate(self.weights):
            want = self.lam if i in self.suppressed else 1.0
            if w != want:
                raise DomainError(f"weight for sense {i} must be {want}, got {w}")

    @classmethod
    def identity(cls, num_senses: int) -> "SenseMap":
        return cls((1.0,) * num_senses, 1.0, frozenset())

    @property
    def is_identity(self) -> bool:
        return all(w == 1.0 for w in self.weights)


def sense_similarity(model, token_a: int, token_b: int, sense: int) -> float:
    """Cosine between the two tokens' sense-`sense` vectors, in [-1, 1].

    A zero sense vector yields 0 with a warning: an untrained toy model can
    produce one, and 0 reads as "uninformative" rather than aborting.
    """
    k = model.config.num_senses
    if not 0 <= sense < k:
        raise DomainError(f"sense index {sense} out of range for k={k}")
    va = model.sense_vectors(token_a).data[:, sense]
    vb = model.sense_vectors(token_b).data[:, sense]
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        log.warning("zero sense vector in similarity (tokens %d/%d, sense %d); scoring 0",
                    token_a, token_b, sense)
        return 0.0
    return min(1.0, max(-1.0, float(va @ vb) / (na * nb)))


def attribute_scores(model, pairs: Sequence[PolarityPair], vocab) -> AttributeScores:
    """Mean pair cosine per sense.

    ``vocab`` is anything with ``__contains__`` and ``token_id``. Pair order
    never matters: per-sense similarities are sorted before summation so the
    mean is reproducible bit for bit under permutation.
    """
    if not pairs:
        raise DomainError("attribute_scores needs at least one polarity pair")
    ids: list[tuple[int, int]] = []
    for p in pairs:
        for term in (p.negative, p.positive):
            if term not in vocab:
                raise DomainError(f"polarity term {term!r} not in vocabulary")
        ids.append((vocab.token_id(p.negative), vocab.token_id(p.positive)))
    k = model.config.num_senses
    scores = []
    for sense in range(k):
        sims = sorted(sense_similarity(model, a, b, sense) for a, b in ids)
        scores.append(sum(sims) / len(sims))
    return AttributeScores(tuple(scores))


def build_sense_map(scores, lam: float, m: int = 2) -> SenseMap:
    """Suppress the m most attribute-sensitive senses with weight lam.

    Ties on the score are broken toward the lower sense index. lam = 1 or
    m = 0 yields the all-ones (identity) map.
    """
    if not 0.0 < lam <= 1.0:
        raise DomainError("lambda must be in (0, 1]")
    s = tuple(getattr(scores, "s", scores))
    k = len(s)
    if not 0 <= m <= k:
        raise DomainError(f"m must be in [0, {k}]")
    if m == 0:
        return SenseMap((1.0,) * k, lam, frozenset())
    order = sorted(range(k), key=lambda i: (s[i], i))
    suppressed = frozenset(order[:m])
    weights = tuple(lam if i in suppressed else 1.0 for i in range(k))
    return SenseMap(weights, lam, suppressed)


# ---------------------------------------------------------------------------
# lexicon files


def load_polarity_lexicon(path, vocab=None) -> list[PolarityPair]:
    """Parse a pair-per-line lexicon: ``negative positive``, # comments allowed.

    Duplicate pairs collapse to the first occurrence. With a vocabulary
    given, pairs containing out-of-vocabulary terms are dropped and counted
    in a warning.
    """
    pairs: list[PolarityPair] = []
    seen: set[tuple[str, str]] = set()
    dropped = 0
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'negative positive', got {len(parts)} fields",
                             path=str(path), line=lineno)
        neg, pos = parts[0].lower(), parts[1].lower()
        if neg == pos:
            raise ParseError(f"pair terms must be distinct: {neg!r}",
                             path=str(path), line=lineno)
        if (neg, pos) in seen:
            continue
        seen.add((neg, pos))
        if vocab is not None and (neg not in vocab or pos not in vocab):
            dropped += 1
            continue
        pairs.append(PolarityPair(neg, pos))
    if dropped:
        log.warning("lexicon %s: dropped %d pairs with out-of-vocabulary terms",
                    path, dropped)
    return pairs


def default_pairs_path() -> Path:
    """Location of the built-in English gendered pair list."""
    return Path(str(resources.files("backrank").joinpath("data/gender_pairs.txt")))
