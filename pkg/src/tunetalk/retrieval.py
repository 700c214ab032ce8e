"""Reverse lookup from generated 5-token sequences to catalog items.

Exact tuple matches score the full weight sum and therefore rank first;
otherwise candidates come from the union of per-modality inverted postings
and are scored by the weighted binary-overlap rule. The unk playlist token
never matches anything, itself included, so a cold item's ceiling is the
weight sum minus the playlist weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .catalog import MODALITIES
from .vocab import ITEM_TOKENS, MusicTokenSeq, Vocabulary


@dataclass(frozen=True)
class WeightProfile:
    """Per-modality weights for partial-match scoring (modality order)."""

    playlist: float
    semantic: float
    metadata: float
    lyrics: float
    audio: float

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ValueError("weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.playlist, self.semantic, self.metadata, self.lyrics, self.audio)

    def total(self) -> float:
        return sum(self.as_tuple())

    def without(self, modality: str) -> "WeightProfile":
        vals = list(self.as_tuple())
        vals[MODALITIES.index(modality)] = 0.0
        return WeightProfile(*vals)

    def scaled(self, factor: float) -> "WeightProfile":
        return WeightProfile(*(v * factor for v in self.as_tuple()))


# The five weighting strategies of the ablation study, keyed by name.
PROFILES: dict[str, WeightProfile] = {
    "uniform": WeightProfile(1, 1, 1, 1, 1),
    "linear-f2c": WeightProfile(1, 2, 3, 4, 5),
    "quadratic-f2c": WeightProfile(1, 4, 9, 16, 25),
    "linear-c2f": WeightProfile(5, 4, 3, 2, 1),
    "quadratic-c2f": WeightProfile(25, 16, 9, 4, 1),
}

DEFAULT_PROFILE = "quadratic-c2f"


def parse_weights(text: str) -> WeightProfile:
    """A profile name or five comma-separated numbers in modality order."""
    if text in PROFILES:
        return PROFILES[text]
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != ITEM_TOKENS:
        raise ValueError(
            f"weights must name a profile ({', '.join(PROFILES)}) or give "
            f"{ITEM_TOKENS} comma-separated values"
        )
    return WeightProfile(*(float(p) for p in parts))


class TokenIndex:
    """Inverted postings, exact-tuple map, and item tuples for a catalog."""

    def __init__(
        self,
        item_tokens: Mapping[str, MusicTokenSeq],
        vocab: Vocabulary,
        popularity: Mapping[str, float] | None = None,
    ):
        self.vocab = vocab
        self.item_tokens: dict[str, MusicTokenSeq] = dict(item_tokens)
        self.popularity = {t: float(p) for t, p in (popularity or {}).items()}
        self.postings: list[dict[int, set[str]]] = [{} for _ in range(ITEM_TOKENS)]
        self.exact: dict[MusicTokenSeq, list[str]] = {}
        for track_id, seq in self.item_tokens.items():
            vocab.validate_item(seq)
            for m, token_id in enumerate(seq):
                if token_id == vocab.playlist_unk_id:
                    continue  # unk never matches, so it is never indexed
                self.postings[m].setdefault(token_id, set()).add(track_id)
            self.exact.setdefault(seq, []).append(track_id)
        for ids in self.exact.values():
            ids.sort()

    def __len__(self) -> int:
        return len(self.item_tokens)

    def _pop(self, track_id: str) -> float:
        return self.popularity.get(track_id, -1.0)


def build_index(
    item_tokens: Mapping[str, MusicTokenSeq] | Iterable[tuple[str, MusicTokenSeq]],
    vocab: Vocabulary,
    popularity: Mapping[str, float] | None = None,
) -> TokenIndex:
    if not isinstance(item_tokens, Mapping):
        pairs = list(item_tokens)
        seen = set()
        for track_id, _ in pairs:
            if track_id in seen:
                raise ValueError(f"duplicate track_id {track_id!r}")
            seen.add(track_id)
        item_tokens = dict(pairs)
    return TokenIndex(item_tokens, vocab, popularity)


def score_partial(
    query: MusicTokenSeq,
    item: MusicTokenSeq,
    weights: WeightProfile,
    unk_id: int,
) -> float:
    """Sum of weights over modalities whose tokens agree; unk matches nothing."""
    w = weights.as_tuple()
    score = 0.0
    for m in range(ITEM_TOKENS):
        if query[m] == item[m] and query[m] != unk_id:
            score += w[m]
    return score


def matched_modalities(
    query: MusicTokenSeq, item: MusicTokenSeq, unk_id: int
) -> list[str]:
    return [
        MODALITIES[m]
        for m in range(ITEM_TOKENS)
        if query[m] == item[m] and query[m] != unk_id
    ]


def recommend(
    index: TokenIndex,
    query: MusicTokenSeq,
    weights: WeightProfile,
    top_n: int = 100,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> list[tuple[str, float]]:
    """Top-n (track_id, score), score descending.

    Ties break by descending popularity then ascending track id. Items whose
    score would be zero are never returned; an empty index or a query that
    matches nothing yields an empty list.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    index.vocab.validate_item(query)
    w = weights.as_tuple()
    unk = index.vocab.playlist_unk_id

    candidates: set[str] = set()
    for m in range(ITEM_TOKENS):
        if w[m] <= 0 or query[m] == unk:
            continue
        candidates.update(index.postings[m].get(query[m], ()))
    candidates.difference_update(exclude)

    scored = []
    for track_id in candidates:
        s = score_partial(query, index.item_tokens[track_id], weights, unk)
        if s > 0:
            scored.append((track_id, s))
    scored.sort(key=lambda ts: (-ts[1], -index._pop(ts[0]), ts[0]))
    return scored[:top_n]
