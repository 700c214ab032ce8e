"""Token sampling: temperature, nucleus (top-p) filtering, repetition penalty,
and the grammar that forces structurally valid 5-token music blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .vocab import ITEM_TOKENS, Vocabulary


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 0.9
    repetition_penalty: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.repetition_penalty <= 0:
            raise ValueError("repetition_penalty must be positive")


def apply_repetition_penalty(
    logits: torch.Tensor, generated_ids: Iterable[int], penalty: float
) -> torch.Tensor:
    """Divide positive / multiply negative logits of already-emitted ids."""
    if penalty == 1.0:
        return logits
    logits = logits.clone()
    for token_id in set(generated_ids):
        value = logits[token_id]
        logits[token_id] = value / penalty if value > 0 else value * penalty
    return logits


def nucleus_filter(probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Zero out everything beyond the smallest prefix with mass >= top_p.

    Probabilities are sorted descending (stable, so ties keep index order);
    the prefix always includes the argmax, and the kept mass is renormalized.
    """
    sorted_probs, order = torch.sort(probs, descending=True, stable=True)
    csum = torch.cumsum(sorted_probs, dim=0)
    reached = torch.nonzero(csum >= top_p, as_tuple=False)
    cutoff = int(reached[0]) if len(reached) else len(probs) - 1
    kept = order[: cutoff + 1]
    out = torch.zeros_like(probs)
    out[kept] = probs[kept]
    return out / out.sum()


def sample_token(
    logits: torch.Tensor,
    params: SamplingParams,
    generated_ids: Sequence[int] = (),
    generator: torch.Generator | None = None,
    allowed_ids: Sequence[int] | None = None,
) -> int:
    """One sampling step over a 1-d logit vector.

    Order of operations: grammar mask, repetition penalty, temperature,
    nucleus filter, draw. temperature <= 0 switches to greedy argmax.
    """
    logits = logits.detach().to(torch.float64)
    if allowed_ids is not None:
        masked = torch.full_like(logits, float("-inf"))
        idx = torch.as_tensor(list(allowed_ids), dtype=torch.long)
        masked[idx] = logits[idx]
        logits = masked
    logits = apply_repetition_penalty(logits, generated_ids, params.repetition_penalty)
    if params.temperature <= 0:
        return int(torch.argmax(logits))
    probs = torch.softmax(logits / params.temperature, dim=0)
    probs = nucleus_filter(probs, params.top_p)
    return int(torch.multinomial(probs, 1, generator=generator))


class MusicGrammar:
    """State machine constraining generation to well-formed music blocks.

    Outside a block every token is allowed (or only start_of_music when
    *force_start* is set and nothing has been emitted yet). After
    start_of_music the next five positions are restricted to the successive
    modality blocks (the unk token is additionally legal in the playlist
    slot) and the sixth is forced to end_of_music.
    """

    def __init__(self, vocab: Vocabulary, force_start: bool = False):
        self.vocab = vocab
        self.force_start = force_start
        self._emitted = 0
        self._slot: int | None = None  # None = outside a block

    def allowed_ids(self) -> list[int] | None:
        if self._slot is None:
            if self.force_start and self._emitted == 0:
                return [self.vocab.som_id]
            return None
        if self._slot < ITEM_TOKENS:
            lo, hi = self.vocab.modality_range(self._slot)
            ids = list(range(lo, hi))
            if self._slot == 0:
                ids.append(self.vocab.playlist_unk_id)
            return ids
        return [self.vocab.eom_id]

    def advance(self, token_id: int) -> None:
        self._emitted += 1
        if self._slot is None:
            if token_id == self.vocab.som_id:
                self._slot = 0
        elif self._slot < ITEM_TOKENS:
            self._slot += 1
        else:  # just emitted end_of_music
            self._slot = None

    @property
    def in_block(self) -> bool:
        return self._slot is not None
