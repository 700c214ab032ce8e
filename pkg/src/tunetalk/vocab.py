"""Vocabulary expansion and token mapping.

A base text vocabulary (byte-level by default: ids 0..255 are raw UTF-8
bytes) is extended with five contiguous blocks of music tokens, one block of
size K per modality in the fixed coarse-to-fine order, followed by the
special tokens. Each catalog item is a 5-token sequence, one token per
modality; the surface syntax is ``<|{modality}-{index}|>`` wrapped in
``<start_of_music>`` / ``<end_of_music>`` when embedded in a conversation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .catalog import MODALITIES

SOM_SURFACE = "<start_of_music>"
EOM_SURFACE = "<end_of_music>"
PLAYLIST_UNK_SURFACE = "<|playlist-unk|>"
ROLE_USER_SURFACE = "<|user|>"
ROLE_ASSISTANT_SURFACE = "<|assistant|>"

# A music item is always this many tokens.
ITEM_TOKENS = len(MODALITIES)

MusicTokenSeq = tuple[int, int, int, int, int]

_SURFACE_RE = re.compile(r"<\|(playlist|semantic|metadata|lyrics|audio)-(\d+|unk)\|>")


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between token ids and (text byte | modality cluster | special)."""

    base_size: int
    k: int

    @property
    def music_base(self) -> int:
        return self.base_size

    @property
    def music_size(self) -> int:
        return ITEM_TOKENS * self.k

    @property
    def som_id(self) -> int:
        return self.base_size + self.music_size

    @property
    def eom_id(self) -> int:
        return self.som_id + 1

    @property
    def playlist_unk_id(self) -> int:
        return self.som_id + 2

    @property
    def role_user_id(self) -> int:
        return self.som_id + 3

    @property
    def role_assistant_id(self) -> int:
        return self.som_id + 4

    @property
    def size(self) -> int:
        return self.som_id + 5

    @property
    def address_space(self) -> int:
        """Distinct items representable by one 5-token sequence."""
        return self.k ** ITEM_TOKENS

    def modality_range(self, modality: str | int) -> tuple[int, int]:
        """Half-open id range [start, stop) of one modality's block."""
        idx = modality if isinstance(modality, int) else MODALITIES.index(modality)
        start = self.base_size + idx * self.k
        return start, start + self.k

    def music_token_id(self, modality: str | int, cluster: int) -> int:
        idx = modality if isinstance(modality, int) else MODALITIES.index(modality)
        if not 0 <= cluster < self.k:
            raise ValueError(
                f"cluster {cluster} out of range for k={self.k} ({MODALITIES[idx]})"
            )
        return self.base_size + idx * self.k + cluster

    def decode_token(self, token_id: int) -> tuple:
        """Inverse mapping: ('text', byte) | ('music', modality, cluster) | ('special', name)."""
        if not 0 <= token_id < self.size:
            raise ValueError(f"token id {token_id} out of range (vocab size {self.size})")
        if token_id < self.base_size:
            return ("text", token_id)
        if token_id < self.som_id:
            rel = token_id - self.base_size
            return ("music", MODALITIES[rel // self.k], rel % self.k)
        name = {
            self.som_id: "start_of_music",
            self.eom_id: "end_of_music",
            self.playlist_unk_id: "playlist_unk",
            self.role_user_id: "role_user",
            self.role_assistant_id: "role_assistant",
        }[token_id]
        return ("special", name)

    def is_music_id(self, token_id: int) -> bool:
        return self.base_size <= token_id < self.som_id

    # -- item sequences ------------------------------------------------------

    def encode_item(self, cluster_indices: Sequence[int | None]) -> MusicTokenSeq:
        """5 tokens from per-modality cluster indices (modality order).

        The playlist index may be None for cold items, which maps to the
        reserved unk token; every other modality requires a real index.
        """
        if len(cluster_indices) != ITEM_TOKENS:
            raise ValueError(f"expected {ITEM_TOKENS} cluster indices")
        tokens = []
        for m, cluster in enumerate(cluster_indices):
            if cluster is None:
                if m != 0:
                    raise ValueError(f"modality {MODALITIES[m]!r} index may not be None")
                tokens.append(self.playlist_unk_id)
            else:
                tokens.append(self.music_token_id(m, cluster))
        return tuple(tokens)  # type: ignore[return-value]

    def decode_item(self, seq: MusicTokenSeq) -> tuple[int | None, ...]:
        """Per-modality cluster indices; None marks the unk playlist slot."""
        self.validate_item(seq)
        out: list[int | None] = []
        for m, token_id in enumerate(seq):
            if token_id == self.playlist_unk_id:
                out.append(None)
            else:
                out.append(token_id - self.base_size - m * self.k)
        return tuple(out)

    def validate_item(self, seq: Sequence[int]) -> None:
        if len(seq) != ITEM_TOKENS:
            raise ValueError(f"item sequence must have {ITEM_TOKENS} tokens")
        for m, token_id in enumerate(seq):
            if m == 0 and token_id == self.playlist_unk_id:
                continue
            lo, hi = self.modality_range(m)
            if not lo <= token_id < hi:
                raise ValueError(
                    f"token {token_id} not in the {MODALITIES[m]!r} block [{lo}, {hi})"
                )

    def item_surface(self, seq: MusicTokenSeq) -> str:
        self.validate_item(seq)
        pieces = []
        for m, token_id in enumerate(seq):
            if token_id == self.playlist_unk_id:
                pieces.append(PLAYLIST_UNK_SURFACE)
            else:
                lo, _ = self.modality_range(m)
                pieces.append(f"<|{MODALITIES[m]}-{token_id - lo}|>")
        return "".join(pieces)

    def parse_item_surface(self, surface: str) -> MusicTokenSeq:
        """Inverse of item_surface; the whole string must be 5 music tokens."""
        matches = list(_SURFACE_RE.finditer(surface))
        joined = "".join(m.group(0) for m in matches)
        if len(matches) != ITEM_TOKENS or joined != surface.strip():
            raise ValueError(f"not a valid 5-token item surface: {surface!r}")
        indices: list[int | None] = []
        for m, match in enumerate(matches):
            if match.group(1) != MODALITIES[m]:
                raise ValueError(
                    f"token {m} is {match.group(1)!r}, expected {MODALITIES[m]!r}"
                )
            indices.append(None if match.group(2) == "unk" else int(match.group(2)))
        return self.encode_item(indices)

    # -- text ------------------------------------------------------------

    def encode_text(self, text: str) -> list[int]:
        if self.base_size < 256:
            raise ValueError("byte-level text needs a base vocabulary of >= 256 ids")
        return list(text.encode("utf-8"))

    def decode_text(self, token_ids: Sequence[int]) -> str:
        return bytes(t for t in token_ids if 0 <= t < 256).decode(
            "utf-8", errors="replace"
        )


def build_vocab(base_tokenizer_size: int = 256, k_per_modality: int = 16) -> Vocabulary:
    if k_per_modality < 1:
        raise ValueError("k_per_modality must be >= 1")
    if base_tokenizer_size < 1:
        raise ValueError("base_tokenizer_size must be >= 1")
    return Vocabulary(base_size=base_tokenizer_size, k=k_per_modality)


def render_conversation(
    conversation,
    vocab: Vocabulary,
    item_tokens: dict[str, MusicTokenSeq],
) -> list[int]:
    """Token ids for a conversation in canonical user -> music -> assistant order.

    Music turns render as start_of_music, the item's 5 tokens, end_of_music;
    text turns as a role marker followed by UTF-8 bytes.
    """
    ids: list[int] = []
    for i, turn in enumerate(conversation.turns):
        if turn.role == "user":
            ids.append(vocab.role_user_id)
            ids.extend(vocab.encode_text(turn.content))
        elif turn.role == "assistant":
            ids.append(vocab.role_assistant_id)
            ids.extend(vocab.encode_text(turn.content))
        elif turn.role == "music":
            try:
                seq = item_tokens[turn.content]
            except KeyError:
                raise KeyError(
                    f"turn {i}: no token sequence for track {turn.content!r}"
                ) from None
            ids.append(vocab.som_id)
            ids.extend(seq)
            ids.append(vocab.eom_id)
        else:
            raise ValueError(f"turn {i}: unknown role {turn.role!r}")
    return ids
