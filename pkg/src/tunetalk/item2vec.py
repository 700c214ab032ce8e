"""Playlist co-occurrence item embeddings via skip-gram with negative sampling.

A playlist is treated as a bag: every ordered pair of distinct tracks within
it is a (center, context) training example. Negatives are drawn from the
unigram^0.75 track-frequency distribution. Training is plain seeded SGD and
fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .catalog import EmbeddingMatrix, Playlist


@dataclass(frozen=True)
class SkipGramConfig:
    dim: int = 128
    epochs: int = 5
    negatives: int = 5
    learning_rate: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def build_pairs(playlists) -> list[tuple[str, str]]:
    """All ordered within-playlist pairs of distinct track ids.

    Each unordered pair appears once per playlist occurrence, in both orders;
    repeated ids inside one playlist never pair with themselves.
    """
    pairs: list[tuple[str, str]] = []
    for pl in _as_playlist_list(playlists):
        ids = pl.track_ids
        for i in range(len(ids)):
            for j in range(len(ids)):
                if i != j and ids[i] != ids[j]:
                    pairs.append((ids[i], ids[j]))
    return pairs


def _as_playlist_list(playlists) -> list[Playlist]:
    if isinstance(playlists, dict):
        return list(playlists.values())
    return list(playlists)


def sgns_step(
    center: np.ndarray, targets: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients of one negative-sampling step, in float64.

    *targets* stacks the positive context and the negatives as rows; *labels*
    is 1 for the positive row and 0 for negatives. Loss is
    -log sigma(c.u+) - sum log sigma(-c.u-); gradients are exact, which the
    finite-difference test relies on.
    """
    scores = targets @ center
    sig = 1.0 / (1.0 + np.exp(-scores))
    # -log sigmoid(s) for label 1, -log sigmoid(-s) for label 0, stably
    loss = float(np.sum(np.logaddexp(0.0, scores) - labels * scores))
    coeff = sig - labels  # dL/dscore
    grad_center = coeff @ targets
    grad_targets = coeff[:, None] * center[None, :]
    return loss, grad_center, grad_targets


class Item2Vec(BaseEstimator):
    """Skip-gram-with-negative-sampling estimator over playlists.

    Fitted attributes: ``embedding_`` (EmbeddingMatrix, modality "playlist"),
    ``loss_curve_`` (per-epoch mean step loss), ``vocab_`` (sorted track ids).
    """

    def __init__(
        self,
        dim: int = 128,
        epochs: int = 5,
        negatives: int = 5,
        learning_rate: float = 0.025,
        seed: int = 0,
    ):
        self.dim = dim
        self.epochs = epochs
        self.negatives = negatives
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, playlists) -> "Item2Vec":
        cfg = SkipGramConfig(
            dim=self.dim,
            epochs=self.epochs,
            negatives=self.negatives,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        pls = _as_playlist_list(playlists)
        track_ids = sorted({t for pl in pls for t in pl.track_ids})
        if not track_ids:
            raise ValueError("no tracks found in playlists")
        index = {t: i for i, t in enumerate(track_ids)}
        n = len(track_ids)

        pair_ids = build_pairs(pls)
        if cfg.epochs > 0 and not pair_ids:
            raise ValueError("no track co-occurrence in playlists; cannot train")
        pairs = np.array(
            [(index[c], index[o]) for c, o in pair_ids], dtype=np.int64
        ).reshape(-1, 2)

        counts = np.zeros(n, dtype=np.float64)
        for pl in pls:
            for t in pl.track_ids:
                counts[index[t]] += 1
        neg_probs = counts ** 0.75
        neg_probs /= neg_probs.sum()

        rng = np.random.default_rng(cfg.seed)
        W_in = (rng.random((n, cfg.dim)) - 0.5) / cfg.dim  # word2vec-style init
        W_out = np.zeros((n, cfg.dim))

        lr = cfg.learning_rate
        losses: list[float] = []
        for _ in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            negs = rng.choice(n, size=(len(pairs), cfg.negatives), p=neg_probs)
            epoch_loss = 0.0
            for row, p in enumerate(order):
                c, o = pairs[p]
                neg = negs[row]
                neg = neg[neg != o]  # never use the positive as a negative
                targets_idx = np.concatenate(([o], neg))
                labels = np.zeros(len(targets_idx))
                labels[0] = 1.0
                loss, g_center, g_targets = sgns_step(
                    W_in[c], W_out[targets_idx], labels
                )
                epoch_loss += loss
                W_out[targets_idx] -= lr * g_targets
                W_in[c] -= lr * g_center
            losses.append(epoch_loss / len(pairs))

        self.vocab_ = track_ids
        self.loss_curve_ = losses
        self.embedding_ = EmbeddingMatrix(
            "playlist",
            cfg.dim,
            {t: W_in[index[t]].astype(np.float32) for t in track_ids},
        )
        return self


def train_item2vec(playlists, config: SkipGramConfig) -> EmbeddingMatrix:
    """One row per track appearing in the playlists; deterministic given seed."""
    est = Item2Vec(
        dim=config.dim,
        epochs=config.epochs,
        negatives=config.negatives,
        learning_rate=config.learning_rate,
        seed=config.seed,
    ).fit(playlists)
    return est.embedding_
