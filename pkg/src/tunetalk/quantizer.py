"""Per-modality K-means codebooks mapping embedding vectors to cluster indices.

Plain Lloyd iterations over squared Euclidean distance with k-means++
seeding, a deterministic RNG, lowest-index tie-breaking, and farthest-point
reseeding of empty clusters. Distances are computed as exact coordinate
differences (chunked over points), so assignments are bitwise identical to a
naive per-point scan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .catalog import MODALITIES, EmbeddingMatrix
from .validation import check_fitted, check_matrix

CBK_MAGIC = b"TPCBK1"


class CodebookError(Exception):
    pass


@dataclass(frozen=True)
class Codebook:
    modality: str
    k: int
    dim: int
    centroids: np.ndarray  # (k, dim) float32, read-only
    inertia: float

    def __post_init__(self):
        if self.centroids.shape != (self.k, self.dim):
            raise ValueError("centroid array shape does not match k/dim")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite values")


def _exact_sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """(n, k) squared distances via explicit differences, chunked over points."""
    n, d = X.shape
    k = C.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    chunk = max(1, int(8_000_000 // max(1, k * d)))
    for start in range(0, n, chunk):
        block = X[start : start + chunk]
        out[start : start + chunk] = ((block[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    return out


class KMeansQuantizer(BaseEstimator):
    """Lloyd K-means with k-means++ seeding and deterministic semantics.

    Fitted attributes: ``cluster_centers_`` (k, dim float64),
    ``inertia_`` (final objective), ``inertia_trace_`` (per-iteration,
    non-increasing), ``n_iter_``.
    """

    def __init__(self, k: int = 16, seed: int = 0, max_iters: int = 100, tol: float = 1e-6):
        self.k = k
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol

    def _plusplus_init(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = X.shape[0]
        centers = np.empty((self.k, X.shape[1]), dtype=np.float64)
        first = int(rng.integers(n))
        centers[0] = X[first]
        d2 = ((X - centers[0]) ** 2).sum(-1)
        for j in range(1, self.k):
            total = d2.sum()
            if total <= 0:
                # all remaining points coincide with a chosen center
                centers[j] = X[int(rng.integers(n))]
                continue
            probs = d2 / total
            pick = int(rng.choice(n, p=probs))
            centers[j] = X[pick]
            d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(-1))
        return centers

    def fit(self, X) -> "KMeansQuantizer":
        X = check_matrix(X, min_rows=1)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if X.shape[0] < self.k:
            raise ValueError(f"need at least k={self.k} rows, got {X.shape[0]}")
        rng = np.random.default_rng(self.seed)
        C = self._plusplus_init(X, rng)

        trace: list[float] = []
        n_iter = 0
        for n_iter in range(1, self.max_iters + 1):
            d2 = _exact_sq_distances(X, C)
            labels = d2.argmin(axis=1)  # argmin takes the lowest index on ties
            assigned_d2 = d2[np.arange(X.shape[0]), labels]
            trace.append(float(assigned_d2.sum()))

            new_C = C.copy()
            counts = np.bincount(labels, minlength=self.k)
            for j in range(self.k):
                if counts[j] > 0:
                    new_C[j] = X[labels == j].mean(axis=0)
            # empty-cluster repair: reseed to the point farthest from its centroid
            repair_d2 = assigned_d2.copy()
            for j in np.flatnonzero(counts == 0):
                p = int(repair_d2.argmax())
                new_C[j] = X[p]
                labels[p] = j
                repair_d2[p] = 0.0

            shift = float(np.sqrt(((new_C - C) ** 2).sum(-1)).max())
            C = new_C
            if shift < self.tol:
                break

        final_d2 = _exact_sq_distances(X, C)
        final_labels = final_d2.argmin(axis=1)
        trace.append(float(final_d2[np.arange(X.shape[0]), final_labels].sum()))

        self.cluster_centers_ = C
        self.labels_ = final_labels
        self.inertia_ = trace[-1]
        self.inertia_trace_ = trace
        self.n_iter_ = n_iter
        return self

    def predict(self, V) -> np.ndarray:
        """Nearest-centroid indices; ties break to the lowest index."""
        check_fitted(self, "cluster_centers_")
        V = np.asarray(V, dtype=np.float64)
        single = V.ndim == 1
        if single:
            V = V[None, :]
        if V.shape[1] != self.cluster_centers_.shape[1]:
            raise ValueError(
                f"vector dim {V.shape[1]} != centroid dim {self.cluster_centers_.shape[1]}"
            )
        labels = _exact_sq_distances(V, self.cluster_centers_).argmin(axis=1)
        return labels[0] if single else labels

    def transform(self, V) -> np.ndarray:
        """Quantize: replace each vector by its assigned centroid."""
        return self.cluster_centers_[self.predict(np.atleast_2d(np.asarray(V)))]


# --- spec-level operations ---------------------------------------------------

def fit_kmeans(
    matrix: EmbeddingMatrix,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> Codebook:
    if len(matrix) == 0:
        raise ValueError("cannot fit a codebook on an empty embedding matrix")
    _, X = matrix.matrix()
    est = KMeansQuantizer(k=k, seed=seed, max_iters=max_iters, tol=tol).fit(X)
    centroids = est.cluster_centers_.astype(np.float32)
    centroids.flags.writeable = False
    return Codebook(
        modality=matrix.modality,
        k=k,
        dim=matrix.dim,
        centroids=centroids,
        inertia=est.inertia_,
    )


def assign(codebook: Codebook, vector) -> int:
    """Index of the nearest centroid (squared Euclidean, lowest index on ties)."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (codebook.dim,):
        raise ValueError(f"vector must have shape ({codebook.dim},), got {v.shape}")
    d2 = ((codebook.centroids.astype(np.float64) - v) ** 2).sum(-1)
    return int(d2.argmin())


def assign_matrix(codebook: Codebook, matrix: EmbeddingMatrix) -> dict[str, int]:
    """Cluster index per track id, insertion order preserved."""
    if matrix.dim != codebook.dim:
        raise ValueError("embedding dim does not match codebook dim")
    ids, X = matrix.matrix()
    if not ids:
        return {}
    labels = _exact_sq_distances(
        X.astype(np.float64), codebook.centroids.astype(np.float64)
    ).argmin(axis=1)
    return {tid: int(lbl) for tid, lbl in zip(ids, labels)}


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CBK_MAGIC)
        fh.write(
            struct.pack(
                "<BII", MODALITIES.index(codebook.modality), codebook.k, codebook.dim
            )
        )
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
        fh.write(struct.pack("<d", codebook.inertia))


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(CBK_MAGIC) + 9 or data[: len(CBK_MAGIC)] != CBK_MAGIC:
        raise CodebookError(f"{path.name}: not a TPCBK1 file")
    offset = len(CBK_MAGIC)
    mod_byte, k, dim = struct.unpack_from("<BII", data, offset)
    offset += 9
    if mod_byte >= len(MODALITIES):
        raise CodebookError(f"{path.name}: unknown modality byte {mod_byte}")
    expected = offset + 4 * k * dim + 8
    if len(data) != expected:
        raise CodebookError(
            f"{path.name}: expected {expected} bytes, found {len(data)} (truncated?)"
        )
    centroids = (
        np.frombuffer(data, dtype="<f4", count=k * dim, offset=offset)
        .reshape(k, dim)
        .copy()
    )
    centroids.flags.writeable = False
    (inertia,) = struct.unpack_from("<d", data, offset + 4 * k * dim)
    return Codebook(
        modality=MODALITIES[mod_byte], k=k, dim=dim, centroids=centroids, inertia=inertia
    )
