"""Track/playlist catalog: loading, validation, embedding files, chronological split.

Catalog directories hold two line-delimited JSON files, ``tracks.jsonl`` and
``playlists.jsonl`` (one record per line), plus any number of ``*.tpemb``
embedding matrices. Everything returned by the loaders is immutable and safe
to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

# Modality order is fixed everywhere: coarse (co-occurrence) to fine (audio).
MODALITIES = ("playlist", "semantic", "metadata", "lyrics", "audio")

EMB_MAGIC = b"TPEMB1"


class CatalogError(Exception):
    """Base class for catalog loading problems."""


class ParseError(CatalogError):
    """A record could not be parsed; message names file, line and field."""


class IntegrityError(CatalogError):
    """Records parsed but violate a cross-record invariant."""


class EmbeddingLoadError(CatalogError):
    """An embedding file is malformed or inconsistent."""


@dataclass(frozen=True)
class Track:
    track_id: str
    title: str
    artist: str
    album: str
    tags: tuple[str, ...] = ()
    year: int | None = None
    popularity: float | None = None
    lyrics: str | None = None

    def artist_names(self) -> frozenset[str]:
        """Individual artist names; the artist field may be comma-joined."""
        return frozenset(a.strip() for a in self.artist.split(",") if a.strip())


@dataclass(frozen=True)
class Playlist:
    playlist_id: str
    created_at: date
    track_ids: tuple[str, ...]


@dataclass(frozen=True)
class CatalogSplit:
    train_playlists: frozenset[str]
    test_playlists: frozenset[str]
    warm_tracks: frozenset[str]
    cold_tracks: frozenset[str]

    def to_json_obj(self) -> dict:
        return {
            "train_playlists": sorted(self.train_playlists),
            "test_playlists": sorted(self.test_playlists),
            "warm_tracks": sorted(self.warm_tracks),
            "cold_tracks": sorted(self.cold_tracks),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CatalogSplit":
        return cls(
            train_playlists=frozenset(obj["train_playlists"]),
            test_playlists=frozenset(obj["test_playlists"]),
            warm_tracks=frozenset(obj["warm_tracks"]),
            cold_tracks=frozenset(obj["cold_tracks"]),
        )


@dataclass
class Catalog:
    """Validated track and playlist tables, keyed by id."""

    tracks: dict[str, Track]
    playlists: dict[str, Playlist]

    def track(self, track_id: str) -> Track:
        try:
            return self.tracks[track_id]
        except KeyError:
            raise KeyError(f"unknown track id {track_id!r}") from None


class EmbeddingMatrix:
    """One modality's per-track vectors, float32, fixed insertion order."""

    def __init__(self, modality: str, dim: int, rows: dict[str, np.ndarray]):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.modality = modality
        self.dim = dim
        self.rows: dict[str, np.ndarray] = {}
        for track_id, vec in rows.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.shape != (dim,):
                raise ValueError(
                    f"row {track_id!r} has shape {arr.shape}, expected ({dim},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"row {track_id!r} contains non-finite values")
            arr.flags.writeable = False
            self.rows[track_id] = arr

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, track_id: str) -> bool:
        return track_id in self.rows

    def matrix(self) -> tuple[list[str], np.ndarray]:
        """Row ids and the stacked (n, dim) float32 array, insertion order."""
        ids = list(self.rows)
        if not ids:
            return ids, np.zeros((0, self.dim), dtype=np.float32)
        return ids, np.stack([self.rows[i] for i in ids])


# --- catalog files ----------------------------------------------------------

_TRACK_REQUIRED = ("track_id", "title", "artist", "album")


def _parse_track(obj: dict, where: str) -> Track:
    for fld in _TRACK_REQUIRED:
        if fld not in obj:
            raise ParseError(f"{where}: missing field {fld!r}")
        if not isinstance(obj[fld], str):
            raise ParseError(f"{where}: field {fld!r} must be a string")
    if not obj["title"].strip():
        raise ParseError(f"{where}: field 'title' must be non-empty")
    if not obj["artist"].strip():
        raise ParseError(f"{where}: field 'artist' must be non-empty")
    tags = obj.get("tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise ParseError(f"{where}: field 'tags' must be a list of strings")
    year = obj.get("year")
    if year is not None and not isinstance(year, int):
        raise ParseError(f"{where}: field 'year' must be an integer")
    popularity = obj.get("popularity")
    if popularity is not None:
        if not isinstance(popularity, (int, float)) or not 0 <= popularity <= 100:
            raise ParseError(f"{where}: field 'popularity' must be in [0, 100]")
        popularity = float(popularity)
    lyrics = obj.get("lyrics")
    if lyrics is not None and not isinstance(lyrics, str):
        raise ParseError(f"{where}: field 'lyrics' must be a string")
    return Track(
        track_id=obj["track_id"],
        title=obj["title"],
        artist=obj["artist"],
        album=obj["album"],
        tags=tuple(tags),
        year=year,
        popularity=popularity,
        lyrics=lyrics,
    )


def _parse_playlist(obj: dict, where: str) -> Playlist:
    for fld in ("playlist_id", "created_at", "track_ids"):
        if fld not in obj:
            raise ParseError(f"{where}: missing field {fld!r}")
    try:
        created = date.fromisoformat(obj["created_at"])
    except (TypeError, ValueError):
        raise ParseError(f"{where}: field 'created_at' must be YYYY-MM-DD") from None
    track_ids = obj["track_ids"]
    if (
        not isinstance(track_ids, list)
        or not track_ids
        or not all(isinstance(t, str) for t in track_ids)
    ):
        raise ParseError(f"{where}: field 'track_ids' must be a non-empty string list")
    return Playlist(
        playlist_id=obj["playlist_id"],
        created_at=created,
        track_ids=tuple(track_ids),
    )


def _read_jsonl(path: Path):
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path.name} line {lineno}: invalid JSON ({exc.msg})")
            if not isinstance(obj, dict):
                raise ParseError(f"{path.name} line {lineno}: record must be an object")
            yield lineno, obj


def load_catalog(path: str | Path) -> Catalog:
    """Load and validate ``tracks.jsonl`` + ``playlists.jsonl`` under *path*.

    Raises ParseError naming file/line/field for malformed records and
    IntegrityError for duplicate track ids or dangling playlist references.
    """
    root = Path(path)
    tracks_path = root / "tracks.jsonl"
    playlists_path = root / "playlists.jsonl"
    for p in (tracks_path, playlists_path):
        if not p.is_file():
            raise CatalogError(f"missing catalog file {p}")

    tracks: dict[str, Track] = {}
    for lineno, obj in _read_jsonl(tracks_path):
        track = _parse_track(obj, f"tracks.jsonl line {lineno}")
        if track.track_id in tracks:
            raise IntegrityError(
                f"tracks.jsonl line {lineno}: duplicate track_id {track.track_id!r}"
            )
        tracks[track.track_id] = track

    playlists: dict[str, Playlist] = {}
    for lineno, obj in _read_jsonl(playlists_path):
        pl = _parse_playlist(obj, f"playlists.jsonl line {lineno}")
        if pl.playlist_id in playlists:
            raise IntegrityError(
                f"playlists.jsonl line {lineno}: duplicate playlist_id {pl.playlist_id!r}"
            )
        for tid in pl.track_ids:
            if tid not in tracks:
                raise IntegrityError(
                    f"playlists.jsonl line {lineno}: playlist {pl.playlist_id!r} "
                    f"references unknown track {tid!r}"
                )
        playlists[pl.playlist_id] = pl

    return Catalog(tracks=tracks, playlists=playlists)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "tracks.jsonl").open("w", encoding="utf-8") as fh:
        for track in catalog.tracks.values():
            obj = {
                "track_id": track.track_id,
                "title": track.title,
                "artist": track.artist,
                "album": track.album,
                "tags": list(track.tags),
            }
            if track.year is not None:
                obj["year"] = track.year
            if track.popularity is not None:
                obj["popularity"] = track.popularity
            if track.lyrics is not None:
                obj["lyrics"] = track.lyrics
            fh.write(json.dumps(obj) + "\n")
    with (root / "playlists.jsonl").open("w", encoding="utf-8") as fh:
        for pl in catalog.playlists.values():
            fh.write(
                json.dumps(
                    {
                        "playlist_id": pl.playlist_id,
                        "created_at": pl.created_at.isoformat(),
                        "track_ids": list(pl.track_ids),
                    }
                )
                + "\n"
            )


# --- embedding files --------------------------------------------------------

def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write the binary little-endian `TPEMB1` format (lossless for float32)."""
    path = Path(path)
    mod_byte = MODALITIES.index(matrix.modality)
    with path.open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<BII", mod_byte, matrix.dim, len(matrix.rows)))
        for track_id, vec in matrix.rows.items():
            encoded = track_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(
    path: str | Path,
    modality: str | None = None,
    known_ids: set[str] | None = None,
) -> EmbeddingMatrix:
    """Read a `TPEMB1` file back, verifying header, finiteness and track ids.

    *modality*, when given, must match the file's modality byte. *known_ids*,
    when given, restricts row ids to a known catalog.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(EMB_MAGIC) + 9 or data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise EmbeddingLoadError(f"{path.name}: not a TPEMB1 file")
    offset = len(EMB_MAGIC)
    mod_byte, dim, n_rows = struct.unpack_from("<BII", data, offset)
    offset += 9
    if mod_byte >= len(MODALITIES):
        raise EmbeddingLoadError(f"{path.name}: unknown modality byte {mod_byte}")
    file_modality = MODALITIES[mod_byte]
    if modality is not None and modality != file_modality:
        raise EmbeddingLoadError(
            f"{path.name}: expected modality {modality!r}, file holds {file_modality!r}"
        )

    rows: dict[str, np.ndarray] = {}
    row_bytes = 4 * dim
    for _ in range(n_rows):
        if offset + 2 > len(data):
            raise EmbeddingLoadError(f"{path.name}: truncated file")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + row_bytes > len(data):
            raise EmbeddingLoadError(f"{path.name}: truncated file")
        track_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += row_bytes
        if track_id in rows:
            raise EmbeddingLoadError(f"{path.name}: duplicate row for {track_id!r}")
        if not np.all(np.isfinite(vec)):
            raise EmbeddingLoadError(
                f"{path.name}: non-finite values in row for track {track_id!r}"
            )
        if known_ids is not None and track_id not in known_ids:
            raise EmbeddingLoadError(f"{path.name}: unknown track id {track_id!r}")
        rows[track_id] = vec
    if offset != len(data):
        raise EmbeddingLoadError(f"{path.name}: trailing bytes after {n_rows} rows")
    return EmbeddingMatrix(file_modality, dim, rows)


# --- chronological split ----------------------------------------------------

def chronological_split(
    playlists: dict[str, Playlist] | list[Playlist],
    test_size: int,
    seed: int = 0,
) -> CatalogSplit:
    """Hold out *test_size* playlists sampled from the latest creation date.

    Cold tracks are those appearing in test playlists but in no train playlist.
    """
    pls = list(playlists.values()) if isinstance(playlists, dict) else list(playlists)
    if not pls:
        raise ValueError("no playlists to split")
    last_date = max(p.created_at for p in pls)
    last_day_ids = sorted(p.playlist_id for p in pls if p.created_at == last_date)
    if test_size > len(last_day_ids):
        raise ValueError(
            f"test_size {test_size} exceeds the {len(last_day_ids)} playlists "
            f"dated {last_date.isoformat()}"
        )
    rng = np.random.default_rng(seed)
    picked = rng.permutation(len(last_day_ids))[:test_size]
    test_ids = frozenset(last_day_ids[i] for i in picked)
    train_ids = frozenset(p.playlist_id for p in pls) - test_ids

    train_tracks: set[str] = set()
    test_tracks: set[str] = set()
    for p in pls:
        target = test_tracks if p.playlist_id in test_ids else train_tracks
        target.update(p.track_ids)
    cold = frozenset(test_tracks - train_tracks)
    warm = frozenset(test_tracks & train_tracks)
    return CatalogSplit(
        train_playlists=train_ids,
        test_playlists=frozenset(test_ids),
        warm_tracks=warm,
        cold_tracks=cold,
    )


def render_text_doc(track: Track) -> str:
    """Flat text document for sparse retrieval: title/artist/album/tags/year.

    Whitespace is collapsed, so the output never contains tabs or newlines.
    """
    parts = [track.title, "by", track.artist, "from", track.album]
    parts.extend(track.tags)
    if track.year is not None:
        parts.append(str(track.year))
    return " ".join(" ".join(parts).split())
