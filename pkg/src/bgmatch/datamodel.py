"""Core entities for music-video matching data.

A :class:`Dataset` bundles uploaders, micro-videos, music clips, and the
positive interactions between them. UGC datasets carry uploader histories,
which are the source of the genre-preference confounder; PGC datasets are
plain expert-matched pairs with no uploader attached.

Everything here is immutable after construction and safe to share across
threads. Features are plain 1-D numpy arrays with their write flag cleared.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

UGC = "UGC"
PGC = "PGC"

DEFAULT_GENRE_NAMES = ("hiphop", "jazz", "classical", "reggae", "pop", "metal")

# Tolerance for probability vectors summing to one.
_PROB_ATOL = 1e-9


class IntegrityError(ValueError):
    """A dataset violated referential integrity or a field invariant."""


def default_genre_names(n_genres: int) -> tuple[str, ...]:
    """Genre name table for ``n_genres`` genres, reusing the stock six names."""
    if n_genres <= len(DEFAULT_GENRE_NAMES):
        return DEFAULT_GENRE_NAMES[:n_genres]
    extra = tuple(f"genre{i}" for i in range(len(DEFAULT_GENRE_NAMES), n_genres))
    return DEFAULT_GENRE_NAMES + extra


def as_feature(values, dim: int | None = None, what: str = "feature") -> np.ndarray:
    """Validate and freeze a feature vector.

    Returns a read-only 1-D float64 array. Raises :class:`IntegrityError` on
    non-finite entries, wrong rank, or (when ``dim`` is given) wrong length.
    """
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise IntegrityError(f"{what} must be a flat vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise IntegrityError(f"{what} contains non-finite entries")
    if dim is not None and arr.shape[0] != dim:
        raise IntegrityError(f"{what} has dimension {arr.shape[0]}, expected {dim}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MusicClip:
    """A background music clip: content feature, genre index, usage count."""

    music_id: str
    feature: np.ndarray
    genre: int
    popularity: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature", as_feature(self.feature, what=f"music {self.music_id} feature"))
        if self.genre < 0:
            raise IntegrityError(f"music {self.music_id} has negative genre index")
        if self.popularity < 0:
            raise IntegrityError(f"music {self.music_id} has negative popularity")


@dataclass(frozen=True)
class MicroVideo:
    """A micro-video with its visual feature. ``uploader_id`` is None for PGC."""

    video_id: str
    feature: np.ndarray
    uploader_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature", as_feature(self.feature, what=f"video {self.video_id} feature"))


@dataclass(frozen=True)
class Uploader:
    """An uploader and the music ids they selected (their history)."""

    uploader_id: str
    history: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))


@dataclass(frozen=True)
class GenrePreference:
    """A probability vector over genres; the confounder representation."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 1:
            raise IntegrityError(f"preference must be a flat vector, got shape {arr.shape}")
        if np.any(arr < 0):
            raise IntegrityError("preference has negative entries")
        total = float(arr.sum())
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=_PROB_ATOL):
            raise IntegrityError(f"preference sums to {total!r}, expected 1")
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class InteractionTriplet:
    """One (uploader, video, music, y) record. y=1 marks a positive match."""

    uploader_id: str | None
    video_id: str
    music_id: str
    y: int = 1

    def __post_init__(self):
        if self.y not in (0, 1):
            raise IntegrityError(f"interaction y must be 0 or 1, got {self.y}")


@dataclass
class Dataset:
    """An immutable catalog of videos, music, uploaders, and interactions.

    ``kind`` is ``"UGC"`` or ``"PGC"``; ``dims`` is ``(F_video, F_music)``.
    Lookup maps are built eagerly; call :meth:`validate` to check referential
    integrity and the popularity invariant.
    """

    kind: str
    dims: tuple[int, int]
    genre_names: tuple[str, ...]
    videos: tuple[MicroVideo, ...] = ()
    music: tuple[MusicClip, ...] = ()
    uploaders: tuple[Uploader, ...] = ()
    interactions: tuple[InteractionTriplet, ...] = ()
    video_by_id: dict = field(init=False, repr=False)
    music_by_id: dict = field(init=False, repr=False)
    uploader_by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in (UGC, PGC):
            raise IntegrityError(f"unknown dataset kind {self.kind!r}")
        self.videos = tuple(self.videos)
        self.music = tuple(self.music)
        self.uploaders = tuple(self.uploaders)
        self.interactions = tuple(self.interactions)
        self.genre_names = tuple(self.genre_names)
        self.video_by_id = {v.video_id: v for v in self.videos}
        self.music_by_id = {m.music_id: m for m in self.music}
        self.uploader_by_id = {u.uploader_id: u for u in self.uploaders}
        if len(self.video_by_id) != len(self.videos):
            raise IntegrityError("duplicate video ids")
        if len(self.music_by_id) != len(self.music):
            raise IntegrityError("duplicate music ids")
        if len(self.uploader_by_id) != len(self.uploaders):
            raise IntegrityError("duplicate uploader ids")

    @property
    def n_genres(self) -> int:
        return len(self.genre_names)

    @property
    def F_video(self) -> int:
        return self.dims[0]

    @property
    def F_music(self) -> int:
        return self.dims[1]

    def validate(self, check_popularity: bool = True) -> None:
        """Raise :class:`IntegrityError` on any broken invariant."""
        fv, fm = self.dims
        for v in self.videos:
            if v.feature.shape[0] != fv:
                raise IntegrityError(f"video {v.video_id} feature dim {v.feature.shape[0]} != {fv}")
            if self.kind == UGC:
                if v.uploader_id is None or v.uploader_id not in self.uploader_by_id:
                    raise IntegrityError(f"video {v.video_id} references unknown uploader {v.uploader_id!r}")
        for m in self.music:
            if m.feature.shape[0] != fm:
                raise IntegrityError(f"music {m.music_id} feature dim {m.feature.shape[0]} != {fm}")
            if m.genre >= self.n_genres:
                raise IntegrityError(f"music {m.music_id} genre {m.genre} out of range for {self.n_genres} genres")
        for u in self.uploaders:
            for mid in u.history:
                if mid not in self.music_by_id:
                    raise IntegrityError(f"uploader {u.uploader_id} history references unknown music {mid!r}")
        for t in self.interactions:
            if t.video_id not in self.video_by_id:
                raise IntegrityError(f"interaction references unknown video {t.video_id!r}")
            if t.music_id not in self.music_by_id:
                raise IntegrityError(f"interaction references unknown music {t.music_id!r}")
            if self.kind == UGC and t.uploader_id not in self.uploader_by_id:
                raise IntegrityError(f"interaction references unknown uploader {t.uploader_id!r}")
        if check_popularity:
            counts = music_popularity_table(self)
            for m in self.music:
                if m.popularity != counts[m.music_id]:
                    raise IntegrityError(
                        f"music {m.music_id} stores popularity {m.popularity}, "
                        f"interactions give {counts[m.music_id]}"
                    )


def recount_popularity(
    music: Iterable[MusicClip], interactions: Iterable[InteractionTriplet]
) -> tuple[MusicClip, ...]:
    """Return clips with popularity set to their interaction counts."""
    counts: dict[str, int] = {}
    for t in interactions:
        counts[t.music_id] = counts.get(t.music_id, 0) + 1
    return tuple(
        MusicClip(m.music_id, m.feature, m.genre, counts.get(m.music_id, 0)) for m in music
    )


def genre_distribution(uploader: Uploader, dataset: Dataset) -> GenrePreference:
    """Empirical genre histogram of an uploader's selected music, normalized.

    Raises :class:`IntegrityError` if the uploader has no interaction history
    or the history references an unknown clip.
    """
    if not uploader.history:
        raise IntegrityError(f"uploader {uploader.uploader_id} has no interaction history")
    counts = np.zeros(dataset.n_genres, dtype=np.float64)
    for mid in uploader.history:
        clip = dataset.music_by_id.get(mid)
        if clip is None:
            raise IntegrityError(
                f"uploader {uploader.uploader_id} history references unknown music {mid!r}"
            )
        counts[clip.genre] += 1.0
    return GenrePreference(counts / len(uploader.history))


def preference_entropy(pref: GenrePreference) -> float:
    """Shannon entropy of a genre preference, in nats. 0*ln(0) counts as 0."""
    p = pref.probs
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def music_popularity_table(dataset: Dataset) -> dict[str, int]:
    """Interaction count per music clip; every clip appears (possibly at 0)."""
    counts = {m.music_id: 0 for m in dataset.music}
    for t in dataset.interactions:
        if t.music_id not in counts:
            raise IntegrityError(f"interaction references unknown music {t.music_id!r}")
        counts[t.music_id] += 1
    return counts


# ---------------------------------------------------------------------------
# Serialization: line-delimited JSON, one record per line, header first.
# ---------------------------------------------------------------------------


def _float_list(arr: np.ndarray) -> list[float]:
    return [float(x) for x in arr]


def dataset_to_lines(dataset: Dataset) -> list[str]:
    header = {
        "record": "header",
        "kind": dataset.kind,
        "F_video": dataset.dims[0],
        "F_music": dataset.dims[1],
        "N_g": dataset.n_genres,
        "genre_names": list(dataset.genre_names),
    }
    lines = [json.dumps(header)]
    for v in dataset.videos:
        lines.append(
            json.dumps(
                {
                    "record": "video",
                    "video_id": v.video_id,
                    "uploader_id": v.uploader_id,
                    "feature": _float_list(v.feature),
                }
            )
        )
    for m in dataset.music:
        lines.append(
            json.dumps(
                {
                    "record": "music",
                    "music_id": m.music_id,
                    "genre": m.genre,
                    "popularity": m.popularity,
                    "feature": _float_list(m.feature),
                }
            )
        )
    for u in dataset.uploaders:
        lines.append(
            json.dumps(
                {"record": "uploader", "uploader_id": u.uploader_id, "history": list(u.history)}
            )
        )
    for t in dataset.interactions:
        lines.append(
            json.dumps(
                {
                    "record": "interaction",
                    "uploader_id": t.uploader_id,
                    "video_id": t.video_id,
                    "music_id": t.music_id,
                    "y": t.y,
                }
            )
        )
    return lines


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text("\n".join(dataset_to_lines(dataset)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Parse a line-delimited dataset file written by :func:`save_dataset`."""
    videos: list[MicroVideo] = []
    music: list[MusicClip] = []
    uploaders: list[Uploader] = []
    interactions: list[InteractionTriplet] = []
    header: Mapping | None = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("record")
        if kind == "header":
            header = rec
        elif kind == "video":
            videos.append(MicroVideo(rec["video_id"], rec["feature"], rec["uploader_id"]))
        elif kind == "music":
            music.append(MusicClip(rec["music_id"], rec["feature"], rec["genre"], rec["popularity"]))
        elif kind == "uploader":
            uploaders.append(Uploader(rec["uploader_id"], tuple(rec["history"])))
        elif kind == "interaction":
            interactions.append(
                InteractionTriplet(rec["uploader_id"], rec["video_id"], rec["music_id"], rec["y"])
            )
        else:
            raise IntegrityError(f"{path}:{lineno}: unknown record type {kind!r}")
    if header is None:
        raise IntegrityError(f"{path}: missing header record")
    ds = Dataset(
        kind=header["kind"],
        dims=(header["F_video"], header["F_music"]),
        genre_names=tuple(header["genre_names"]),
        videos=tuple(videos),
        music=tuple(music),
        uploaders=tuple(uploaders),
        interactions=tuple(interactions),
    )
    ds.validate()
    return ds
