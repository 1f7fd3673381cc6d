"""Shared fixtures: small hand-built datasets and generator configs."""

import numpy as np
import pytest

from bgmatch.datamodel import (
    UGC,
    Dataset,
    InteractionTriplet,
    MicroVideo,
    MusicClip,
    Uploader,
    default_genre_names,
    recount_popularity,
)
from bgmatch.synthgen import GenConfig


def make_dataset(clip_genres, histories, interactions=None, n_genres=4, F_video=3, F_music=2, kind=UGC):
    """Build a tiny valid dataset.

    ``clip_genres``: genre index per clip m0, m1, ...
    ``histories``: dict uploader_id -> list of music ids.
    ``interactions``: optional list of (uploader, video, music) triples; when
    omitted, one interaction per history entry is synthesized.
    """
    rng = np.random.default_rng(0)
    music = [
        MusicClip(f"m{i}", rng.normal(size=F_music), g) for i, g in enumerate(clip_genres)
    ]
    uploaders = [Uploader(u, tuple(h)) for u, h in histories.items()]
    if interactions is None:
        interactions = []
        v = 0
        for u, hist in histories.items():
            for mid in hist:
                interactions.append((u, f"v{v}", mid))
                v += 1
    videos = [MicroVideo(vid, rng.normal(size=F_video), u) for (u, vid, _) in interactions]
    triplets = tuple(InteractionTriplet(u, vid, mid, 1) for (u, vid, mid) in interactions)
    ds = Dataset(
        kind=kind,
        dims=(F_video, F_music),
        genre_names=default_genre_names(n_genres),
        videos=tuple(videos),
        music=recount_popularity(music, triplets),
        uploaders=tuple(uploaders),
        interactions=triplets,
    )
    ds.validate()
    return ds


@pytest.fixture
def small_config():
    return GenConfig(
        n_music=40,
        n_videos=200,
        n_uploaders=20,
        n_pgc_pairs=80,
        F_video=10,
        F_music=8,
        latent_dim_true=6,
        seed=7,
    )
