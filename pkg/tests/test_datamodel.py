import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgmatch.datamodel import (
    Dataset,
    GenrePreference,
    IntegrityError,
    InteractionTriplet,
    MicroVideo,
    MusicClip,
    Uploader,
    default_genre_names,
    genre_distribution,
    load_dataset,
    music_popularity_table,
    preference_entropy,
    save_dataset,
)
from conftest import make_dataset


class TestGenreDistribution:
    def test_half_hiphop_half_jazz(self):
        ds = make_dataset([0, 0, 1, 1], {"u0": ["m0", "m1", "m2", "m3"]})
        pref = genre_distribution(ds.uploader_by_id["u0"], ds)
        assert pref.probs.tolist() == [0.5, 0.5, 0.0, 0.0]

    def test_one_hot_history(self):
        ds = make_dataset([2, 2, 2], {"u0": ["m0", "m1", "m2"]})
        pref = genre_distribution(ds.uploader_by_id["u0"], ds)
        assert pref.probs.tolist() == [0.0, 0.0, 1.0, 0.0]

    def test_counting_oracle(self):
        # 6 clips with genre counts (1, 2, 3, 0); expected histogram computed
        # by direct counting over the history list.
        genres = [0, 1, 1, 2, 2, 2]
        history = [f"m{i}" for i in range(6)]
        ds = make_dataset(genres, {"u0": history})
        counts = Counter(ds.music_by_id[m].genre for m in history)
        expected = [counts.get(g, 0) / len(history) for g in range(4)]
        pref = genre_distribution(ds.uploader_by_id["u0"], ds)
        assert pref.probs.tolist() == expected == [1 / 6, 1 / 3, 1 / 2, 0.0]

    def test_empty_history_error(self):
        ds = make_dataset([0], {"u0": ["m0"]})
        with pytest.raises(IntegrityError, match="no interaction history"):
            genre_distribution(Uploader("u9", ()), ds)

    def test_dangling_music_id_error(self):
        ds = make_dataset([0], {"u0": ["m0"]})
        with pytest.raises(IntegrityError, match="unknown music"):
            genre_distribution(Uploader("u9", ("missing",)), ds)

    @given(st.permutations(list(range(8))))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant_and_normalized(self, order):
        genres = [0, 0, 1, 1, 2, 3, 3, 3]
        ds = make_dataset(genres, {"u0": [f"m{i}" for i in range(8)]})
        base = genre_distribution(ds.uploader_by_id["u0"], ds).probs
        permuted = Uploader("u0", tuple(f"m{i}" for i in order))
        shuffled = genre_distribution(permuted, ds).probs
        assert np.array_equal(base, shuffled)
        assert math.isclose(shuffled.sum(), 1.0, abs_tol=1e-12)


class TestPreferenceEntropy:
    def test_one_hot_is_zero(self):
        assert preference_entropy(GenrePreference([1.0, 0.0, 0.0, 0.0])) == 0.0

    def test_uniform_closed_form(self):
        # Closed form: entropy of uniform distribution over n is ln(n).
        value = preference_entropy(GenrePreference([0.25] * 4))
        assert value == pytest.approx(math.log(4), abs=1e-12)
        assert value == pytest.approx(1.3863, abs=5e-5)

    def test_two_point_closed_form(self):
        value = preference_entropy(GenrePreference([0.5, 0.5, 0.0, 0.0]))
        assert value == pytest.approx(math.log(2), abs=1e-12)
        assert value == pytest.approx(0.6931, abs=5e-5)

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_uniform_maximizes(self, weights):
        probs = np.array(weights) / sum(weights)
        probs = probs / probs.sum()
        value = preference_entropy(GenrePreference(probs))
        assert value <= math.log(len(probs)) + 1e-12
        if np.allclose(probs, 1.0 / len(probs)):
            assert value == pytest.approx(math.log(len(probs)), abs=1e-9)
        assert value >= 0.0

    def test_zero_exactly_for_one_hot(self):
        for g in range(4):
            probs = np.zeros(4)
            probs[g] = 1.0
            assert preference_entropy(GenrePreference(probs)) == 0.0
        assert preference_entropy(GenrePreference([0.9, 0.1, 0, 0])) > 0.0


class TestPopularityTable:
    def test_counts(self):
        ds = make_dataset(
            [0, 1],
            {"u0": ["m0", "m0", "m0"], "u1": ["m1"]},
            interactions=[("u0", "v0", "m0"), ("u0", "v1", "m0"), ("u0", "v2", "m0"), ("u1", "v3", "m1")],
        )
        table = music_popularity_table(ds)
        assert table["m0"] == 3
        assert table["m1"] == 1

    def test_clip_with_no_interactions_present_at_zero(self):
        ds = make_dataset([0, 1], {"u0": ["m0"]})
        table = music_popularity_table(ds)
        assert table["m1"] == 0

    def test_conserves_total_interactions(self):
        ds = make_dataset([0, 1, 2], {"u0": ["m0", "m1"], "u1": ["m1", "m2", "m2"]})
        table = music_popularity_table(ds)
        assert sum(table.values()) == len(ds.interactions)


class TestInvariants:
    def test_preference_must_sum_to_one(self):
        with pytest.raises(IntegrityError, match="sums to"):
            GenrePreference([0.5, 0.4])
        with pytest.raises(IntegrityError, match="negative"):
            GenrePreference([1.5, -0.5])

    def test_non_finite_feature_rejected(self):
        with pytest.raises(IntegrityError, match="non-finite"):
            MusicClip("m0", [1.0, float("nan")], 0)

    def test_bad_interaction_label(self):
        with pytest.raises(IntegrityError, match="y must be"):
            InteractionTriplet("u0", "v0", "m0", 2)

    def test_validate_catches_dangling_video_reference(self):
        ds = make_dataset([0], {"u0": ["m0"]})
        broken = Dataset(
            kind=ds.kind,
            dims=ds.dims,
            genre_names=ds.genre_names,
            videos=ds.videos,
            music=ds.music,
            uploaders=ds.uploaders,
            interactions=ds.interactions + (InteractionTriplet("u0", "ghost", "m0"),),
        )
        with pytest.raises(IntegrityError, match="unknown video"):
            broken.validate()

    def test_validate_catches_popularity_mismatch(self):
        ds = make_dataset([0], {"u0": ["m0"]})
        stale = Dataset(
            kind=ds.kind,
            dims=ds.dims,
            genre_names=ds.genre_names,
            videos=ds.videos,
            music=tuple(MusicClip(m.music_id, m.feature, m.genre, m.popularity + 1) for m in ds.music),
            uploaders=ds.uploaders,
            interactions=ds.interactions,
        )
        with pytest.raises(IntegrityError, match="popularity"):
            stale.validate()

    def test_features_are_read_only(self):
        ds = make_dataset([0], {"u0": ["m0"]})
        with pytest.raises(ValueError):
            ds.music[0].feature[0] = 99.0


class TestSerialization:
    def test_round_trip_equality(self, tmp_path):
        ds = make_dataset([0, 1, 2, 2], {"u0": ["m0", "m1"], "u1": ["m2", "m3", "m3"]})
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.kind == ds.kind
        assert loaded.dims == ds.dims
        assert loaded.genre_names == ds.genre_names
        assert [v.video_id for v in loaded.videos] == [v.video_id for v in ds.videos]
        for a, b in zip(loaded.music, ds.music):
            assert a.music_id == b.music_id
            assert a.genre == b.genre
            assert a.popularity == b.popularity
            assert np.array_equal(a.feature, b.feature)
        assert loaded.uploaders == ds.uploaders
        assert loaded.interactions == ds.interactions

    def test_header_is_first_line(self, tmp_path):
        import json

        ds = make_dataset([0], {"u0": ["m0"]})
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        first = json.loads(path.read_text().splitlines()[0])
        assert first["record"] == "header"
        assert first["kind"] == "UGC"
        assert first["N_g"] == 4
        assert first["genre_names"] == list(default_genre_names(4))

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"record": "uploader", "uploader_id": "u0", "history": []}\n')
        with pytest.raises(IntegrityError, match="header"):
            load_dataset(path)
