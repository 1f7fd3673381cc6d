import math

import numpy as np
import pytest
import torch

from bgmatch.datamodel import PGC, UGC, GenrePreference, MusicClip
from bgmatch.nncore import (
    Batch,
    DTYPE,
    cross_generation_from_posteriors,
    parameter_fingerprint,
)
from bgmatch.synthgen import GenConfig, generate_pgc, generate_ugc, split_strong_generalization
from bgmatch.student import (
    RankingResult,
    StudentHyper,
    StudentModel,
    batch_average_preference,
    build_training_arrays,
    deconfound,
    genre_context,
    global_average_preference,
    load_student,
    rank_from_scores,
    rank_music,
    save_student,
    student_loss,
    train_student,
)
from bgmatch.teacher import (
    FrozenModelError,
    KindMismatchError,
    TeacherHyper,
    train_teacher,
)
from bgmatch.synthgen import materialize_split


@pytest.fixture(scope="module")
def world():
    cfg = GenConfig(n_music=60, n_videos=400, n_uploaders=24, n_pgc_pairs=200,
                    F_video=12, F_music=10, latent_dim_true=6, seed=33)
    ugc, truth = generate_ugc(cfg)
    pgc = generate_pgc(cfg)
    split = split_strong_generalization(ugc, seed=1, n_strata=5)
    return {"cfg": cfg, "ugc": ugc, "truth": truth, "pgc": pgc, "split": split}


@pytest.fixture(scope="module")
def frozen_teacher(world):
    hyper = TeacherHyper(latent_dim=6, epochs=6, batch_size=64, n_hard=10)
    return train_teacher(world["pgc"], hyper, seed=0)


def small_student(mode="batch_average", seed=15, n_genres=6, F_video=12, F_music=10, d=6, **kw):
    hyper = StudentHyper(latent_dim=d, deconfounder_mode=mode, n_hard=10,
                         kt_weight_video=kw.pop("kt_v", 0.0), kt_weight_music=kw.pop("kt_m", 0.0), **kw)
    gen = torch.Generator().manual_seed(seed)
    return StudentModel(F_video, F_music, n_genres, hyper, gen)


def make_batch(world, idx, view_tag="train"):
    view = materialize_split(world["ugc"], world["split"], view_tag)
    arrays = build_training_arrays(view)
    return arrays.batch(np.array(idx))


class TestBatchAveragePreference:
    def test_single_uploader(self):
        pref = batch_average_preference([GenrePreference([0.2, 0.8, 0.0, 0.0])])
        assert pref.tolist() == [0.2, 0.8, 0.0, 0.0]

    def test_two_uploaders_symmetric(self):
        pref = batch_average_preference(
            [GenrePreference([1.0, 0, 0, 0]), GenrePreference([0, 1.0, 0, 0])]
        )
        assert pref.tolist() == [0.5, 0.5, 0.0, 0.0]

    def test_repeated_uploaders_count_once(self):
        rows = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        pref = batch_average_preference(rows, uploader_ids=("a", "a", "b"))
        assert pref.tolist() == [0.5, 0.5]

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            batch_average_preference(np.zeros((0, 4)))

    def test_whole_dataset_batch_equals_global_average(self, world):
        view = materialize_split(world["ugc"], world["split"], "train")
        arrays = build_training_arrays(view)
        batch_avg = batch_average_preference(arrays.prefs.numpy(), arrays.uploader_ids)
        global_avg = global_average_preference(view)
        assert np.max(np.abs(batch_avg - global_avg)) <= 1e-12

    def test_mc_estimator_unbiased(self, world):
        # 1,000 batches of 64 uploaders drawn uniformly: the mean of batch
        # averages approaches the global average within 3 sigma / sqrt(n).
        view = materialize_split(world["ugc"], world["split"], "train")
        from bgmatch.datamodel import genre_distribution

        uploaders = sorted(view.uploaders, key=lambda u: u.uploader_id)
        prefs = np.stack([genre_distribution(u, view).probs for u in uploaders])
        global_avg = global_average_preference(view)
        rng = np.random.default_rng(77)
        batch_means = np.stack([
            prefs[rng.integers(len(uploaders), size=64)].mean(axis=0) for _ in range(1000)
        ])
        gap = np.abs(batch_means.mean(axis=0) - global_avg)
        bound = 3 * batch_means.std(axis=0, ddof=1) / math.sqrt(1000)
        assert np.all(gap <= bound), f"gap {gap}, bound {bound}"


class TestGlobalAveragePreference:
    def test_identical_uploaders(self):
        from conftest import make_dataset

        ds = make_dataset([0, 1], {"u0": ["m0", "m1"], "u1": ["m0", "m1"]})
        avg = global_average_preference(ds)
        assert avg.tolist() == [0.5, 0.5, 0.0, 0.0]

    def test_invariant_to_uploader_order(self, world):
        view = materialize_split(world["ugc"], world["split"], "train")
        from bgmatch.datamodel import Dataset

        reversed_view = Dataset(
            kind=view.kind, dims=view.dims, genre_names=view.genre_names,
            videos=view.videos, music=view.music,
            uploaders=tuple(reversed(view.uploaders)), interactions=view.interactions,
        )
        assert np.array_equal(global_average_preference(view), global_average_preference(reversed_view))

    def test_matches_two_pass_oracle(self, world):
        view = materialize_split(world["ugc"], world["split"], "train")
        from bgmatch.datamodel import genre_distribution

        total = np.zeros(view.n_genres)
        for u in view.uploaders:
            total += genre_distribution(u, view).probs
        naive = total / len(view.uploaders)
        assert np.max(np.abs(global_average_preference(view) - naive)) <= 1e-12


class TestDeconfound:
    def test_one_hot_selects_table_column(self):
        table = torch.randn(4, 6, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
        pref = np.zeros(6)
        pref[3] = 1.0
        ctx = genre_context(table, pref)
        assert torch.allclose(ctx, table[:, 3])

    def test_zero_table_gives_zero_context(self):
        table = torch.zeros(4, 6, dtype=DTYPE)
        z_m = torch.randn(5, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(2))
        out = deconfound(z_m, np.full(6, 1 / 6), table)
        assert out.shape == (5, 8)
        assert torch.equal(out[:, :4], z_m)
        assert torch.equal(out[:, 4:], torch.zeros(5, 4, dtype=DTYPE))

    def test_linear_in_preference(self):
        gen = torch.Generator().manual_seed(3)
        table = torch.randn(4, 6, dtype=DTYPE, generator=gen)
        p1 = np.random.default_rng(0).dirichlet(np.ones(6))
        p2 = np.random.default_rng(1).dirichlet(np.ones(6))
        mixed = genre_context(table, (p1 + p2) / 2)
        averaged = (genre_context(table, p1) + genre_context(table, p2)) / 2
        assert torch.allclose(mixed, averaged, atol=1e-15)


class TestStudentLoss:
    def test_reduces_to_backbone_without_kt(self, world):
        model = small_student(mode="off")
        model.eval()
        batch = make_batch(world, [0, 1, 2, 3])
        d = model.latent_dim
        gen = torch.Generator().manual_seed(8)
        nv = torch.randn(4, d, dtype=DTYPE, generator=gen)
        nm = torch.randn(4, d, dtype=DTYPE, generator=gen)
        comps = student_loss(model, None, batch, nv, nm)
        backbone = cross_generation_from_posteriors(
            model.video_encoder(batch.video),
            model.music_encoder(batch.music),
            model.video_decoder,
            model.music_decoder,
            batch.video,
            batch.music,
            nv,
            nm,
            margin=model.hyper.margin,
            n_hard=model.hyper.n_hard,
            m2v_weight=model.hyper.m2v_weight,
            recon_weight=model.hyper.recon_weight,
            kl_weight=model.hyper.kl_weight,
        )
        # Bit-for-bit: identical ops in identical order.
        assert float(comps["total"]) == float(backbone["total"])
        assert float(comps["kt_video"]) == 0.0
        assert float(comps["kt_music"]) == 0.0

    def test_ablation_identity_over_batches(self, world):
        model = small_student(mode="off", seed=99)
        model.eval()
        gen = torch.Generator().manual_seed(13)
        rng = np.random.default_rng(5)
        view = materialize_split(world["ugc"], world["split"], "train")
        arrays = build_training_arrays(view)
        n = len(arrays.uploader_ids)
        d = model.latent_dim
        for _ in range(10):
            idx = rng.choice(n, size=8, replace=False)
            batch = arrays.batch(idx)
            nv = torch.randn(8, d, dtype=DTYPE, generator=gen)
            nm = torch.randn(8, d, dtype=DTYPE, generator=gen)
            comps = student_loss(model, None, batch, nv, nm)
            backbone = cross_generation_from_posteriors(
                model.video_encoder(batch.video), model.music_encoder(batch.music),
                model.video_decoder, model.music_decoder,
                batch.video, batch.music, nv, nm,
                margin=model.hyper.margin, n_hard=model.hyper.n_hard,
                m2v_weight=model.hyper.m2v_weight, recon_weight=model.hyper.recon_weight,
                kl_weight=model.hyper.kl_weight,
            )
            assert float(comps["total"]) == float(backbone["total"])

    def test_kt_zero_when_posteriors_match_teacher(self, world, frozen_teacher):
        # Copy the teacher encoders into the student: the transfer KLs must
        # vanish exactly.
        model = small_student(mode="off", kt_v=1.0, kt_m=1.0, dropout=0.0)
        model.video_encoder.load_state_dict(frozen_teacher.video_encoder.state_dict())
        model.music_encoder.load_state_dict(frozen_teacher.music_encoder.state_dict())
        model.eval()
        batch = make_batch(world, [0, 1, 2])
        d = model.latent_dim
        comps = student_loss(model, frozen_teacher, batch,
                             torch.zeros(3, d, dtype=DTYPE), torch.zeros(3, d, dtype=DTYPE))
        assert float(comps["kt_video"]) == pytest.approx(0.0, abs=1e-12)
        assert float(comps["kt_music"]) == pytest.approx(0.0, abs=1e-12)

    def test_kt_direction_switch(self, world, frozen_teacher):
        batch = make_batch(world, [0, 1, 2, 3])
        d = 6
        nv = torch.zeros(4, d, dtype=DTYPE)
        nm = torch.zeros(4, d, dtype=DTYPE)
        values = {}
        for direction in ("teacher_to_student", "student_to_teacher"):
            model = small_student(mode="off", kt_v=1.0, kt_m=1.0, kt_direction=direction)
            model.eval()
            comps = student_loss(model, frozen_teacher, batch, nv, nm)
            values[direction] = float(comps["kt_video"])
        assert values["teacher_to_student"] != values["student_to_teacher"]

    def test_requires_teacher_when_kt_positive(self, world):
        model = small_student(mode="off", kt_v=1.0)
        batch = make_batch(world, [0, 1])
        with pytest.raises(ValueError, match="teacher"):
            student_loss(model, None, batch, torch.zeros(2, 6, dtype=DTYPE), torch.zeros(2, 6, dtype=DTYPE))

    def test_rejects_pgc_batch(self, world):
        model = small_student()
        batch = Batch(PGC, torch.zeros(2, 12, dtype=DTYPE), torch.zeros(2, 10, dtype=DTYPE))
        with pytest.raises(KindMismatchError):
            student_loss(model, None, batch, torch.zeros(2, 6, dtype=DTYPE), torch.zeros(2, 6, dtype=DTYPE))

    def test_rejects_unfrozen_teacher(self, world):
        from bgmatch.teacher import TeacherModel

        raw_teacher = TeacherModel(12, 10, TeacherHyper(latent_dim=6), torch.Generator().manual_seed(0))
        model = small_student(mode="off", kt_v=1.0)
        batch = make_batch(world, [0, 1])
        with pytest.raises(FrozenModelError):
            student_loss(model, raw_teacher, batch, torch.zeros(2, 6, dtype=DTYPE), torch.zeros(2, 6, dtype=DTYPE))

    def test_hand_computed_deconfounded_pair(self, world):
        # Independent numpy recomputation with the deconfounder active,
        # d=2 latents and a two-pair batch.
        model = small_student(seed=55, d=2)
        model.eval()
        batch = make_batch(world, [5, 9])
        nv = torch.zeros(2, 2, dtype=DTYPE)
        nm = torch.zeros(2, 2, dtype=DTYPE)
        comps = student_loss(model, None, batch, nv, nm)

        def np_encode(enc, x):
            h = np.tanh(x @ enc.hidden.weight.detach().numpy().T + enc.hidden.bias.detach().numpy())
            mean = h @ enc.mean_head.weight.detach().numpy().T + enc.mean_head.bias.detach().numpy()
            logvar = h @ enc.log_var_head.weight.detach().numpy().T + enc.log_var_head.bias.detach().numpy()
            return mean, np.exp(0.5 * logvar)

        def np_decode(dec, z):
            lin1, _, lin2 = dec.net
            h = np.tanh(z @ lin1.weight.detach().numpy().T + lin1.bias.detach().numpy())
            return h @ lin2.weight.detach().numpy().T + lin2.bias.detach().numpy()

        v = batch.video.numpy()
        m = batch.music.numpy()
        mu_v, sd_v = np_encode(model.video_encoder, v)
        mu_m, sd_m = np_encode(model.music_encoder, m)
        z_v, z_m = mu_v, mu_m
        prefs = batch.prefs.numpy()
        seen = {}
        for i, uid in enumerate(batch.uploader_ids):
            seen.setdefault(uid, i)
        avg = prefs[sorted(seen.values())].mean(axis=0)
        table = model.genre_table.detach().numpy()
        ctx = table @ avg
        z_dec = np.concatenate([z_m, np.tile(ctx, (2, 1))], axis=1)
        proj = model.match_projection
        z_match = z_dec @ proj.weight.detach().numpy().T + proj.bias.detach().numpy()
        recon_video = np.mean((np_decode(model.video_decoder, z_dec) - v) ** 2)
        recon_music = np.mean((np_decode(model.music_decoder, z_v) - m) ** 2)
        kl_v = np.mean(0.5 * np.sum(mu_v**2 + sd_v**2 - 1 - 2 * np.log(sd_v), axis=1))
        kl_m = np.mean(0.5 * np.sum(mu_m**2 + sd_m**2 - 1 - 2 * np.log(sd_m), axis=1))
        scores = z_v @ z_match.T
        margin = model.hyper.margin
        hinge = lambda pos, neg: max(0.0, margin - pos + neg)
        matching = np.mean([
            hinge(scores[0, 0], scores[0, 1]) + hinge(scores[0, 0], scores[1, 0]),
            hinge(scores[1, 1], scores[1, 0]) + hinge(scores[1, 1], scores[0, 1]),
        ])
        total = recon_video + recon_music + kl_v + kl_m + matching
        assert float(comps["recon_video"]) == pytest.approx(recon_video, abs=1e-6)
        assert float(comps["recon_music"]) == pytest.approx(recon_music, abs=1e-6)
        assert float(comps["matching"]) == pytest.approx(matching, abs=1e-6)
        assert float(comps["total"]) == pytest.approx(total, abs=1e-6)

    def test_ips_weights_applied(self, world):
        batch = make_batch(world, [0, 1, 2, 3])
        base_model = small_student(mode="off", seed=70)
        ips_model = small_student(mode="off", seed=70, ips=True)
        base_model.eval()
        ips_model.eval()
        d = 6
        nv = torch.zeros(4, d, dtype=DTYPE)
        nm = torch.zeros(4, d, dtype=DTYPE)
        plain = student_loss(base_model, None, batch, nv, nm)
        weighted = student_loss(ips_model, None, batch, nv, nm)
        # Same encoders, so only the matching term changes.
        assert float(plain["recon_video"]) == float(weighted["recon_video"])
        assert float(plain["matching"]) != float(weighted["matching"])
        w = (1.0 / torch.clamp(batch.propensity, min=ips_model.hyper.ips_floor)).numpy()
        assert np.all(w >= 1.0)
        assert np.all(w <= 1.0 / ips_model.hyper.ips_floor)


class TestTrainStudent:
    def test_deterministic(self, world):
        hyper = StudentHyper(latent_dim=6, epochs=3, batch_size=64, n_hard=10,
                             kt_weight_video=0.0, kt_weight_music=0.0)
        a = train_student(world["ugc"], world["split"], None, hyper, seed=5)
        b = train_student(world["ugc"], world["split"], None, hyper, seed=5)
        assert parameter_fingerprint(a) == parameter_fingerprint(b)

    def test_validation_improves_on_first_epoch(self, world):
        hyper = StudentHyper(latent_dim=6, epochs=12, batch_size=64, n_hard=10,
                             kt_weight_video=0.0, kt_weight_music=0.0)
        model = train_student(world["ugc"], world["split"], None, hyper, seed=2)
        vals = [row["val_matching"] for row in model.history if "val_matching" in row]
        best_epoch = int(np.argmin([row["val_total"] for row in model.history]))
        assert vals[best_epoch] <= vals[0]

    def test_teacher_untouched_by_student_training(self, world, frozen_teacher):
        before = parameter_fingerprint(frozen_teacher)
        hyper = StudentHyper(latent_dim=6, epochs=3, batch_size=64, n_hard=10,
                             kt_weight_video=4.0, kt_weight_music=4.0)
        train_student(world["ugc"], world["split"], frozen_teacher, hyper, seed=1)
        assert parameter_fingerprint(frozen_teacher) == before
        frozen_teacher.assert_intact()

    def test_global_preference_cached(self, world):
        hyper = StudentHyper(latent_dim=6, epochs=2, batch_size=64, n_hard=10,
                             kt_weight_video=0.0, kt_weight_music=0.0)
        model = train_student(world["ugc"], world["split"], None, hyper, seed=3)
        train_view = materialize_split(world["ugc"], world["split"], "train")
        assert np.allclose(model.global_pref.numpy(), global_average_preference(train_view))


class TestRanking:
    def test_pool_of_one(self, world):
        model = small_student(seed=41)
        clip = world["ugc"].music[0]
        result = rank_music(model, world["ugc"].videos[0].feature, [clip], K=5, video_id="v")
        assert result.items[0][0] == clip.music_id
        assert len(result.items) == 1

    def test_k_covers_pool(self, world):
        model = small_student(seed=41)
        pool = list(world["ugc"].music[:10])
        result = rank_music(model, world["ugc"].videos[0].feature, pool, K=50)
        assert len(result.items) == 10

    def test_matches_exhaustive_oracle(self, world):
        # Score-all-then-sort with raw torch ops; orderings must be identical.
        model = small_student(seed=41)
        model.eval()
        pool = list(world["ugc"].music[:10])
        for video in world["ugc"].videos[:5]:
            result = rank_music(model, video.feature, pool, K=10, video_id=video.video_id)
            from bgmatch.nncore import to_tensor

            with torch.no_grad():
                z_v = model.video_encoder(to_tensor(video.feature)).mean
                scored = []
                for clip in pool:
                    z_m = model.music_encoder(to_tensor(clip.feature)).mean
                    z = torch.cat([z_m, model.genre_table @ model.global_pref])
                    z = model.match_projection(z)
                    scored.append((clip.music_id, float(z @ z_v)))
            scored.sort(key=lambda pair: (-pair[1], pair[0]))
            assert [m for m, _ in result.items] == [m for m, _ in scored]

    def test_score_scaling_leaves_order_unchanged(self):
        ids = ["m3", "m1", "m2", "m0"]
        scores = [0.2, 0.9, 0.2, -0.4]
        base = rank_from_scores("v", ids, scores, K=4)
        scaled = rank_from_scores("v", ids, [5.0 * s for s in scores], K=4)
        assert [m for m, _ in base.items] == [m for m, _ in scaled.items]

    def test_tie_break_is_lexicographic(self):
        result = rank_from_scores("v", ["mB", "mA"], [0.5, 0.5], K=2)
        assert [m for m, _ in result.items] == ["mA", "mB"]

    def test_empty_pool_rejected(self, world):
        model = small_student()
        with pytest.raises(ValueError, match="empty"):
            rank_music(model, world["ugc"].videos[0].feature, [], K=3)

    def test_ranking_result_invariants(self):
        with pytest.raises(ValueError, match="nonincreasing"):
            RankingResult("v", (("a", 0.1), ("b", 0.5)), K=2)
        with pytest.raises(ValueError, match="duplicate"):
            RankingResult("v", (("a", 0.5), ("a", 0.1)), K=2)


class TestStudentCheckpoint:
    def test_round_trip(self, world, tmp_path):
        hyper = StudentHyper(latent_dim=6, epochs=2, batch_size=64, n_hard=10,
                             kt_weight_video=0.0, kt_weight_music=0.0)
        model = train_student(world["ugc"], world["split"], None, hyper, seed=4)
        path = tmp_path / "student.pt"
        save_student(model, path, teacher_hash="t123", config_hash="c456")
        loaded = load_student(path)
        assert parameter_fingerprint(loaded) == parameter_fingerprint(model)
        assert loaded.deconfounder_mode == model.deconfounder_mode
        assert np.array_equal(loaded.global_pref.numpy(), model.global_pref.numpy())
        pool = list(world["ugc"].music[:8])
        video = world["ugc"].videos[0].feature
        assert rank_music(loaded, video, pool, 5).items == rank_music(model, video, pool, 5).items
