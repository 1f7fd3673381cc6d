import numpy as np
import pytest
import torch

from bgmatch.datamodel import PGC, UGC
from bgmatch.nncore import Batch, DTYPE, init_parameters, parameter_fingerprint
from bgmatch.synthgen import GenConfig, generate_pgc, generate_ugc
from bgmatch.teacher import (
    FrozenModelError,
    KindMismatchError,
    TeacherHyper,
    TeacherModel,
    impute_labels,
    infer_teacher_latents,
    load_teacher,
    pair_tensors,
    save_teacher,
    teacher_loss,
    train_teacher,
)

HYPER_SMALL = TeacherHyper(latent_dim=8, epochs=8, batch_size=64, n_hard=10)


@pytest.fixture(scope="module")
def pgc_dataset():
    cfg = GenConfig(n_music=50, n_videos=100, n_uploaders=10, n_pgc_pairs=300,
                    F_video=12, F_music=10, latent_dim_true=6, seed=21)
    return generate_pgc(cfg)


@pytest.fixture(scope="module")
def trained_teacher(pgc_dataset):
    return train_teacher(pgc_dataset, HYPER_SMALL, seed=0)


def fresh_model(F_video=3, F_music=3, d=2, seed=17, dropout=0.0):
    hyper = TeacherHyper(latent_dim=d, dropout=dropout, n_hard=2)
    gen = torch.Generator().manual_seed(seed)
    return TeacherModel(F_video, F_music, hyper, gen), hyper


class TestTeacherLoss:
    def test_componentwise_floors(self):
        # Zero parameters: posteriors are exactly N(0, I) so the KL terms
        # vanish; with zero noise every latent is 0, all scores tie at 0 and
        # each hinge contributes exactly the margin.
        model, hyper = fresh_model()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        batch = Batch(PGC, torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 3, dtype=DTYPE))
        comps = teacher_loss(model, batch, torch.zeros(2, 2, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE))
        assert float(comps["kl_video"]) == 0.0
        assert float(comps["kl_music"]) == 0.0
        assert float(comps["recon_video"]) == 0.0
        assert float(comps["recon_music"]) == 0.0
        assert float(comps["matching"]) == pytest.approx(2 * hyper.margin, abs=1e-15)

    def test_total_is_sum_of_components(self):
        model, hyper = fresh_model(seed=3)
        gen = torch.Generator().manual_seed(5)
        batch = Batch(PGC, torch.randn(4, 3, dtype=DTYPE, generator=gen),
                      torch.randn(4, 3, dtype=DTYPE, generator=gen))
        nv = torch.randn(4, 2, dtype=DTYPE, generator=gen)
        nm = torch.randn(4, 2, dtype=DTYPE, generator=gen)
        comps = teacher_loss(model, batch, nv, nm)
        expected = (
            hyper.recon_weight * (float(comps["recon_video"]) + float(comps["recon_music"]))
            + hyper.kl_weight * (float(comps["kl_video"]) + float(comps["kl_music"]))
            + float(comps["matching"])
        )
        assert float(comps["total"]) == pytest.approx(expected, abs=1e-12)

    def test_rejects_ugc_batch(self):
        model, _ = fresh_model()
        batch = Batch(UGC, torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 3, dtype=DTYPE))
        with pytest.raises(KindMismatchError):
            teacher_loss(model, batch, torch.zeros(2, 2, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE))

    def test_hand_computed_forward_pass(self):
        # Independent numpy recomputation of every component on a two-pair
        # batch with d=2, F=3.
        model, hyper = fresh_model(seed=29)
        model.eval()
        gen = torch.Generator().manual_seed(31)
        video = torch.randn(2, 3, dtype=DTYPE, generator=gen)
        music = torch.randn(2, 3, dtype=DTYPE, generator=gen)
        nv = torch.randn(2, 2, dtype=DTYPE, generator=gen)
        nm = torch.randn(2, 2, dtype=DTYPE, generator=gen)
        comps = teacher_loss(model, Batch(PGC, video, music), nv, nm)

        def np_encode(enc, x):
            w1 = enc.hidden.weight.detach().numpy()
            b1 = enc.hidden.bias.detach().numpy()
            h = np.tanh(x @ w1.T + b1)
            mean = h @ enc.mean_head.weight.detach().numpy().T + enc.mean_head.bias.detach().numpy()
            logvar = h @ enc.log_var_head.weight.detach().numpy().T + enc.log_var_head.bias.detach().numpy()
            return mean, np.exp(0.5 * logvar)

        def np_decode(dec, z):
            lin1, _, lin2 = dec.net
            h = np.tanh(z @ lin1.weight.detach().numpy().T + lin1.bias.detach().numpy())
            return h @ lin2.weight.detach().numpy().T + lin2.bias.detach().numpy()

        v = video.numpy()
        m = music.numpy()
        mu_v, sd_v = np_encode(model.video_encoder, v)
        mu_m, sd_m = np_encode(model.music_encoder, m)
        z_v = mu_v + sd_v * nv.numpy()
        z_m = mu_m + sd_m * nm.numpy()
        recon_video = np.mean((np_decode(model.video_decoder, z_m) - v) ** 2)
        recon_music = np.mean((np_decode(model.music_decoder, z_v) - m) ** 2)
        kl_v = np.mean(0.5 * np.sum(mu_v**2 + sd_v**2 - 1 - 2 * np.log(sd_v), axis=1))
        kl_m = np.mean(0.5 * np.sum(mu_m**2 + sd_m**2 - 1 - 2 * np.log(sd_m), axis=1))
        scores = z_v @ z_m.T
        hinge = lambda pos, neg: max(0.0, hyper.margin - pos + neg)
        matching = np.mean(
            [
                hinge(scores[0, 0], scores[0, 1]) + hinge(scores[0, 0], scores[1, 0]),
                hinge(scores[1, 1], scores[1, 0]) + hinge(scores[1, 1], scores[0, 1]),
            ]
        )
        total = recon_video + recon_music + kl_v + kl_m + matching

        assert float(comps["recon_video"]) == pytest.approx(recon_video, abs=1e-6)
        assert float(comps["recon_music"]) == pytest.approx(recon_music, abs=1e-6)
        assert float(comps["kl_video"]) == pytest.approx(kl_v, abs=1e-6)
        assert float(comps["kl_music"]) == pytest.approx(kl_m, abs=1e-6)
        assert float(comps["matching"]) == pytest.approx(matching, abs=1e-6)
        assert float(comps["total"]) == pytest.approx(total, abs=1e-6)


class TestTrainTeacher:
    def test_loss_decreases(self, pgc_dataset):
        # Reference-run band: 50 epochs must cut the training loss to 70%.
        hyper = TeacherHyper(latent_dim=8, epochs=50, batch_size=64, n_hard=10)
        model = train_teacher(pgc_dataset, hyper, seed=0)
        first = model.history[0]["train_total"]
        last = model.history[-1]["train_total"]
        assert last <= 0.7 * first

    def test_deterministic(self, pgc_dataset):
        a = train_teacher(pgc_dataset, HYPER_SMALL, seed=4)
        b = train_teacher(pgc_dataset, HYPER_SMALL, seed=4)
        assert parameter_fingerprint(a) == parameter_fingerprint(b)

    def test_zero_learning_rate_keeps_parameters(self, pgc_dataset):
        hyper = TeacherHyper(latent_dim=8, epochs=2, batch_size=64, lr=0.0, n_hard=10)
        gen = torch.Generator().manual_seed(
            __import__("bgmatch.teacher", fromlist=["derive_seed"]).derive_seed(9, "teacher-init")
        )
        reference = TeacherModel(pgc_dataset.dims[0], pgc_dataset.dims[1], hyper, gen)
        trained = train_teacher(pgc_dataset, hyper, seed=9)
        assert parameter_fingerprint(trained) == parameter_fingerprint(reference)

    def test_rejects_ugc(self):
        cfg = GenConfig(n_music=20, n_videos=40, n_uploaders=5, n_pgc_pairs=10,
                        F_video=6, F_music=6, latent_dim_true=4, seed=1)
        ugc, _ = generate_ugc(cfg)
        with pytest.raises(KindMismatchError):
            train_teacher(ugc, HYPER_SMALL, seed=0)

    def test_monotone_decrease_across_seeds(self, pgc_dataset):
        for seed in range(5):
            model = train_teacher(
                pgc_dataset, TeacherHyper(latent_dim=8, epochs=5, batch_size=64, n_hard=10), seed=seed
            )
            assert model.history[-1]["train_total"] < model.history[0]["train_total"]


class TestFreezeContract:
    def test_frozen_after_training(self, trained_teacher):
        assert trained_teacher.frozen
        trained_teacher.assert_intact()

    def test_perturbation_detected(self, pgc_dataset):
        model = train_teacher(pgc_dataset, HYPER_SMALL, seed=2)
        with torch.no_grad():
            next(model.parameters()).add_(1e-3)
        with pytest.raises(FrozenModelError, match="perturbed"):
            model.assert_intact()

    def test_inference_requires_frozen(self):
        model, _ = fresh_model()
        with pytest.raises(FrozenModelError):
            infer_teacher_latents(model, torch.zeros(1, 3, dtype=DTYPE), torch.zeros(1, 3, dtype=DTYPE))


class TestInferTeacherLatents:
    def test_deterministic_and_shaped(self, trained_teacher, pgc_dataset):
        video, music = pair_tensors(pgc_dataset)
        a_v, a_m = infer_teacher_latents(trained_teacher, video[:5], music[:5])
        b_v, b_m = infer_teacher_latents(trained_teacher, video[:5], music[:5])
        assert torch.equal(a_v.mean, b_v.mean)
        assert torch.equal(a_m.std, b_m.std)
        assert a_v.mean.shape == (5, HYPER_SMALL.latent_dim)
        assert a_m.mean.shape == (5, HYPER_SMALL.latent_dim)

    def test_gradient_isolated(self, trained_teacher, pgc_dataset):
        video, music = pair_tensors(pgc_dataset)
        q_v, q_m = infer_teacher_latents(trained_teacher, video[:3], music[:3])
        assert not q_v.mean.requires_grad
        assert not q_m.std.requires_grad


class TestImputeLabels:
    @pytest.fixture(scope="class")
    def ugc_dataset(self):
        cfg = GenConfig(n_music=50, n_videos=80, n_uploaders=8, n_pgc_pairs=300,
                        F_video=12, F_music=10, latent_dim_true=6, seed=21)
        ds, _ = generate_ugc(cfg)
        return ds

    def test_weight_zero_returns_labels(self, trained_teacher, ugc_dataset):
        targets = impute_labels(trained_teacher, ugc_dataset, 0.0)
        assert np.array_equal(targets, np.ones(len(ugc_dataset.interactions)))

    def test_weight_one_returns_teacher_scores(self, trained_teacher, ugc_dataset):
        targets = impute_labels(trained_teacher, ugc_dataset, 1.0)
        assert not np.allclose(targets, 1.0)
        assert np.all((targets > 0) & (targets < 1))

    def test_blend_stays_in_unit_interval(self, trained_teacher, ugc_dataset):
        for w in (0.25, 0.5, 0.9):
            targets = impute_labels(trained_teacher, ugc_dataset, w)
            assert np.all((targets >= 0) & (targets <= 1))

    def test_invalid_weight(self, trained_teacher, ugc_dataset):
        with pytest.raises(ValueError, match="weight"):
            impute_labels(trained_teacher, ugc_dataset, 1.5)


class TestTeacherCheckpoint:
    def test_round_trip(self, trained_teacher, tmp_path):
        path = tmp_path / "teacher.pt"
        save_teacher(trained_teacher, path, config_hash="xyz")
        loaded = load_teacher(path)
        assert loaded.frozen
        assert parameter_fingerprint(loaded) == parameter_fingerprint(trained_teacher)
        assert loaded.hyper == trained_teacher.hyper
