"""Criterion 7: push the ceiling up and compare modes near it."""
import itertools
import sys
import time

import numpy as np

import bgmatch.synthgen as sg
from bgmatch.synthgen import GenConfig, generate_ugc, genre_ratio_intervention
from bgmatch.student import StudentHyper, train_student, rank_from_scores
from bgmatch.evalkit import SamplerSpec, evaluate


class SStarModel:
    def __init__(self, truth):
        self.truth = truth

    def rank(self, feat, pool, K, video_id="q"):
        ids = [c.music_id for c in pool]
        return rank_from_scores(video_id, ids, [self.truth.s_star(video_id, m) for m in ids], K)


n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 60
sg.VIDEO_GENRE_BLEND = 0.7

for alpha, zipf, frac in itertools.product((4.0, 6.0), (0.5,), (0.3, 0.5)):
    t0 = time.time()
    results = {m: [] for m in ("batch_average", "global_average", "off")}
    oracle = []
    for seed in range(n_seeds):
        cfg = GenConfig(
            n_music=200, n_videos=2000, n_uploaders=120, n_pgc_pairs=0,
            F_video=32, F_music=24, N_g=6, latent_dim_true=8,
            confound_strength=1.5, match_strength=alpha,
            popularity_zipf_s=zipf, dirichlet_alpha=0.3, noise_sigma=0.05,
            genre_mix=(0.45, 0.45, 0.04, 0.03, 0.02, 0.01), seed=seed,
        )
        ugc, truth = generate_ugc(cfg)
        split = genre_ratio_intervention(ugc, 0.8, 0, 1, seed=seed, ratios=(0.5, 0.1, 0.4))
        sampler = SamplerSpec("diverse", frac)
        oracle.append(evaluate(SStarModel(truth), ugc, split, sampler, Ks=(15,), seed=seed).value("recall", 15))
        for mode in results:
            hyper = StudentHyper(latent_dim=16, epochs=epochs, batch_size=32,
                                 deconfounder_mode=mode, kt_weight_video=0.0, kt_weight_music=0.0)
            model = train_student(ugc, split, None, hyper, seed=seed)
            rep = evaluate(model, ugc, split, sampler, Ks=(15,), seed=seed)
            results[mode].append(rep.value("recall", 15))
    b, o, g = (np.array(results[m]) for m in ("batch_average", "off", "global_average"))
    se = np.sqrt(b.var(ddof=1) / len(b) + o.var(ddof=1) / len(o))
    print(f"a={alpha} zipf={zipf} frac={frac}: oracle={np.mean(oracle):.3f} "
          f"batch={b.mean():.4f} global={g.mean():.4f} off={o.mean():.4f} "
          f"d(b-o)={b.mean()-o.mean():+.4f} SE={se:.4f} ratio={(b.mean()-o.mean())/se:+.2f} "
          f"d(b-g)={b.mean()-g.mean():+.4f}  ({time.time()-t0:.0f}s)", flush=True)
