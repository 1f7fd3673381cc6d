"""Grid exploration for criterion 7 free parameters."""
import itertools
import sys
import time

import numpy as np

from bgmatch.synthgen import GenConfig, generate_ugc, genre_ratio_intervention
from bgmatch.student import StudentHyper, train_student
from bgmatch.evalkit import SamplerSpec, evaluate

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 60

for alpha, noise in itertools.product((1.5, 2.0, 3.0), (0.05, 0.15)):
    t0 = time.time()
    results = {m: [] for m in ("batch_average", "global_average", "off")}
    for seed in seeds:
        cfg = GenConfig(
            n_music=200, n_videos=2000, n_uploaders=120, n_pgc_pairs=0,
            F_video=32, F_music=24, N_g=6, latent_dim_true=8,
            confound_strength=1.5, match_strength=alpha,
            popularity_zipf_s=1.0, dirichlet_alpha=0.3, noise_sigma=noise,
            genre_mix=(0.45, 0.45, 0.04, 0.03, 0.02, 0.01), seed=seed,
        )
        ugc, truth = generate_ugc(cfg)
        split = genre_ratio_intervention(ugc, 0.8, 0, 1, seed=seed, ratios=(0.5, 0.1, 0.4))
        for mode in results:
            hyper = StudentHyper(latent_dim=16, epochs=epochs, batch_size=256,
                                 deconfounder_mode=mode, kt_weight_video=0.0, kt_weight_music=0.0)
            model = train_student(ugc, split, None, hyper, seed=seed)
            rep = evaluate(model, ugc, split, SamplerSpec("diverse", 0.5), Ks=(15,), seed=seed)
            results[mode].append(rep.value("recall", 15))
    b, o, g = (np.array(results[m]) for m in ("batch_average", "off", "global_average"))
    se = np.sqrt(b.var(ddof=1) / len(b) + o.var(ddof=1) / len(o))
    print(f"alpha={alpha} noise={noise}: batch={b.mean():.4f} global={g.mean():.4f} off={o.mean():.4f} "
          f"d(b-o)={b.mean()-o.mean():+.4f} SE={se:.4f} ratio={(b.mean()-o.mean())/se:+.2f} "
          f"d(b-g)={b.mean()-g.mean():+.4f}  ({time.time()-t0:.0f}s)", flush=True)
