"""Exploration for acceptance criterion 7: deconfounder directional claim."""
import sys
import time

import numpy as np

from bgmatch.synthgen import GenConfig, generate_ugc, genre_ratio_intervention
from bgmatch.student import StudentHyper, train_student
from bgmatch.evalkit import SamplerSpec, evaluate

ALPHA = float(sys.argv[1]) if len(sys.argv) > 1 else 4.0
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 30
SEEDS = range(5)

t0 = time.time()
results = {m: [] for m in ("batch_average", "global_average", "off")}
for seed in SEEDS:
    cfg = GenConfig(
        n_music=200, n_videos=2000, n_uploaders=120, n_pgc_pairs=0,
        F_video=32, F_music=24, N_g=6, latent_dim_true=8,
        confound_strength=1.5, match_strength=ALPHA,
        popularity_zipf_s=1.0, dirichlet_alpha=0.3, noise_sigma=0.05,
        genre_mix=(0.45, 0.45, 0.04, 0.03, 0.02, 0.01), seed=seed,
    )
    ugc, truth = generate_ugc(cfg)
    split = genre_ratio_intervention(ugc, 0.8, 0, 1, seed=seed, ratios=(0.5, 0.1, 0.4))
    n_train = sum(1 for t in ugc.interactions if split.assignments.get(t.music_id) == "train")
    n_test_clips = len(split.clips("test"))
    for mode in results:
        hyper = StudentHyper(latent_dim=16, epochs=EPOCHS, batch_size=256,
                             deconfounder_mode=mode, kt_weight_video=0.0, kt_weight_music=0.0)
        model = train_student(ugc, split, None, hyper, seed=seed)
        rep = evaluate(model, ugc, split, SamplerSpec("diverse", 0.5), Ks=(15,), seed=seed)
        results[mode].append(rep.value("recall", 15))
    print(f"seed {seed}: train_n={n_train} pool={n_test_clips} "
          + " ".join(f"{m}={results[m][-1]:.4f}" for m in results), flush=True)

print(f"\nalpha={ALPHA} epochs={EPOCHS}  ({time.time()-t0:.0f}s)")
for mode, vals in results.items():
    print(f"{mode:16s} mean={np.mean(vals):.4f} std={np.std(vals, ddof=1):.4f}")
b, o, g = results["batch_average"], results["off"], results["global_average"]
se = np.sqrt(np.var(b, ddof=1) / len(b) + np.var(o, ddof=1) / len(o))
print(f"batch - off = {np.mean(b) - np.mean(o):.4f}  pooled SE = {se:.4f}  ratio = {(np.mean(b)-np.mean(o))/se:.2f}")
print(f"batch - global = {np.mean(b) - np.mean(g):.4f}")
