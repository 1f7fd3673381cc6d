"""Synthetic confounded data at desk scale.

The generator realizes the causal graph behind biased background-music
selection: each uploader carries a latent genre preference that influences
which clip they pick (preference edge), while true content compatibility
between video and music influences the pick too (content edge). Observed
features are noisy linear views of the hidden content vectors, so the true
match score s*(v, m) stays available as ground truth for intervened test
sets and directional acceptance checks.

Selection model, per video of uploader u over the clip pool:

    p(m) ∝ exp( alpha * s*(v, m) + beta * ln pref_u[g] + (1 - beta) * ln mix_g ) * w(m)

with g = genre(m), mix_g the realized catalog share of that genre, and w(m)
the clip's Zipf base weight normalized within its genre. The genre-mass
interpolation makes both dial endpoints exact: at beta=0 selection follows
the catalog mix with no preference influence, and at alpha=0, beta=1 the
chosen-genre distribution equals pref_u itself. Larger beta sharpens
preference bias further.

All operations are pure functions of their arguments including the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datamodel import (
    PGC,
    UGC,
    Dataset,
    GenrePreference,
    IntegrityError,
    InteractionTriplet,
    MicroVideo,
    MusicClip,
    Uploader,
    default_genre_names,
    genre_distribution,
    music_popularity_table,
    preference_entropy,
    recount_popularity,
)

# Proportions of the six-genre reference catalog (hiphop, jazz, classical,
# reggae, pop, metal) used as the default clip mix.
REFERENCE_GENRE_COUNTS = (651, 665, 1330, 311, 42, 4)

# Fraction of a clip's hidden content vector contributed by its genre prototype.
GENRE_BLEND = 0.6

# Peak fraction of a video's hidden content contributed by a genre prototype
# drawn from its uploader's preference. Scaled by min(beta, 1) so beta = 0
# removes every trace of the uploader from the generated data.
VIDEO_GENRE_BLEND = 0.5

# PGC pairs draw clips from this s* quantile upward (per video).
PGC_QUANTILE = 0.95

_PREF_FLOOR = 1e-12

SPLIT_TAGS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid generator configuration."""


class SplitError(ValueError):
    """A requested split cannot be realized on the given dataset."""


class GroundTruthUnavailableError(RuntimeError):
    """An operation that needs generator ground truth was called without it."""


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the synthetic world.

    ``confound_strength`` (beta) scales how strongly uploader genre
    preference biases clip selection; ``match_strength`` (alpha) scales how
    strongly true content match drives it. ``genre_mix`` overrides the
    reference catalog proportions (length must equal ``N_g``).
    """

    n_music: int = 200
    n_videos: int = 2000
    n_uploaders: int = 120
    n_pgc_pairs: int = 1000
    F_video: int = 32
    F_music: int = 24
    N_g: int = 6
    latent_dim_true: int = 8
    confound_strength: float = 1.5
    match_strength: float = 2.0
    popularity_zipf_s: float = 1.0
    dirichlet_alpha: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0
    genre_mix: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("n_music", "n_videos", "n_uploaders", "F_video", "F_music", "N_g", "latent_dim_true"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_pgc_pairs < 0:
            raise ConfigError(f"n_pgc_pairs must be nonnegative, got {self.n_pgc_pairs}")
        for name in ("confound_strength", "match_strength", "noise_sigma", "popularity_zipf_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.dirichlet_alpha <= 0:
            raise ConfigError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if self.genre_mix is not None:
            mix = tuple(float(x) for x in self.genre_mix)
            if len(mix) != self.N_g:
                raise ConfigError(f"genre_mix has {len(mix)} entries, expected N_g={self.N_g}")
            if any(x <= 0 for x in mix):
                raise ConfigError("genre_mix entries must be positive")
            object.__setattr__(self, "genre_mix", mix)

    def mix(self) -> np.ndarray:
        if self.genre_mix is not None:
            m = np.array(self.genre_mix, dtype=np.float64)
        elif self.N_g == len(REFERENCE_GENRE_COUNTS):
            m = np.array(REFERENCE_GENRE_COUNTS, dtype=np.float64)
        else:
            m = np.ones(self.N_g, dtype=np.float64)
        return m / m.sum()


@dataclass(frozen=True)
class GroundTruth:
    """Hidden content vectors and uploader preferences behind a dataset.

    Reproducible as a pure function of the generating config; carries enough
    to score any (video, music) pair by cosine similarity of content vectors.
    """

    latent_dim: int
    video_ids: tuple[str, ...]
    video_latents: np.ndarray  # (n_videos, latent_dim), unit rows
    music_ids: tuple[str, ...]
    music_latents: np.ndarray  # (n_music, latent_dim), unit rows
    uploader_ids: tuple[str, ...] = ()
    preferences: np.ndarray | None = None  # (n_uploaders, N_g)
    _video_index: dict = field(init=False, repr=False)
    _music_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_video_index", {v: i for i, v in enumerate(self.video_ids)})
        object.__setattr__(self, "_music_index", {m: i for i, m in enumerate(self.music_ids)})

    def s_star(self, video_id: str, music_id: str) -> float:
        """True match score: cosine of the hidden content vectors."""
        try:
            vi = self._video_index[video_id]
            mi = self._music_index[music_id]
        except KeyError as exc:
            raise GroundTruthUnavailableError(f"no ground truth for id {exc.args[0]!r}") from None
        return float(self.video_latents[vi] @ self.music_latents[mi])

    def s_star_row(self, video_id: str) -> np.ndarray:
        """s* of one video against every clip, in ``music_ids`` order."""
        try:
            vi = self._video_index[video_id]
        except KeyError:
            raise GroundTruthUnavailableError(f"no ground truth for video {video_id!r}") from None
        return self.music_latents @ self.video_latents[vi]

    def preference_of(self, uploader_id: str) -> np.ndarray:
        if self.preferences is None:
            raise GroundTruthUnavailableError("ground truth carries no uploader preferences")
        try:
            idx = self.uploader_ids.index(uploader_id)
        except ValueError:
            raise GroundTruthUnavailableError(f"no ground truth for uploader {uploader_id!r}") from None
        return self.preferences[idx]


def _rng(config: GenConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *key])


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return mat / norms


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights``."""
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(int)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


@dataclass(frozen=True)
class _World:
    """Shared catalog and observation maps derived from a config."""

    music_ids: tuple[str, ...]
    music_genres: np.ndarray
    music_latents: np.ndarray
    music_features: np.ndarray
    genre_prototypes: np.ndarray  # (N_g, latent_dim), unit rows
    genre_log_base: np.ndarray  # ln of within-genre normalized Zipf weight per clip
    genre_log_mix: np.ndarray  # ln of the clip's genre share of the catalog
    video_map: np.ndarray  # (F_video, latent_dim)
    music_map: np.ndarray  # (F_music, latent_dim)


def _build_world(config: GenConfig) -> _World:
    k = config.latent_dim_true
    counts = _largest_remainder(config.mix(), config.n_music)
    genres = np.repeat(np.arange(config.N_g), counts)
    music_ids = tuple(f"m{i:05d}" for i in range(config.n_music))

    rng_cat = _rng(config, 1)
    ranks = rng_cat.permutation(config.n_music) + 1
    zipf_w = ranks.astype(np.float64) ** (-config.popularity_zipf_s)
    log_base = np.zeros(config.n_music, dtype=np.float64)
    log_mix = np.zeros(config.n_music, dtype=np.float64)
    for g in range(config.N_g):
        mask = genres == g
        if mask.any():
            log_base[mask] = np.log(zipf_w[mask] / zipf_w[mask].sum())
            log_mix[mask] = np.log(mask.sum() / config.n_music)

    rng_lat = _rng(config, 2)
    protos = _unit_rows(rng_lat.normal(size=(config.N_g, k)))
    raw = _unit_rows(rng_lat.normal(size=(config.n_music, k)))
    latents = _unit_rows(GENRE_BLEND * protos[genres] + (1.0 - GENRE_BLEND) * raw)

    rng_maps = _rng(config, 3)
    video_map = rng_maps.normal(scale=1.0 / math.sqrt(k), size=(config.F_video, k))
    music_map = rng_maps.normal(scale=1.0 / math.sqrt(k), size=(config.F_music, k))

    rng_noise = _rng(config, 4)
    feats = latents @ music_map.T + config.noise_sigma * rng_noise.normal(
        size=(config.n_music, config.F_music)
    )

    return _World(
        music_ids=music_ids,
        music_genres=genres,
        music_latents=latents,
        music_features=feats,
        genre_prototypes=protos,
        genre_log_base=log_base,
        genre_log_mix=log_mix,
        video_map=video_map,
        music_map=music_map,
    )


def selection_probabilities(
    config: GenConfig, world: _World, video_latent: np.ndarray, pref: np.ndarray
) -> np.ndarray:
    """Clip selection distribution for one video of an uploader with ``pref``."""
    s_star = world.music_latents @ video_latent
    beta = config.confound_strength
    logits = (
        config.match_strength * s_star
        + beta * np.log(np.maximum(pref, _PREF_FLOOR))[world.music_genres]
        + (1.0 - beta) * world.genre_log_mix
        + world.genre_log_base
    )
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def generate_ugc(config: GenConfig) -> tuple[Dataset, GroundTruth]:
    """Generate the confounded uploader-selected dataset with ground truth.

    Emits positive interactions only (one per video); negatives are drawn at
    training time. Deterministic in ``config`` including its seed.
    """
    world = _build_world(config)
    k = config.latent_dim_true

    rng_pref = _rng(config, 5)
    # Preference concentration follows the catalog mix: uploaders can only
    # build history from clips that exist. A uniform mix recovers the
    # symmetric Dirichlet(alpha).
    pref_base = config.dirichlet_alpha * config.N_g * config.mix()
    prefs = rng_pref.dirichlet(pref_base, config.n_uploaders)
    uploader_ids = tuple(f"u{i:04d}" for i in range(config.n_uploaders))

    rng_vid = _rng(config, 6)
    video_ids = tuple(f"v{i:05d}" for i in range(config.n_videos))
    video_owner = np.arange(config.n_videos) % config.n_uploaders
    raw = _unit_rows(rng_vid.normal(size=(config.n_videos, k)))
    # Uploaders film what they love: each video's content leans toward a
    # genre prototype drawn from its uploader's preference, fading out as
    # confounding is dialed to zero.
    blend = VIDEO_GENRE_BLEND * min(config.confound_strength, 1.0)
    flavor = np.array(
        [rng_vid.choice(config.N_g, p=prefs[video_owner[i]]) for i in range(config.n_videos)]
    )
    video_latents = _unit_rows((1.0 - blend) * raw + blend * world.genre_prototypes[flavor])
    video_feats = video_latents @ world.video_map.T + config.noise_sigma * rng_vid.normal(
        size=(config.n_videos, config.F_video)
    )

    chosen = np.empty(config.n_videos, dtype=int)
    for ui in range(config.n_uploaders):
        # Per-uploader stream so generation could parallelize over uploaders.
        rng_sel = _rng(config, 7, ui)
        for vi in np.flatnonzero(video_owner == ui):
            p = selection_probabilities(config, world, video_latents[vi], prefs[ui])
            chosen[vi] = rng_sel.choice(config.n_music, p=p)

    interactions = tuple(
        InteractionTriplet(uploader_ids[video_owner[vi]], video_ids[vi], world.music_ids[chosen[vi]], 1)
        for vi in range(config.n_videos)
    )
    histories: dict[str, list[str]] = {u: [] for u in uploader_ids}
    for t in interactions:
        histories[t.uploader_id].append(t.music_id)

    music = recount_popularity(
        (
            MusicClip(world.music_ids[i], world.music_features[i], int(world.music_genres[i]))
            for i in range(config.n_music)
        ),
        interactions,
    )
    dataset = Dataset(
        kind=UGC,
        dims=(config.F_video, config.F_music),
        genre_names=default_genre_names(config.N_g),
        videos=tuple(
            MicroVideo(video_ids[i], video_feats[i], uploader_ids[video_owner[i]])
            for i in range(config.n_videos)
        ),
        music=music,
        uploaders=tuple(Uploader(u, tuple(histories[u])) for u in uploader_ids),
        interactions=interactions,
    )
    dataset.validate()
    truth = GroundTruth(
        latent_dim=k,
        video_ids=video_ids,
        video_latents=video_latents,
        music_ids=world.music_ids,
        music_latents=world.music_latents,
        uploader_ids=uploader_ids,
        preferences=prefs,
    )
    return dataset, truth


def generate_pgc(config: GenConfig, with_truth: bool = False):
    """Generate expert-matched pairs over the same clip catalog.

    Each PGC video is paired with a clip drawn from its top s* quantile;
    uploader fields stay empty. With ``with_truth=True`` also returns the
    PGC-side :class:`GroundTruth`.
    """
    world = _build_world(config)
    k = config.latent_dim_true
    n = config.n_pgc_pairs

    rng_lat = _rng(config, 8)
    video_latents = _unit_rows(rng_lat.normal(size=(n, k))) if n else np.zeros((0, k))
    video_feats = video_latents @ world.video_map.T + config.noise_sigma * rng_lat.normal(
        size=(n, config.F_video)
    )
    video_ids = tuple(f"p{i:05d}" for i in range(n))

    rng_pair = _rng(config, 9)
    interactions = []
    for i in range(n):
        s_row = world.music_latents @ video_latents[i]
        threshold = np.quantile(s_row, PGC_QUANTILE)
        candidates = np.flatnonzero(s_row >= threshold)
        pick = candidates[rng_pair.integers(len(candidates))]
        interactions.append(InteractionTriplet(None, video_ids[i], world.music_ids[pick], 1))
    interactions = tuple(interactions)

    music = recount_popularity(
        (
            MusicClip(world.music_ids[i], world.music_features[i], int(world.music_genres[i]))
            for i in range(config.n_music)
        ),
        interactions,
    )
    dataset = Dataset(
        kind=PGC,
        dims=(config.F_video, config.F_music),
        genre_names=default_genre_names(config.N_g),
        videos=tuple(MicroVideo(video_ids[i], video_feats[i], None) for i in range(n)),
        music=music,
        uploaders=(),
        interactions=interactions,
    )
    dataset.validate()
    if not with_truth:
        return dataset
    truth = GroundTruth(
        latent_dim=k,
        video_ids=video_ids,
        video_latents=video_latents,
        music_ids=world.music_ids,
        music_latents=world.music_latents,
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    """Assignment of music clips to split tags; clips absent are excluded."""

    assignments: dict[str, str]
    meta: dict = field(default_factory=dict)

    def clips(self, tag: str) -> tuple[str, ...]:
        return tuple(sorted(m for m, t in self.assignments.items() if t == tag))

    def save(self, path: str | Path) -> None:
        lines = [json.dumps({"record": "split_meta", **_jsonable(self.meta)})]
        for mid in sorted(self.assignments):
            lines.append(json.dumps({"record": "split", "music_id": mid, "split": self.assignments[mid]}))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        assignments: dict[str, str] = {}
        meta: dict = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") == "split_meta":
                meta = {k: v for k, v in rec.items() if k != "record"}
            else:
                assignments[rec["music_id"]] = rec["split"]
        return cls(assignments=assignments, meta=meta)


def _jsonable(meta: dict) -> dict:
    out = {}
    for key, value in meta.items():
        if isinstance(value, (np.integer,)):
            value = int(value)
        elif isinstance(value, (np.floating,)):
            value = float(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def _shuffle_ties(
    ids_by_popularity: list[str], popularity: dict[str, int], rng: np.random.Generator
) -> list[str]:
    """Randomize order only among clips of equal popularity."""
    out: list[str] = []
    run: list[str] = []
    run_pop: int | None = None
    for mid in ids_by_popularity:
        pop = popularity[mid]
        if run and pop != run_pop:
            rng.shuffle(run)
            out.extend(run)
            run = []
        run.append(mid)
        run_pop = pop
    rng.shuffle(run)
    out.extend(run)
    return out


def _stratified_allocate(
    ids_by_popularity: list[str],
    counts: dict[str, int],
    rng: np.random.Generator,
    n_strata: int,
    popularity: dict[str, int],
    require_full_strata: bool = False,
) -> dict[str, str]:
    """Deal clips to split tags, balancing popularity within every stratum.

    ``ids_by_popularity`` must be ordered (most popular first). ``counts``
    maps split tag to the exact number of clips it must receive; any
    remainder stays unassigned. Within a stratum, clips are dealt in
    popularity order to whichever tag lags its proportional share most, so
    each split sees the same popularity profile; the seed only shuffles
    equal-popularity runs.
    """
    n_total = len(ids_by_popularity)
    tags = [t for t in counts if counts[t] > 0]
    if require_full_strata:
        sizes = [len(s) for s in np.array_split(np.arange(n_total), n_strata)]
        for i, size in enumerate(sizes):
            if size < len(tags):
                raise SplitError(
                    f"stratum {i} has {size} clips, fewer than the {len(tags)} splits to fill"
                )
    ordered = _shuffle_ties(ids_by_popularity, popularity, rng)
    strata = np.array_split(np.array(ordered, dtype=object), n_strata)
    assigned = {t: 0 for t in tags}
    out: dict[str, str] = {}
    seen = 0
    for stratum in strata:
        members = list(stratum)
        seen += len(members)
        quotas: dict[str, int] = {}
        for tag in tags:
            target = min(counts[tag], int(round(counts[tag] * seen / n_total)))
            quotas[tag] = max(0, target - assigned[tag])
        overflow = sum(quotas.values()) - len(members)
        while overflow > 0:
            biggest = max(quotas, key=lambda t: (quotas[t], t))
            quotas[biggest] -= 1
            overflow -= 1
        # Unassigned clips are dealt through a virtual tag so exclusion is
        # popularity-balanced too.
        quotas["__skip__"] = len(members) - sum(quotas.values())
        n_q = len(members)
        dealt = {t: 0 for t in quotas}
        for k, mid in enumerate(members):
            lag = {t: quotas[t] * (k + 1) / n_q - dealt[t] for t in quotas if quotas[t] > 0}
            pick = max(sorted(lag), key=lambda t: lag[t])
            dealt[pick] += 1
            if pick != "__skip__":
                out[mid] = pick
                assigned[pick] += 1
    # Rounding can leave a tag short; fill from clips left unassigned.
    leftovers = [m for m in ordered if m not in out]
    for tag in tags:
        while assigned[tag] < counts[tag]:
            out[leftovers.pop(0)] = tag
            assigned[tag] += 1
    return out


def split_strong_generalization(
    dataset: Dataset,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    n_strata: int = 10,
) -> SplitSpec:
    """Partition music clips into disjoint train/val/test sets.

    Clips are stratified by popularity (interaction count) so each split
    sees the same popularity profile; interactions follow their clip.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive numbers, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    pop = music_popularity_table(dataset)
    ordered = sorted(dataset.music_by_id, key=lambda m: (-pop[m], m))
    counts_arr = _largest_remainder(np.array(ratios, dtype=np.float64), len(ordered))
    counts = dict(zip(SPLIT_TAGS, (int(c) for c in counts_arr)))
    n_strata = min(n_strata, len(ordered))
    rng = np.random.default_rng([seed, 21])
    assignments = _stratified_allocate(ordered, counts, rng, n_strata, pop, require_full_strata=True)
    return SplitSpec(
        assignments=assignments,
        meta={"method": "strong_generalization", "ratios": list(ratios), "seed": seed, "n_strata": n_strata},
    )


def genre_ratio_intervention(
    dataset: Dataset,
    X: float,
    genre_a: int,
    genre_b: int,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    n_strata: int = 5,
) -> SplitSpec:
    """Flip the two-genre balance between training and evaluation splits.

    Training holds genre_a:genre_bclips at X:(1-X); validation and test hold
    the reversed (1-X):X. Only clips of the two genres participate; splits
    stay music-disjoint. Sizes follow ``ratios`` as closely as the two genre
    budgets allow.
    """
    if not (0.1 <= X <= 0.9):
        raise SplitError(f"X must lie in [0.1, 0.9], got {X}")
    if genre_a == genre_b:
        raise SplitError("genre_a and genre_b must differ")
    for g in (genre_a, genre_b):
        if not (0 <= g < dataset.n_genres):
            raise SplitError(f"genre index {g} out of range for {dataset.n_genres} genres")
    pop = music_popularity_table(dataset)
    pool_a = sorted(
        (m.music_id for m in dataset.music if m.genre == genre_a),
        key=lambda m: (-pop[m], m),
    )
    pool_b = sorted(
        (m.music_id for m in dataset.music if m.genre == genre_b),
        key=lambda m: (-pop[m], m),
    )
    n_a, n_b = len(pool_a), len(pool_b)
    rt, rv, rs = ratios
    c = (rv + rs) / rt
    bound_a = n_a / (X + (1.0 - X) * c)
    bound_b = n_b / ((1.0 - X) + X * c)
    T = int(min(bound_a, bound_b))
    if T < 5:
        raise SplitError(
            f"insufficient clips for X={X}: genres have {n_a} and {n_b} clips, "
            f"achievable training size is {T} (need at least 5)"
        )
    train_a = int(round(X * T))
    train_b = T - train_a
    realized = train_a / T
    if abs(realized - X) > 0.02:
        raise SplitError(
            f"cannot realize training ratio {X} within 0.02 with {T} training clips; "
            f"achievable ratio is {realized:.3f}"
        )
    V = max(1, int(round(T * rv / rt)))
    S = max(1, int(round(T * rs / rt)))
    val_a = int(round((1.0 - X) * V))
    test_a = int(round((1.0 - X) * S))
    val_b = V - val_a
    test_b = S - test_a
    # Rounding may momentarily exceed a genre budget; shrink val, then test.
    while train_a + val_a + test_a > n_a:
        if val_a > 0:
            val_a -= 1
        elif test_a > 0:
            test_a -= 1
        else:
            train_a -= 1
    while train_b + val_b + test_b > n_b:
        if val_b > 0:
            val_b -= 1
        elif test_b > 0:
            test_b -= 1
        else:
            train_b -= 1
    rng = np.random.default_rng([seed, 22])
    assignments = _stratified_allocate(
        pool_a, {"train": train_a, "val": val_a, "test": test_a}, rng, min(n_strata, max(1, n_a)), pop
    )
    assignments.update(
        _stratified_allocate(
            pool_b, {"train": train_b, "val": val_b, "test": test_b}, rng, min(n_strata, max(1, n_b)), pop
        )
    )
    return SplitSpec(
        assignments=assignments,
        meta={
            "method": "genre_ratio",
            "X": X,
            "genre_a": genre_a,
            "genre_b": genre_b,
            "ratios": list(ratios),
            "seed": seed,
            "train_counts": [train_a, train_b],
            "val_counts": [val_a, val_b],
            "test_counts": [test_a, test_b],
        },
    )


def materialize_split(dataset: Dataset, spec: SplitSpec, tag: str) -> Dataset:
    """Dataset view restricted to one split's music clips.

    Interactions follow their clip; videos follow their interaction;
    uploader histories shrink to selections inside the split (uploaders left
    without history drop out). Popularity is recounted within the view.
    """
    if tag not in SPLIT_TAGS:
        raise SplitError(f"unknown split tag {tag!r}")
    keep = {m for m, t in spec.assignments.items() if t == tag}
    interactions = tuple(t for t in dataset.interactions if t.music_id in keep)
    video_ids = {t.video_id for t in interactions}
    uploader_hist: dict[str, list[str]] = {}
    for t in interactions:
        if t.uploader_id is not None:
            uploader_hist.setdefault(t.uploader_id, []).append(t.music_id)
    music = recount_popularity(
        (m for m in dataset.music if m.music_id in keep), interactions
    )
    view = Dataset(
        kind=dataset.kind,
        dims=dataset.dims,
        genre_names=dataset.genre_names,
        videos=tuple(v for v in dataset.videos if v.video_id in video_ids),
        music=music,
        uploaders=tuple(
            Uploader(u, tuple(hist)) for u, hist in sorted(uploader_hist.items())
        ),
        interactions=interactions,
    )
    view.validate()
    return view


# ---------------------------------------------------------------------------
# Intervened test-set samplers
# ---------------------------------------------------------------------------


def _eligible_videos(dataset: Dataset, eligible) -> list[str]:
    if eligible is None:
        return sorted(dataset.video_by_id)
    missing = [v for v in eligible if v not in dataset.video_by_id]
    if missing:
        raise IntegrityError(f"eligible videos not in dataset: {missing[:3]}")
    return sorted(eligible)


def _take_fraction(ordered: list[str], fraction: float) -> tuple[str, ...]:
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = max(1, int(round(fraction * len(ordered)))) if ordered else 0
    return tuple(ordered[:count])


def sample_diverse_test(dataset: Dataset, fraction: float, eligible=None) -> tuple[str, ...]:
    """Videos of the most genre-diverse uploaders, by preference entropy.

    Ranks eligible videos by their uploader's history entropy (descending),
    breaking ties by uploader id then video id, and keeps the top fraction.
    """
    videos = _eligible_videos(dataset, eligible)
    entropies: dict[str, float] = {}
    for vid in videos:
        uid = dataset.video_by_id[vid].uploader_id
        if uid is None:
            raise IntegrityError(f"video {vid} has no uploader; diverse sampling needs UGC data")
        if uid not in entropies:
            entropies[uid] = preference_entropy(
                genre_distribution(dataset.uploader_by_id[uid], dataset)
            )
    ordered = sorted(videos, key=lambda v: (-entropies[dataset.video_by_id[v].uploader_id],
                                            dataset.video_by_id[v].uploader_id, v))
    return _take_fraction(ordered, fraction)


def sample_matching_test(
    dataset: Dataset, ground_truth: GroundTruth | None, fraction: float, eligible=None
) -> tuple[str, ...]:
    """Videos whose selected clip matches best by the true score s*.

    Only defined on generated data; raises
    :class:`GroundTruthUnavailableError` otherwise.
    """
    if ground_truth is None:
        raise GroundTruthUnavailableError("matching test sampling needs generator ground truth")
    videos = _eligible_videos(dataset, eligible)
    chosen: dict[str, str] = {}
    for t in dataset.interactions:
        chosen.setdefault(t.video_id, t.music_id)
    scores: dict[str, float] = {}
    for vid in videos:
        if vid not in chosen:
            raise IntegrityError(f"video {vid} has no interaction; cannot score its match")
        scores[vid] = ground_truth.s_star(vid, chosen[vid])
    ordered = sorted(
        videos,
        key=lambda v: (-scores[v], dataset.video_by_id[v].uploader_id or "", v),
    )
    return _take_fraction(ordered, fraction)


# ---------------------------------------------------------------------------
# Ground-truth sidecar serialization
# ---------------------------------------------------------------------------


def save_ground_truth(truth: GroundTruth, path: str | Path) -> None:
    lines = [
        json.dumps({"record": "header", "kind": "truth", "latent_dim": truth.latent_dim})
    ]
    for i, vid in enumerate(truth.video_ids):
        lines.append(
            json.dumps({"record": "true_latent", "entity": "video", "id": vid,
                        "values": [float(x) for x in truth.video_latents[i]]})
        )
    for i, mid in enumerate(truth.music_ids):
        lines.append(
            json.dumps({"record": "true_latent", "entity": "music", "id": mid,
                        "values": [float(x) for x in truth.music_latents[i]]})
        )
    if truth.preferences is not None:
        for i, uid in enumerate(truth.uploader_ids):
            lines.append(
                json.dumps({"record": "preference", "uploader_id": uid,
                            "probs": [float(x) for x in truth.preferences[i]]})
            )
    Path(path).write_text("\n".join(lines) + "\n")


def load_ground_truth(path: str | Path) -> GroundTruth:
    latent_dim = None
    video_ids: list[str] = []
    video_latents: list[list[float]] = []
    music_ids: list[str] = []
    music_latents: list[list[float]] = []
    uploader_ids: list[str] = []
    prefs: list[list[float]] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("record")
        if kind == "header":
            latent_dim = rec["latent_dim"]
        elif kind == "true_latent":
            if rec["entity"] == "video":
                video_ids.append(rec["id"])
                video_latents.append(rec["values"])
            else:
                music_ids.append(rec["id"])
                music_latents.append(rec["values"])
        elif kind == "preference":
            uploader_ids.append(rec["uploader_id"])
            prefs.append(rec["probs"])
    if latent_dim is None:
        raise IntegrityError(f"{path}: missing ground-truth header")
    return GroundTruth(
        latent_dim=latent_dim,
        video_ids=tuple(video_ids),
        video_latents=np.array(video_latents, dtype=np.float64).reshape(len(video_ids), latent_dim),
        music_ids=tuple(music_ids),
        music_latents=np.array(music_latents, dtype=np.float64).reshape(len(music_ids), latent_dim),
        uploader_ids=tuple(uploader_ids),
        preferences=np.array(prefs, dtype=np.float64) if prefs else None,
    )
