"""Deconfounded student network trained on uploader-selected (UGC) pairs.

The student pairs cross-generation training with a causal correction: the
uploader genre-preference confounder is blocked by conditioning the music
embedding on the expected preference over the uploader population. During
training that expectation is the batch-level average (a Monte Carlo draw);
at inference it is the global training-set average. The genre context is
embedded through a learnable table, concatenated to the music latent for
decoding, and projected back to latent size for score computation. A frozen
teacher can additionally guide both posteriors through KL terms.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .datamodel import (
    UGC,
    Dataset,
    GenrePreference,
    MusicClip,
    genre_distribution,
)
from .nncore import (
    Batch,
    Decoder,
    DTYPE,
    GaussianEncoder,
    cross_generation_from_posteriors,
    init_parameters,
    kl_between,
    load_checkpoint,
    parameter_fingerprint,
    save_checkpoint,
    to_tensor,
)
from .synthgen import SplitSpec, materialize_split
from .teacher import (
    FrozenModelError,
    KindMismatchError,
    NonFiniteLossError,
    TeacherModel,
    derive_seed,
    infer_teacher_latents,
)

DECONFOUNDER_MODES = ("batch_average", "global_average", "off")
KT_DIRECTIONS = ("teacher_to_student", "student_to_teacher")


@dataclass(frozen=True)
class StudentHyper:
    latent_dim: int = 16
    hidden_dim: int | None = None
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout: float = 0.2
    margin: float = 0.05
    n_hard: int = 40
    m2v_weight: float = 1.0
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    kt_weight_video: float = 40.0
    kt_weight_music: float = 40.0
    kt_direction: str = "teacher_to_student"
    deconfounder_mode: str = "batch_average"
    ips: bool = False
    ips_floor: float = 0.01
    # Group each epoch's sample order by uploader so a batch covers few
    # uploaders and its average preference is a sharp confounder estimate.
    batch_by_uploader: bool = True

    def __post_init__(self):
        if self.deconfounder_mode not in DECONFOUNDER_MODES:
            raise ValueError(f"unknown deconfounder mode {self.deconfounder_mode!r}")
        if self.kt_direction not in KT_DIRECTIONS:
            raise ValueError(f"unknown kt direction {self.kt_direction!r}")
        if not 0.0 < self.ips_floor <= 1.0:
            raise ValueError(f"ips_floor must lie in (0, 1], got {self.ips_floor}")


@dataclass(frozen=True)
class RankingResult:
    """Top-K music for one query video, scores nonincreasing."""

    video_id: str
    items: tuple[tuple[str, float], ...]
    K: int

    def __post_init__(self):
        ids = [m for m, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("ranking contains duplicate music ids")
        scores = [s for _, s in self.items]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValueError("ranking scores must be nonincreasing")

    def position_of(self, music_id: str) -> int | None:
        """1-indexed rank of a clip, or None when absent from the list."""
        for i, (mid, _) in enumerate(self.items, start=1):
            if mid == music_id:
                return i
        return None


class StudentModel(nn.Module):
    """Cross-generation matcher with an optional genre-context deconfounder.

    With the deconfounder off, the model is the plain backbone: the video
    decoder consumes the d-dimensional music latent directly and scores are
    dot products of raw latents. Otherwise the video decoder consumes the 2d
    concatenation [z_m, genre context] and a learned 2d -> d projection
    produces the latent used for scoring.
    """

    def __init__(
        self,
        F_video: int,
        F_music: int,
        n_genres: int,
        hyper: StudentHyper,
        generator: torch.Generator,
    ):
        super().__init__()
        d = hyper.latent_dim
        self.hyper = hyper
        self.dims = (F_video, F_music)
        self.n_genres = n_genres
        self.video_encoder = GaussianEncoder(F_video, d, hyper.hidden_dim, hyper.dropout)
        self.music_encoder = GaussianEncoder(F_music, d, hyper.hidden_dim, hyper.dropout)
        self.music_decoder = Decoder(d, F_music, hyper.hidden_dim)
        if hyper.deconfounder_mode == "off":
            self.video_decoder = Decoder(d, F_video, hyper.hidden_dim)
            self.genre_table = None
            self.match_projection = None
        else:
            self.video_decoder = Decoder(2 * d, F_video, hyper.hidden_dim)
            self.genre_table = nn.Parameter(torch.empty(d, n_genres, dtype=DTYPE))
            self.match_projection = nn.Linear(2 * d, d, dtype=DTYPE)
        init_parameters(self, generator)
        if self.genre_table is not None:
            bound = 1.0 / math.sqrt(d)
            with torch.no_grad():
                self.genre_table.uniform_(-bound, bound, generator=generator)
                # Residual-style start: the projection passes z_m through
                # unchanged and ignores the context, so scoring begins at
                # exactly the backbone geometry and learns deviations.
                self.match_projection.weight.zero_()
                self.match_projection.weight[:, :d] = torch.eye(d, dtype=DTYPE)
                self.match_projection.bias.zero_()
        self.register_buffer("global_pref", torch.full((n_genres,), 1.0 / n_genres, dtype=DTYPE))
        self.history: list[dict] = []

    @property
    def latent_dim(self) -> int:
        return self.hyper.latent_dim

    @property
    def deconfounder_mode(self) -> str:
        return self.hyper.deconfounder_mode

    def set_global_preference(self, pref) -> None:
        pref = to_tensor(pref)
        if pref.shape != (self.n_genres,):
            raise ValueError(f"global preference shape {tuple(pref.shape)} != ({self.n_genres},)")
        with torch.no_grad():
            self.global_pref.copy_(pref)

    def rank(self, video_feature, pool, K: int, video_id: str = "query") -> RankingResult:
        return rank_music(self, video_feature, pool, K, video_id=video_id)


def batch_average_preference(prefs, uploader_ids=None) -> np.ndarray:
    """Mean preference over the distinct uploaders present in a batch.

    ``prefs`` is one preference row per batch sample; when ``uploader_ids``
    is given, repeated uploaders count once (the set-of-uploaders average).
    """
    if isinstance(prefs, (list, tuple)) and prefs and isinstance(prefs[0], GenrePreference):
        mat = np.stack([p.probs for p in prefs])
    else:
        mat = np.asarray(prefs, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat.reshape(1, -1)
    if mat.shape[0] == 0:
        raise ValueError("empty batch")
    if uploader_ids is not None:
        if len(uploader_ids) != mat.shape[0]:
            raise ValueError("uploader_ids length does not match preference rows")
        seen: dict[str, int] = {}
        for i, uid in enumerate(uploader_ids):
            seen.setdefault(uid, i)
        mat = mat[sorted(seen.values())]
    return np.array([math.fsum(mat[:, g]) / mat.shape[0] for g in range(mat.shape[1])])


def global_average_preference(dataset: Dataset) -> np.ndarray:
    """Mean genre distribution over every uploader in the training data."""
    uploaders = sorted(dataset.uploaders, key=lambda u: u.uploader_id)
    if not uploaders:
        raise ValueError("dataset has no uploaders")
    mat = np.stack([genre_distribution(u, dataset).probs for u in uploaders])
    return np.array([math.fsum(mat[:, g]) / mat.shape[0] for g in range(mat.shape[1])])


def genre_context(table: Tensor, pref) -> Tensor:
    """Embed a genre preference through the table: context = table @ pref."""
    pref_t = to_tensor(pref)
    if pref_t.shape != (table.shape[1],):
        raise ValueError(f"preference shape {tuple(pref_t.shape)} != ({table.shape[1]},)")
    return table @ pref_t


def deconfound(z_m: Tensor, pref, table: Tensor) -> Tensor:
    """Concatenate the embedded preference context onto each music latent.

    Returns the 2d-dimensional [z_m, context] rows consumed by the video
    decoder; callers project them back to d for score computation.
    """
    ctx = genre_context(table, pref)
    if z_m.ndim == 1:
        return torch.cat([z_m, ctx])
    return torch.cat([z_m, ctx.expand(z_m.shape[0], -1)], dim=1)


def _batch_pref(model: StudentModel, batch: Batch) -> np.ndarray | None:
    mode = model.deconfounder_mode
    if mode == "off":
        return None
    if mode == "global_average":
        return model.global_pref.numpy()
    if batch.prefs is None:
        raise ValueError("batch carries no uploader preferences; cannot batch-average")
    return batch_average_preference(batch.prefs.numpy(), batch.uploader_ids)


def student_loss(
    model: StudentModel,
    teacher: TeacherModel | None,
    batch: Batch,
    noise_video: Tensor,
    noise_music: Tensor,
) -> dict[str, Tensor]:
    """Full student objective on one UGC batch, with component breakdown.

    Components: the cross-generation parts (on the deconfounded music latent
    when the deconfounder is active), plus ``kt_video`` and ``kt_music``
    knowledge-transfer KLs against the frozen teacher, scaled by their
    weights inside ``total``. Inverse-propensity weighting, when enabled,
    rescales each sample's matching term by 1 / max(propensity, floor).
    """
    if batch.kind != UGC:
        raise KindMismatchError(f"student expects UGC batches, got kind {batch.kind!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    h = model.hyper

    q_v = model.video_encoder(batch.video)
    q_m = model.music_encoder(batch.music)

    pref = _batch_pref(model, batch)
    if pref is None:
        transform = None
    else:
        table = model.genre_table

        def transform(z_m: Tensor):
            z_dec = deconfound(z_m, pref, table)
            return z_dec, model.match_projection(z_dec)

    sample_weights = None
    if h.ips:
        if batch.propensity is None:
            raise ValueError("ips mode needs per-sample propensities in the batch")
        sample_weights = 1.0 / torch.clamp(batch.propensity, min=h.ips_floor)

    comps = cross_generation_from_posteriors(
        q_v,
        q_m,
        model.video_decoder,
        model.music_decoder,
        batch.video,
        batch.music,
        noise_video,
        noise_music,
        margin=h.margin,
        n_hard=h.n_hard,
        m2v_weight=h.m2v_weight,
        recon_weight=h.recon_weight,
        kl_weight=h.kl_weight,
        sample_weights=sample_weights,
        music_latent_transform=transform,
    )

    if h.kt_weight_video > 0.0 or h.kt_weight_music > 0.0:
        if teacher is None:
            raise ValueError("knowledge-transfer weights are positive but no teacher was given")
        if not teacher.frozen:
            raise FrozenModelError("teacher must be frozen before guiding the student")
        t_qv, t_qm = infer_teacher_latents(teacher, batch.video, batch.music)
        if h.kt_direction == "teacher_to_student":
            kt_video = kl_between(t_qv, q_v).mean()
            kt_music = kl_between(t_qm, q_m).mean()
        else:
            kt_video = kl_between(q_v, t_qv).mean()
            kt_music = kl_between(q_m, t_qm).mean()
    else:
        kt_video = torch.zeros((), dtype=DTYPE)
        kt_music = torch.zeros((), dtype=DTYPE)

    comps["kt_video"] = kt_video
    comps["kt_music"] = kt_music
    comps["total"] = comps["total"] + h.kt_weight_video * kt_video + h.kt_weight_music * kt_music
    return comps


@dataclass
class _TrainingArrays:
    video: Tensor
    music: Tensor
    prefs: Tensor
    uploader_ids: tuple[str, ...]
    genres: Tensor
    propensity: Tensor

    def batch(self, idx) -> Batch:
        ids = tuple(self.uploader_ids[i] for i in idx)
        return Batch(
            UGC,
            self.video[idx],
            self.music[idx],
            uploader_ids=ids,
            prefs=self.prefs[idx],
            genres=self.genres[idx],
            propensity=self.propensity[idx],
        )


def build_training_arrays(view: Dataset) -> _TrainingArrays:
    """Per-interaction tensors for a split view, interaction order."""
    pref_by_uploader = {
        u.uploader_id: genre_distribution(u, view).probs for u in view.uploaders
    }
    video = np.stack([view.video_by_id[t.video_id].feature for t in view.interactions])
    music = np.stack([view.music_by_id[t.music_id].feature for t in view.interactions])
    prefs = np.stack([pref_by_uploader[t.uploader_id] for t in view.interactions])
    genres = np.array([view.music_by_id[t.music_id].genre for t in view.interactions])
    propensity = prefs[np.arange(len(view.interactions)), genres]
    return _TrainingArrays(
        video=to_tensor(video),
        music=to_tensor(music),
        prefs=to_tensor(prefs),
        uploader_ids=tuple(t.uploader_id for t in view.interactions),
        genres=torch.as_tensor(genres),
        propensity=to_tensor(propensity),
    )


def train_student(
    ugc: Dataset,
    split: SplitSpec,
    teacher: TeacherModel | None,
    hyper: StudentHyper,
    seed: int = 0,
) -> StudentModel:
    """Train the student on the training split, select on validation loss.

    Returns the best-validation checkpoint with the global-average training
    preference cached for inference. Deterministic given the seed. On a
    non-finite loss, training stops and the best checkpoint so far is
    returned with ``aborted`` recorded in the history.
    """
    if ugc.kind != UGC:
        raise KindMismatchError(f"train_student expects a UGC dataset, got {ugc.kind!r}")
    if teacher is None and (hyper.kt_weight_video > 0 or hyper.kt_weight_music > 0):
        raise ValueError("knowledge-transfer weights are positive but no teacher was given")
    if teacher is not None and not teacher.frozen:
        raise FrozenModelError("teacher must be frozen before student training")

    train_view = materialize_split(ugc, split, "train")
    val_view = materialize_split(ugc, split, "val")
    if len(train_view.interactions) < 2:
        raise ValueError("training split has fewer than 2 interactions")
    arrays = build_training_arrays(train_view)
    val_arrays = build_training_arrays(val_view) if len(val_view.interactions) >= 2 else None

    gen_init = torch.Generator().manual_seed(derive_seed(seed, "student-init"))
    model = StudentModel(ugc.dims[0], ugc.dims[1], ugc.n_genres, hyper, gen_init)
    model.set_global_preference(global_average_preference(train_view))
    torch.manual_seed(derive_seed(seed, "student-dropout"))
    gen_noise = torch.Generator().manual_seed(derive_seed(seed, "student-noise"))
    # L2 pulls weights toward zero, which for the match projection means
    # away from its identity pass-through start; leave the deconfounder
    # parameters undecayed.
    undecayed = {"match_projection.weight", "match_projection.bias", "genre_table"}
    optimizer = torch.optim.Adam(
        [
            {"params": [p for n, p in model.named_parameters() if n not in undecayed],
             "weight_decay": hyper.weight_decay},
            {"params": [p for n, p in model.named_parameters() if n in undecayed],
             "weight_decay": 0.0},
        ],
        lr=hyper.lr,
    )
    order_rng = np.random.default_rng(derive_seed(seed, "student-order"))
    n = len(arrays.uploader_ids)
    d = hyper.latent_dim

    val_gt_index = None
    if val_arrays is not None:
        val_pool_ids = sorted(val_view.music_by_id)
        val_pool_feats = to_tensor(
            np.stack([val_view.music_by_id[m].feature for m in val_pool_ids])
        )
        pos = {m: i for i, m in enumerate(val_pool_ids)}
        val_gt_index = torch.as_tensor(
            [pos[t.music_id] for t in val_view.interactions]
        )

    def validation_components() -> dict[str, float] | None:
        if val_arrays is None:
            return None
        model.eval()
        with torch.no_grad():
            comps = student_loss(
                model,
                teacher,
                val_arrays.batch(np.arange(len(val_arrays.uploader_ids))),
                torch.zeros(len(val_arrays.uploader_ids), d, dtype=DTYPE),
                torch.zeros(len(val_arrays.uploader_ids), d, dtype=DTYPE),
            )
            # Ranking surrogate for checkpoint selection: where does each
            # validation video's true clip land in the validation pool,
            # scored exactly as inference would score it.
            z_v = model.video_encoder(val_arrays.video).mean
            z_m = model.music_encoder(val_pool_feats).mean
            if model.deconfounder_mode != "off":
                z_m = model.match_projection(deconfound(z_m, model.global_pref, model.genre_table))
            scores = z_v @ z_m.T
            gt_scores = scores.gather(1, val_gt_index.unsqueeze(1))
            ranks = (scores > gt_scores).sum(dim=1).to(DTYPE) + 1.0
            gt_rank = float(ranks.mean()) / scores.shape[1]
        model.train()
        out = {k: float(v) for k, v in comps.items()}
        out["gt_rank"] = gt_rank
        return out

    def epoch_order() -> np.ndarray:
        if not hyper.batch_by_uploader:
            return order_rng.permutation(n)
        blocks: dict[str, list[int]] = {}
        for i, uid in enumerate(arrays.uploader_ids):
            blocks.setdefault(uid, []).append(i)
        uploader_order = order_rng.permutation(sorted(blocks))
        order: list[int] = []
        for uid in uploader_order:
            idx = np.array(blocks[uid])
            order.extend(idx[order_rng.permutation(len(idx))])
        return np.array(order)

    best_state = copy.deepcopy(model.state_dict())
    first_val = validation_components()
    best_score = first_val["gt_rank"] if first_val is not None else float("nan")
    aborted = False
    model.train()
    for epoch in range(hyper.epochs):
        perm = epoch_order()
        epoch_rows: list[dict[str, float]] = []
        for start in range(0, n, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            if len(idx) < 2:
                continue
            noise_v = torch.randn(len(idx), d, dtype=DTYPE, generator=gen_noise)
            noise_m = torch.randn(len(idx), d, dtype=DTYPE, generator=gen_noise)
            comps = student_loss(model, teacher, arrays.batch(idx), noise_v, noise_m)
            total = comps["total"]
            if not torch.isfinite(total):
                aborted = True
                break
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_rows.append({k: float(v.detach()) for k, v in comps.items()})
        if epoch_rows:
            means = {k: float(np.mean([r[k] for r in epoch_rows])) for k in epoch_rows[0]}
        else:
            means = {}
        row = {"epoch": epoch, **{f"train_{k}": v for k, v in means.items()}}
        val = validation_components()
        if val is not None:
            row.update({f"val_{k}": v for k, v in val.items()})
            if np.isnan(best_score) or val["gt_rank"] < best_score:
                best_score = val["gt_rank"]
                best_state = copy.deepcopy(model.state_dict())
        else:
            best_state = copy.deepcopy(model.state_dict())
        if aborted:
            row["aborted"] = True
            model.history.append(row)
            break
        model.history.append(row)

    model.load_state_dict(best_state)
    model.eval()
    return model


def rank_from_scores(video_id: str, music_ids, scores, K: int) -> RankingResult:
    """Order clips by score (descending), ties broken by music id."""
    if len(music_ids) == 0:
        raise ValueError("empty music pool")
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    order = sorted(range(len(music_ids)), key=lambda i: (-float(scores[i]), music_ids[i]))
    top = order[: min(K, len(order))]
    return RankingResult(
        video_id=video_id,
        items=tuple((music_ids[i], float(scores[i])) for i in top),
        K=K,
    )


def rank_music(
    model: StudentModel,
    video_feature,
    pool: list[MusicClip],
    K: int,
    video_id: str = "query",
) -> RankingResult:
    """Score a music pool for one video and return the top K.

    Uses posterior means (no sampling) so rankings are deterministic. With
    the deconfounder active, every pool clip is conditioned on the cached
    global-average preference before projection.
    """
    if not pool:
        raise ValueError("empty music pool")
    model.eval()
    v = to_tensor(video_feature)
    feats = to_tensor(np.stack([clip.feature for clip in pool]))
    with torch.no_grad():
        z_v = model.video_encoder(v).mean
        z_m = model.music_encoder(feats).mean
        if model.deconfounder_mode != "off":
            z_m = model.match_projection(deconfound(z_m, model.global_pref, model.genre_table))
        scores = (z_m @ z_v).numpy()
    return rank_from_scores(video_id, [clip.music_id for clip in pool], scores, K)


def save_student(model: StudentModel, path, teacher_hash: str = "", config_hash: str = "") -> None:
    meta = {
        "dims": list(model.dims),
        "n_genres": model.n_genres,
        "hyper": {k: (v if v is not None else -1) for k, v in vars(model.hyper).items()},
        "teacher_hash": teacher_hash,
        "deconfounder_mode": model.deconfounder_mode,
    }
    save_checkpoint(path, kind="student", tensors=dict(model.state_dict()), meta=meta, config_hash=config_hash)


def load_student(path) -> StudentModel:
    payload = load_checkpoint(path, expected_kind="student")
    meta = payload["meta"]
    hyper_kwargs = dict(meta["hyper"])
    if hyper_kwargs.get("hidden_dim") == -1:
        hyper_kwargs["hidden_dim"] = None
    hyper = StudentHyper(**hyper_kwargs)
    model = StudentModel(
        meta["dims"][0], meta["dims"][1], meta["n_genres"], hyper, torch.Generator().manual_seed(0)
    )
    model.load_state_dict(payload["tensors"])
    model.eval()
    return model
