"""Teacher network trained on expert-matched (PGC) pairs.

The teacher is a cross-generation variational matcher. After training it is
frozen and serves two purposes: its inference encoders guide the student via
KL knowledge transfer, and its matching scores impute soft labels for the
label-distillation baseline.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .datamodel import PGC, Dataset
from .nncore import (
    Batch,
    Decoder,
    DiagonalGaussian,
    DTYPE,
    GaussianEncoder,
    cross_generation_from_posteriors,
    init_parameters,
    load_checkpoint,
    parameter_fingerprint,
    save_checkpoint,
    to_tensor,
)


class KindMismatchError(ValueError):
    """A batch or dataset of the wrong kind reached a model."""


class FrozenModelError(RuntimeError):
    """An operation required (or forbade) a frozen model."""


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss value."""


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit stream seed for a named purpose."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class TeacherHyper:
    latent_dim: int = 16
    hidden_dim: int | None = None
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-3
    dropout: float = 0.2
    margin: float = 0.05
    n_hard: int = 40
    m2v_weight: float = 1.0
    recon_weight: float = 1.0
    kl_weight: float = 1.0
    holdout_fraction: float = 0.1


class TeacherModel(nn.Module):
    """Variational video/music encoders plus cross decoders, freezable."""

    def __init__(self, F_video: int, F_music: int, hyper: TeacherHyper, generator: torch.Generator):
        super().__init__()
        d = hyper.latent_dim
        self.hyper = hyper
        self.dims = (F_video, F_music)
        self.video_encoder = GaussianEncoder(F_video, d, hyper.hidden_dim, hyper.dropout)
        self.music_encoder = GaussianEncoder(F_music, d, hyper.hidden_dim, hyper.dropout)
        self.video_decoder = Decoder(d, F_video, hyper.hidden_dim)
        self.music_decoder = Decoder(d, F_music, hyper.hidden_dim)
        init_parameters(self, generator)
        self.frozen = False
        self._fingerprint: str | None = None
        self.history: list[dict] = []

    @property
    def latent_dim(self) -> int:
        return self.hyper.latent_dim

    def freeze(self) -> None:
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        self._fingerprint = parameter_fingerprint(self)

    def fingerprint(self) -> str:
        return parameter_fingerprint(self)

    def assert_intact(self) -> None:
        """Raise if parameters changed since :meth:`freeze`."""
        if not self.frozen or self._fingerprint is None:
            raise FrozenModelError("teacher is not frozen")
        if parameter_fingerprint(self) != self._fingerprint:
            raise FrozenModelError("frozen teacher parameters were perturbed")


def teacher_loss(model: TeacherModel, batch: Batch, noise_video: Tensor, noise_music: Tensor) -> dict[str, Tensor]:
    """Cross-generation objective on one PGC batch, with component breakdown."""
    if batch.kind != PGC:
        raise KindMismatchError(f"teacher expects PGC batches, got kind {batch.kind!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    h = model.hyper
    return cross_generation_from_posteriors(
        model.video_encoder(batch.video),
        model.music_encoder(batch.music),
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
    )


def pair_tensors(dataset: Dataset) -> tuple[Tensor, Tensor]:
    """Stack (video, music) features of all interactions, interaction order."""
    video = np.stack([dataset.video_by_id[t.video_id].feature for t in dataset.interactions])
    music = np.stack([dataset.music_by_id[t.music_id].feature for t in dataset.interactions])
    return to_tensor(video), to_tensor(music)


def _mean_components(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def train_teacher(pgc: Dataset, hyper: TeacherHyper, seed: int = 0) -> TeacherModel:
    """Train on PGC pairs with Adam; return the frozen best checkpoint.

    A held-out fraction of pairs (scored noise-free) selects the best epoch.
    Deterministic given the seed: parameter init, batch order, and noise all
    derive from it.
    """
    if pgc.kind != PGC:
        raise KindMismatchError(f"train_teacher expects a PGC dataset, got {pgc.kind!r}")
    n = len(pgc.interactions)
    if n < 2:
        raise ValueError(f"need at least 2 PGC pairs to train, got {n}")

    video, music = pair_tensors(pgc)
    holdout = max(1, int(round(hyper.holdout_fraction * n))) if n >= 4 else 0
    order = np.random.default_rng(derive_seed(seed, "teacher-holdout")).permutation(n)
    hold_idx, train_idx = order[:holdout], order[holdout:]
    if len(train_idx) < 2:
        hold_idx, train_idx = order[:0], order

    gen_init = torch.Generator().manual_seed(derive_seed(seed, "teacher-init"))
    model = TeacherModel(pgc.dims[0], pgc.dims[1], hyper, gen_init)
    torch.manual_seed(derive_seed(seed, "teacher-dropout"))
    gen_noise = torch.Generator().manual_seed(derive_seed(seed, "teacher-noise"))
    optimizer = torch.optim.Adam(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    order_rng = np.random.default_rng(derive_seed(seed, "teacher-order"))

    def holdout_score() -> float:
        """Mean normalized rank of each held-out pair's true clip.

        Checkpoint selection tracks ranking quality rather than the ELBO
        total, whose KL term keeps growing while matching still improves.
        """
        if len(hold_idx) < 2:
            return float("nan")
        model.eval()
        with torch.no_grad():
            z_v = model.video_encoder(video[hold_idx]).mean
            z_m = model.music_encoder(music[hold_idx]).mean
            scores = z_v @ z_m.T
            gt = torch.diagonal(scores).unsqueeze(1)
            ranks = (scores > gt).sum(dim=1).to(DTYPE) + 1.0
        model.train()
        return float(ranks.mean()) / len(hold_idx)

    best_state = copy.deepcopy(model.state_dict())
    best_score = holdout_score()
    model.train()
    for epoch in range(hyper.epochs):
        perm = order_rng.permutation(train_idx)
        epoch_rows: list[dict[str, float]] = []
        for start in range(0, len(perm), hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            if len(idx) < 2:
                continue
            noise_v = torch.randn(len(idx), hyper.latent_dim, dtype=DTYPE, generator=gen_noise)
            noise_m = torch.randn(len(idx), hyper.latent_dim, dtype=DTYPE, generator=gen_noise)
            comps = teacher_loss(model, Batch(PGC, video[idx], music[idx]), noise_v, noise_m)
            total = comps["total"]
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite teacher loss at epoch {epoch}: "
                    + ", ".join(f"{k}={float(v):.6g}" for k, v in comps.items())
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_rows.append({k: float(v.detach()) for k, v in comps.items()})
        row = {"epoch": epoch, **{f"train_{k}": v for k, v in _mean_components(epoch_rows).items()}}
        score = holdout_score()
        row["holdout_gt_rank"] = score
        model.history.append(row)
        if np.isnan(best_score) or (not np.isnan(score) and score < best_score):
            best_score = score
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.freeze()
    return model


def infer_teacher_latents(model: TeacherModel, video, music) -> tuple[DiagonalGaussian, DiagonalGaussian]:
    """Frozen-teacher posteriors for (video, music) features, gradient-free."""
    if not model.frozen:
        raise FrozenModelError("teacher must be frozen before inference is exposed")
    v = to_tensor(video)
    m = to_tensor(music)
    model.eval()
    with torch.no_grad():
        q_v = model.video_encoder(v)
        q_m = model.music_encoder(m)
    return q_v.detach(), q_m.detach()


def impute_labels(model: TeacherModel, ugc: Dataset, weight: float) -> np.ndarray:
    """Blend observed labels with squashed teacher scores, per interaction.

    target = (1 - weight) * y + weight * sigmoid(score), using posterior
    means for a deterministic score. Returned array follows
    ``ugc.interactions`` order.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    if not model.frozen:
        raise FrozenModelError("teacher must be frozen before imputing labels")
    video, music = pair_tensors(ugc)
    q_v, q_m = infer_teacher_latents(model, video, music)
    scores = (q_v.mean * q_m.mean).sum(dim=-1)
    teacher_part = torch.sigmoid(scores).numpy()
    y = np.array([t.y for t in ugc.interactions], dtype=np.float64)
    return (1.0 - weight) * y + weight * teacher_part


def save_teacher(model: TeacherModel, path, config_hash: str = "") -> None:
    meta = {
        "dims": list(model.dims),
        "hyper": {k: (v if v is not None else -1) for k, v in vars(model.hyper).items()},
        "frozen": model.frozen,
    }
    save_checkpoint(path, kind="teacher", tensors=dict(model.state_dict()), meta=meta, config_hash=config_hash)


def load_teacher(path) -> TeacherModel:
    payload = load_checkpoint(path, expected_kind="teacher")
    meta = payload["meta"]
    hyper_kwargs = dict(meta["hyper"])
    if hyper_kwargs.get("hidden_dim") == -1:
        hyper_kwargs["hidden_dim"] = None
    hyper = TeacherHyper(**hyper_kwargs)
    model = TeacherModel(meta["dims"][0], meta["dims"][1], hyper, torch.Generator().manual_seed(0))
    model.load_state_dict(payload["tensors"])
    if meta.get("frozen"):
        model.freeze()
    return model
