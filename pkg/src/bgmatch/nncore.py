"""Shared neural machinery for the cross-modal matchers.

Gaussian encoders and decoders, the reparametrization trick, both analytic
KL forms, the cross-generation reconstruction loss, and the bidirectional
margin matching loss with in-batch hard negatives. Models run in float64 on
CPU; at desk scale the cost is negligible and every numeric tolerance in
the test suite gets comfortable headroom.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64

# Lower bound on posterior standard deviations; keeps both KL forms finite.
STD_FLOOR = 1e-6

CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Tensor dimensions disagree with a module or operation contract."""


@dataclass(frozen=True)
class DiagonalGaussian:
    """Diagonal Gaussian: per-dimension mean and strictly positive std.

    Both tensors share a trailing latent dimension; leading batch dimensions
    are allowed and broadcast through every operation below.
    """

    mean: Tensor
    std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise DimensionError(
                f"mean shape {tuple(self.mean.shape)} != std shape {tuple(self.std.shape)}"
            )
        if not bool((self.std > 0).all()):
            raise DimensionError("std must be strictly positive elementwise")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.std.detach())


class GaussianEncoder(nn.Module):
    """Two-layer encoder producing q(z | x) as a diagonal Gaussian.

    An affine layer with tanh (and optional dropout) feeds two heads for the
    mean and the log-variance; std = exp(log_var / 2), floored at
    ``STD_FLOOR``.
    """

    def __init__(self, in_dim: int, latent_dim: int, hidden_dim: int | None = None, dropout: float = 0.0):
        super().__init__()
        hidden = hidden_dim if hidden_dim is not None else in_dim
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.hidden = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.mean_head = nn.Linear(hidden, latent_dim, dtype=DTYPE)
        self.log_var_head = nn.Linear(hidden, latent_dim, dtype=DTYPE)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> DiagonalGaussian:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"encoder expects dim {self.in_dim}, got {x.shape[-1]}")
        h = self.drop(torch.tanh(self.hidden(x)))
        mean = self.mean_head(h)
        std = torch.exp(0.5 * self.log_var_head(h)).clamp(min=STD_FLOOR)
        return DiagonalGaussian(mean, std)


class Decoder(nn.Module):
    """Two-layer decoder mapping a latent vector back to feature space."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden = hidden_dim if hidden_dim is not None else out_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE),
            nn.Tanh(),
            nn.Linear(hidden, out_dim, dtype=DTYPE),
        )

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.in_dim:
            raise DimensionError(f"decoder expects dim {self.in_dim}, got {z.shape[-1]}")
        return self.net(z)


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize all linear layers from an explicit generator.

    Reproduces the stock uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scheme but
    keeps initialization independent of global RNG state.
    """
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.uniform_(-bound, bound, generator=generator)


def encode(encoder: GaussianEncoder, x: Tensor) -> DiagonalGaussian:
    return encoder(x)


def reparameterize(g: DiagonalGaussian, noise: Tensor) -> Tensor:
    """mean + std * noise, differentiable in both Gaussian parameters."""
    if noise.shape != g.mean.shape:
        raise DimensionError(
            f"noise shape {tuple(noise.shape)} != gaussian shape {tuple(g.mean.shape)}"
        )
    return g.mean + g.std * noise


def kl_to_standard_normal(g: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)) = sum_i (mu_i^2 + sigma_i^2 - 1 - ln sigma_i^2) / 2."""
    var = g.std * g.std
    return 0.5 * (g.mean * g.mean + var - 1.0 - torch.log(var)).sum(dim=-1)


def kl_between(a: DiagonalGaussian, b: DiagonalGaussian) -> Tensor:
    """KL(a || b) = sum_i ln(sb/sa) + (sa^2 + (ma-mb)^2) / (2 sb^2) - 1/2."""
    if a.dim != b.dim:
        raise DimensionError(f"gaussian dims differ: {a.dim} vs {b.dim}")
    var_a = a.std * a.std
    var_b = b.std * b.std
    diff = a.mean - b.mean
    return (torch.log(b.std / a.std) + (var_a + diff * diff) / (2.0 * var_b) - 0.5).sum(dim=-1)


def reconstruction_loss(decoder: Decoder, z: Tensor, target: Tensor) -> Tensor:
    """Mean squared error between the decoded latent and the target feature."""
    out = decoder(z)
    if out.shape != target.shape:
        raise DimensionError(
            f"decoded shape {tuple(out.shape)} != target shape {tuple(target.shape)}"
        )
    diff = out - target
    return (diff * diff).mean()


def matching_score(z_v: Tensor, z_m: Tensor) -> Tensor:
    """Dot product of video and music latents (same dimension)."""
    if z_v.shape[-1] != z_m.shape[-1]:
        raise DimensionError(f"latent dims differ: {z_v.shape[-1]} vs {z_m.shape[-1]}")
    return (z_v * z_m).sum(dim=-1)


def score_matrix(z_v: Tensor, z_m: Tensor) -> Tensor:
    """All-pairs dot products: entry (i, j) scores video i against music j."""
    if z_v.shape[-1] != z_m.shape[-1]:
        raise DimensionError(f"latent dims differ: {z_v.shape[-1]} vs {z_m.shape[-1]}")
    return z_v @ z_m.transpose(-1, -2)


def margin_ranking_loss(pos_score: Tensor, neg_scores: Tensor, margin: float, n_hard: int) -> Tensor:
    """Hinge loss against the hardest negatives.

    Averages max(0, margin - pos + neg) over the ``n_hard`` largest negative
    scores (all of them when fewer are given).
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if n_hard < 1:
        raise ValueError(f"n_hard must be at least 1, got {n_hard}")
    if neg_scores.numel() == 0:
        raise ValueError("neg_scores must be non-empty")
    flat = neg_scores.reshape(-1)
    k = min(n_hard, flat.numel())
    hard = torch.topk(flat, k).values
    return torch.clamp(margin - pos_score + hard, min=0.0).mean()


def bidirectional_matching_loss(
    scores: Tensor,
    margin: float,
    n_hard: int,
    m2v_weight: float = 1.0,
    sample_weights: Tensor | None = None,
) -> Tensor:
    """Margin matching loss over an in-batch score matrix, both directions.

    Row direction ranks music for each video, column direction ranks videos
    for each music clip (weighted by ``m2v_weight``); positives sit on the
    diagonal and the hardest ``n_hard`` in-batch negatives enter each hinge.
    ``sample_weights`` (one per pair) rescales both directional terms of
    that pair, which is how inverse-propensity weighting hooks in.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"scores must be square, got shape {tuple(scores.shape)}")
    b = scores.shape[0]
    if b < 2:
        raise ValueError("need at least two in-batch pairs to form negatives")
    pos = torch.diagonal(scores)
    eye = torch.eye(b, dtype=torch.bool, device=scores.device)
    neg_inf = torch.tensor(-math.inf, dtype=scores.dtype)
    k = min(n_hard, b - 1)

    row_negs = torch.topk(scores.masked_fill(eye, neg_inf), k, dim=1).values
    v2m = torch.clamp(margin - pos.unsqueeze(1) + row_negs, min=0.0).mean(dim=1)
    col_negs = torch.topk(scores.masked_fill(eye, neg_inf), k, dim=0).values
    m2v = torch.clamp(margin - pos.unsqueeze(0) + col_negs, min=0.0).mean(dim=0)

    per_pair = v2m + m2v_weight * m2v
    if sample_weights is not None:
        if sample_weights.shape != (b,):
            raise DimensionError(
                f"sample_weights shape {tuple(sample_weights.shape)} != ({b},)"
            )
        per_pair = per_pair * sample_weights
    return per_pair.mean()


@dataclass
class Batch:
    """A minibatch of aligned video-music pairs plus uploader context.

    ``kind`` mirrors the source dataset kind. Preference rows, uploader ids,
    genres, and propensities are present for UGC batches and None for PGC.
    """

    kind: str
    video: Tensor
    music: Tensor
    uploader_ids: tuple[str, ...] | None = None
    prefs: Tensor | None = None
    genres: Tensor | None = None
    propensity: Tensor | None = None

    def __len__(self) -> int:
        return self.video.shape[0]


def cross_generation_from_posteriors(
    q_v: DiagonalGaussian,
    q_m: DiagonalGaussian,
    video_decoder: Decoder,
    music_decoder: Decoder,
    video: Tensor,
    music: Tensor,
    noise_video: Tensor,
    noise_music: Tensor,
    *,
    margin: float,
    n_hard: int,
    m2v_weight: float = 1.0,
    recon_weight: float = 1.0,
    kl_weight: float = 1.0,
    sample_weights: Tensor | None = None,
    music_latent_transform=None,
) -> dict[str, Tensor]:
    """Cross-generation objective given precomputed posteriors.

    Reconstructs each modality from the other's latent sample, regularizes
    both posteriors toward N(0, I), and adds the bidirectional margin
    matching loss. ``music_latent_transform`` maps the sampled music latent
    to ``(latent for the video decoder, latent for matching)``; identity
    when None. Returns a component dict whose ``total`` is the exact sum of
    the weighted parts.
    """
    z_v = reparameterize(q_v, noise_video)
    z_m = reparameterize(q_m, noise_music)
    if music_latent_transform is None:
        z_m_decode, z_m_match = z_m, z_m
    else:
        z_m_decode, z_m_match = music_latent_transform(z_m)
    recon_video = reconstruction_loss(video_decoder, z_m_decode, video)
    recon_music = reconstruction_loss(music_decoder, z_v, music)
    kl_video = kl_to_standard_normal(q_v).mean()
    kl_music = kl_to_standard_normal(q_m).mean()
    matching = bidirectional_matching_loss(
        score_matrix(z_v, z_m_match),
        margin=margin,
        n_hard=n_hard,
        m2v_weight=m2v_weight,
        sample_weights=sample_weights,
    )
    total = (
        recon_weight * (recon_video + recon_music)
        + kl_weight * (kl_video + kl_music)
        + matching
    )
    return {
        "recon_video": recon_video,
        "recon_music": recon_music,
        "kl_video": kl_video,
        "kl_music": kl_music,
        "matching": matching,
        "total": total,
    }


def cross_generation_loss(
    video_encoder: GaussianEncoder,
    music_encoder: GaussianEncoder,
    video_decoder: Decoder,
    music_decoder: Decoder,
    video: Tensor,
    music: Tensor,
    noise_video: Tensor,
    noise_music: Tensor,
    **kwargs,
) -> dict[str, Tensor]:
    """Cross-generation objective straight from raw features."""
    return cross_generation_from_posteriors(
        video_encoder(video),
        music_encoder(music),
        video_decoder,
        music_decoder,
        video,
        music,
        noise_video,
        noise_music,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def parameter_fingerprint(module: nn.Module) -> str:
    """sha256 over all named parameters and buffers, name-sorted."""
    digest = hashlib.sha256()
    entries = list(module.named_parameters()) + list(module.named_buffers())
    for name, tensor in sorted(entries, key=lambda kv: kv[0]):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path,
    *,
    kind: str,
    tensors: dict[str, Tensor],
    meta: dict | None = None,
    config_hash: str = "",
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config_hash": config_hash,
        "shapes": {name: list(t.shape) for name, t in tensors.items()},
        "tensors": {name: t.detach().cpu() for name, t in tensors.items()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    payload = torch.load(path, weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ValueError(f"checkpoint kind {payload.get('kind')!r}, expected {expected_kind!r}")
    for name, shape in payload["shapes"].items():
        actual = list(payload["tensors"][name].shape)
        if actual != shape:
            raise ValueError(f"checkpoint tensor {name} has shape {actual}, recorded {shape}")
    return payload


def to_tensor(values, dtype=DTYPE) -> Tensor:
    """Convert numpy arrays or sequences to a torch tensor of the house dtype."""
    if isinstance(values, Tensor):
        return values.to(dtype)
    # Copy so read-only feature arrays never back a writable tensor.
    return torch.as_tensor(np.array(values), dtype=dtype)
