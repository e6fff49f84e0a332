"""Training objectives: noise-norm regularizer, GAN pair, correspondence RMSE,
in-batch contrastive terms, and the weighted total.

All functions are pure and dtype-preserving (float64 inputs give float64
results, which the oracle tests rely on).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch

LOG_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0  # GAN weight in the total
    beta: float = 0.1  # noise-norm weight inside the generator GAN loss
    lambda1: float = 0.0  # bottleneck contrastive
    lambda2: float = 0.0  # correspondence contrastive


@dataclass
class LossBreakdown:
    """Per-step scalars; total must satisfy the weighted-sum identity."""

    tv: float = 0.0
    gan_d: float = 0.0
    gan_g: float = 0.0
    rmse_noisy: float = 0.0
    rmse_clean: float = 0.0
    b_contrastive: float = 0.0
    p_contrastive: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


CSV_FIELDS = ["step", "epoch", "tv", "gan_d", "gan_g", "rmse_noisy",
              "rmse_clean", "b_contrastive", "p_contrastive", "total"]


def tv_loss(noise: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of the raw noise field (batch mean for batched input).

    The name follows the augmentation literature; the formula is the plain
    L2 norm of the field, not a spatial-difference total variation. A true
    spatial TV is available as `spatial_tv_loss`.
    """
    if noise.dim() <= 3:
        return torch.linalg.vector_norm(noise)
    return torch.linalg.vector_norm(noise.flatten(1), dim=1).mean()


def spatial_tv_loss(noise: torch.Tensor) -> torch.Tensor:
    """Anisotropic spatial total variation, batch mean for batched input (opt-in)."""
    if noise.dim() <= 3:
        return sum(torch.diff(noise, dim=ax).abs().sum() for ax in range(noise.dim()))
    per_sample = noise.new_zeros(noise.shape[0])
    for ax in range(1, noise.dim()):
        per_sample = per_sample + torch.diff(noise, dim=ax).abs().flatten(1).sum(dim=1)
    return per_sample.mean()


def _clamped_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, min=LOG_EPS))


def gan_losses(disc, real_batch: torch.Tensor, fake_batch: torch.Tensor,
               beta: float, l_tv: torch.Tensor | float
               ) -> tuple[torch.Tensor, torch.Tensor]:
    """Minimax GAN pair given a discriminator module or callable.

    L_D = -mean log D(real) - mean log(1 - D(fake))     (D minimizes)
    L_G =  mean log(1 - D(fake)) + beta * l_tv          (G minimizes)
    """
    if real_batch.shape[0] == 0 or fake_batch.shape[0] == 0:
        raise ValueError("gan_losses requires non-empty batches")
    d_real = disc(real_batch)
    d_fake = disc(fake_batch)
    l_d = -_clamped_log(d_real).mean() - _clamped_log(1.0 - d_fake).mean()
    l_g = _clamped_log(1.0 - d_fake).mean() + beta * l_tv
    return l_d, l_g


def nonsaturating_g_loss(disc, fake_batch: torch.Tensor, beta: float,
                         l_tv: torch.Tensor | float) -> torch.Tensor:
    """Alternative generator loss -mean log D(fake) (opt-in, off by default)."""
    return -_clamped_log(disc(fake_batch)).mean() + beta * l_tv


def rmse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Root of the mean squared error over all coordinate entries.

    Accepts (M, 3) or batched (B, M, 3); batched input averages the
    per-sample RMSE values.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if pred.dim() == 2:
        return torch.sqrt(sq.mean())
    return torch.sqrt(sq.flatten(1).mean(dim=1)).mean()


def contrastive_loss(emb_clean: torch.Tensor, emb_noisy: torch.Tensor) -> torch.Tensor:
    """In-batch contrastive loss with cosine similarity, temperature 1.

    Row i of each batch is the (clean, noisy) embedding pair of sample i; the
    denominator runs over the noisy embeddings of the whole batch.
    """
    if emb_clean.shape != emb_noisy.shape:
        raise ValueError("clean/noisy embedding batches must have equal shapes")
    n = emb_clean.shape[0]
    if n < 2:
        raise ValueError("contrastive_loss requires batch size >= 2")
    norms_c = torch.linalg.vector_norm(emb_clean, dim=1)
    norms_n = torch.linalg.vector_norm(emb_noisy, dim=1)
    if (norms_c == 0).any() or (norms_n == 0).any():
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    sim = (emb_clean / norms_c[:, None]) @ (emb_noisy / norms_n[:, None]).T
    return (torch.logsumexp(sim, dim=1) - sim.diagonal()).mean()


def total_loss(breakdown: LossBreakdown, weights: LossWeights) -> float:
    """alpha * L_GAN(generator side) + RMSE terms + lambda-weighted contrastive."""
    return (weights.alpha * breakdown.gan_g
            + breakdown.rmse_noisy + breakdown.rmse_clean
            + weights.lambda1 * breakdown.b_contrastive
            + weights.lambda2 * breakdown.p_contrastive)


def validate_breakdown(breakdown: LossBreakdown, weights: LossWeights,
                       tol: float = 1e-6) -> None:
    for name, v in breakdown.as_dict().items():
        if not torch.isfinite(torch.tensor(v)):
            raise FloatingPointError(f"non-finite loss component {name} = {v}")
    expected = total_loss(breakdown, weights)
    if abs(expected - breakdown.total) > tol * max(1.0, abs(expected)):
        raise AssertionError(
            f"loss breakdown inconsistent: total {breakdown.total} vs "
            f"weighted sum {expected}"
        )
