"""Conditional noise generator, discriminator, and the gradient-reversal
coupling used to train the augmentation as an adversary of the shape network.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cohort import Volume
from . import ssm_net


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; backward multiplies gradients by -scale."""
    return _ReverseGrad.apply(x, scale)


def apply_noise(x, noise, scale: float):
    """Voxelwise x + scale * noise; works on tensors, arrays, and Volumes.

    The augmented sample keeps the ground-truth correspondences of x: the
    perturbation touches intensities only, never geometry.
    """
    if isinstance(x, Volume):
        return Volume(np.asarray(x.grid) + scale * np.asarray(noise), spacing=x.spacing)
    return x + scale * noise


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, c), c)


@dataclass
class GenConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    z_dim: int = 16
    channels: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        for d in self.dims:
            if d % 8 != 0:
                raise ValueError(f"dims {self.dims} must be divisible by 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.f = nn.Sequential(
            nn.Conv3d(cin, cout, 3, stride, 1), _gn(cout), nn.ReLU()
        )

    def forward(self, x):
        return self.f(x)


class NoiseGenerator(nn.Module):
    """Conditional generator G(z, x): latent vector broadcast as constant input
    channels, three-level strided encoder-decoder with skip connections, tanh
    output bounding every voxel of the noise field to [-1, 1].
    """

    def __init__(self, config: GenConfig):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.channels
        self.enc0 = _Block(1 + config.z_dim, c0, stride=2)
        self.enc1 = _Block(c0, c1, stride=2)
        self.enc2 = _Block(c1, c2, stride=2)
        self.up2 = nn.ConvTranspose3d(c2, c1, 2, 2)
        self.dec2 = _Block(2 * c1, c1)
        self.up1 = nn.ConvTranspose3d(c1, c0, 2, 2)
        self.dec1 = _Block(2 * c0, c0)
        self.up0 = nn.ConvTranspose3d(c0, c0, 2, 2)
        self.out = nn.Conv3d(c0, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.config.dims:
            raise ValueError(f"input dims {tuple(x.shape[-3:])} != {self.config.dims}")
        if z.shape != (x.shape[0], self.config.z_dim):
            raise ValueError(f"z must have shape ({x.shape[0]}, {self.config.z_dim})")
        zc = z.view(*z.shape, 1, 1, 1).expand(*z.shape, *x.shape[-3:])
        e0 = self.enc0(torch.cat([x, zc], dim=1))
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d2 = self.dec2(torch.cat([self.up2(e2), e1], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e0], dim=1))
        return torch.tanh(self.out(self.up0(d1)))


def generate_noise(gen: NoiseGenerator, z: np.ndarray, vol: Volume) -> np.ndarray:
    """Noise field for one volume, same dims, values in [-1, 1]."""
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(vol.grid, dtype=np.float32))[None, None]
        zt = torch.from_numpy(np.asarray(z, dtype=np.float32))[None]
        n = gen(x, zt)
    if was_training:
        gen.train()
    return n[0, 0].numpy()


PROB_EPS = 1e-7


@dataclass
class DiscConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    channels: tuple[int, int, int] = (8, 16, 32)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        for d in self.dims:
            if d % 8 != 0:
                raise ValueError(f"dims {self.dims} must be divisible by 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class Discriminator(nn.Module):
    """3D conv classifier mapping a volume to a probability strictly in (0, 1)."""

    def __init__(self, config: DiscConfig):
        super().__init__()
        self.config = config
        c0, c1, c2 = config.channels
        self.features = nn.Sequential(
            nn.Conv3d(1, c0, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv3d(c0, c1, 3, 2, 1), _gn(c1), nn.LeakyReLU(0.2),
            nn.Conv3d(c1, c2, 3, 2, 1), _gn(c2), nn.LeakyReLU(0.2),
        )
        flat = c2 * int(np.prod([d // 8 for d in config.dims]))
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(flat, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.config.dims:
            raise ValueError(f"input dims {tuple(x.shape[-3:])} != {self.config.dims}")
        p = torch.sigmoid(self.head(self.features(x))).squeeze(-1)
        return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def discriminate(disc: Discriminator, vol: Volume) -> float:
    was_training = disc.training
    disc.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(vol.grid, dtype=np.float32))[None, None]
        p = disc(x)
    if was_training:
        disc.train()
    return float(p[0])


def save_generator(gen: NoiseGenerator, out_dir: str | Path) -> Path:
    return ssm_net.save_state(gen, "noise_generator", gen.config.to_dict(), out_dir)


def load_generator(in_dir: str | Path) -> NoiseGenerator:
    kind, cfg = ssm_net.read_checkpoint_kind(in_dir)
    if kind != "noise_generator":
        raise ValueError(f"checkpoint kind {kind!r} is not a noise_generator")
    gen = NoiseGenerator(GenConfig.from_dict(cfg))
    ssm_net.load_state_into(gen, in_dir)
    return gen


def save_discriminator(disc: Discriminator, out_dir: str | Path) -> Path:
    return ssm_net.save_state(disc, "discriminator", disc.config.to_dict(), out_dir)


def load_discriminator(in_dir: str | Path) -> Discriminator:
    kind, cfg = ssm_net.read_checkpoint_kind(in_dir)
    if kind != "discriminator":
        raise ValueError(f"checkpoint kind {kind!r} is not a discriminator")
    disc = Discriminator(DiscConfig.from_dict(cfg))
    ssm_net.load_state_into(disc, in_dir)
    return disc
