"""Image-to-shape regression network: strided 3D conv encoder to a low
dimensional bottleneck, single affine decoder to correspondence coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .cohort import Volume
from .shape_space import PCAModel


@dataclass
class NetConfig:
    dims: tuple[int, int, int] = (48, 48, 48)
    n_points: int = 128
    bottleneck: int = 32
    channels: tuple[int, ...] = (8, 16, 32, 64)
    fc_hidden: int = 128

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        if self.bottleneck > 3 * self.n_points:
            raise ValueError("bottleneck must not exceed 3 * n_points")
        for d in self.dims:
            if d % (2 ** len(self.channels)) != 0:
                raise ValueError(
                    f"dims {self.dims} not divisible by 2^{len(self.channels)}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, stride=2, padding=1),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(),
    )


class ImageToSSMNet(nn.Module):
    """Deterministic encoder + deterministic affine decoder.

    forward takes a (B, 1, Dx, Dy, Dz) tensor and returns the bottleneck
    (B, L) and predicted correspondences (B, M, 3).
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        blocks = []
        cin = 1
        for c in config.channels:
            blocks.append(_conv_block(cin, c))
            cin = c
        self.encoder = nn.Sequential(*blocks)
        red = 2 ** len(config.channels)
        flat = config.channels[-1] * int(np.prod([d // red for d in config.dims]))
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, config.fc_hidden),
            nn.ReLU(),
            nn.Linear(config.fc_hidden, config.bottleneck),
        )
        self.decoder = nn.Linear(config.bottleneck, 3 * config.n_points)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(x.shape[-3:]) != self.config.dims:
            raise ValueError(f"input dims {tuple(x.shape[-3:])} != {self.config.dims}")
        b = self.head(self.encoder(x))
        corr = self.decoder(b).view(-1, self.config.n_points, 3)
        return b, corr


def normalize_volume(grid: np.ndarray) -> np.ndarray:
    """Per-volume z-score; constant volumes map to zeros."""
    g = np.asarray(grid, dtype=np.float32)
    std = float(g.std())
    return (g - g.mean()) / max(std, 1e-6)


def predict(net: ImageToSSMNet, vol: Volume) -> tuple[np.ndarray, np.ndarray]:
    """Bottleneck vector and (M, 3) correspondences for one volume."""
    was_training = net.training
    net.eval()
    with torch.no_grad():
        x = torch.from_numpy(normalize_volume(vol.grid))[None, None]
        b, corr = net(x)
    if was_training:
        net.train()
    return b[0].numpy(), corr[0].numpy().astype(float)


def init_decoder_from_pca(net: ImageToSSMNet, pca: PCAModel) -> None:
    """Set the first K decoder columns to sqrt(eigenvalue)-scaled components
    and the bias to the mean shape; remaining columns are zeroed."""
    k = pca.n_components
    l = net.config.bottleneck
    if l < k:
        raise ValueError(f"bottleneck {l} < PCA components {k}")
    w = np.zeros((3 * net.config.n_points, l), dtype=np.float32)
    scale = np.sqrt(np.maximum(pca.eigenvalues, 0.0))
    w[:, :k] = (pca.components * scale[:, None]).T
    with torch.no_grad():
        net.decoder.weight.copy_(torch.from_numpy(w))
        net.decoder.bias.copy_(torch.from_numpy(pca.mean.astype(np.float32)))


def parameters(net: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Trainable arrays in a stable (registration) order."""
    return [(name, p) for name, p in net.named_parameters()]


# ---------------------------------------------------------------------------
# Checkpoint format (shared by all networks in this package):
#   net_config.json      {"kind": ..., "config": {...}}
#   params.bin           concatenated raw little-endian float32 blobs
#   params_index.json    [{"name", "shape", "offset"}] offsets in floats
# ---------------------------------------------------------------------------

def save_state(net: nn.Module, kind: str, config_dict: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "net_config.json").write_text(
        json.dumps({"kind": kind, "config": config_dict}), encoding="utf-8"
    )
    index = []
    blobs = []
    offset = 0
    for name, p in parameters(net):
        arr = p.detach().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    (out / "params.bin").write_bytes(b"".join(blobs))
    (out / "params_index.json").write_text(json.dumps(index), encoding="utf-8")
    return out


def load_state_into(net: nn.Module, in_dir: str | Path) -> None:
    root = Path(in_dir)
    index = json.loads((root / "params_index.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((root / "params.bin").read_bytes(), dtype="<f4")
    by_name = dict(parameters(net))
    with torch.no_grad():
        for entry in index:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            arr = raw[entry["offset"]:entry["offset"] + n].reshape(shape)
            by_name[entry["name"]].copy_(torch.from_numpy(arr.copy()))


def read_checkpoint_kind(in_dir: str | Path) -> tuple[str, dict]:
    meta = json.loads((Path(in_dir) / "net_config.json").read_text(encoding="utf-8"))
    return meta["kind"], meta["config"]


def save_checkpoint(net: ImageToSSMNet, out_dir: str | Path) -> Path:
    return save_state(net, "image_to_ssm", net.config.to_dict(), out_dir)


def load_checkpoint(in_dir: str | Path) -> ImageToSSMNet:
    kind, cfg = read_checkpoint_kind(in_dir)
    if kind != "image_to_ssm":
        raise ValueError(f"checkpoint kind {kind!r} is not an image_to_ssm net")
    net = ImageToSSMNet(NetConfig.from_dict(cfg))
    load_state_into(net, in_dir)
    return net
