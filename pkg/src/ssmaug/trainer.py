"""Training orchestration: batch partitioning, alternating adversary/model
updates, baseline augmentation modes, validation-based selection, logging.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import adversary, losses, shape_space, ssm_net
from .cohort import Cohort, GroundTruthSample, load_cohort, save_cohort
from .evaluation import rmse_eq8
from .losses import LossBreakdown, LossWeights

log = logging.getLogger(__name__)

MODES = ("noaug", "gaussian", "kde_offline", "adassm", "adassm_bc",
         "adassm_pc", "adassm_bc_pc")
ADVERSARIAL_MODES = ("adassm", "adassm_bc", "adassm_pc", "adassm_bc_pc")

SEED_ENV_VAR = "ADASSM_SEED"


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; the message references the last good checkpoint."""


@dataclass
class TrainConfig:
    mode: str = "noaug"
    epochs: int = 100
    batch_size: int = 4
    lr_model: float = 5e-4
    lr_gen: float = 2e-4
    lr_disc: float = 2e-4
    noise_scale: float = 0.3  # perturbation range R for the generated noise
    alpha: float = 1.0
    beta: float = 0.1
    lambda1: float = 0.0  # bottleneck contrastive, used by BC modes
    lambda2: float = 0.0  # correspondence contrastive, used by PC modes
    lambda_rev: float = 1.0
    gaussian_sigma: float = 1.0
    n_aug_factor: int = 3  # offline KDE: augmented samples per training sample
    z_dim: int = 16
    seed: int = 0
    variance_threshold: float = 0.95
    deterministic: bool = True
    bottleneck: int = 32
    model_channels: tuple[int, ...] = (8, 16, 32, 64)
    gen_channels: tuple[int, int, int] = (8, 16, 32)
    disc_channels: tuple[int, int, int] = (8, 16, 32)
    fc_hidden: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        for name in ("lr_model", "lr_gen", "lr_disc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        self.model_channels = tuple(self.model_channels)
        self.gen_channels = tuple(self.gen_channels)
        self.disc_channels = tuple(self.disc_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("model_channels", "gen_channels", "disc_channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("model_channels", "gen_channels", "disc_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def paper_preset(dataset: str, mode: str) -> TrainConfig:
    """Named training recipes from the published femur-CT and left-atrium
    experiments (learning rates, batch sizes, epochs, noise range, weights).

    These correspond to clinical-scale runs; desk-scale runs use the
    TrainConfig defaults instead.
    """
    contrastive = mode in ("adassm_bc", "adassm_pc", "adassm_bc_pc")
    if dataset == "femur":
        cfg = TrainConfig(
            mode=mode,
            epochs=1500,
            batch_size=4,
            lr_model=5e-5 if contrastive else 1e-5,
            lr_gen=1e-3 if mode == "adassm_bc_pc" else 5e-3,
            lr_disc=1e-3 if mode == "adassm_bc_pc" else 5e-3,
            noise_scale=500.0,
            alpha=1.0,
            beta=0.1,
            lambda1=0.5,
            lambda2=0.5 if mode == "adassm_bc_pc" else 0.1,
        )
    elif dataset == "left_atrium":
        cfg = TrainConfig(
            mode=mode,
            epochs=1000,
            batch_size=6,
            lr_model=1e-4 if contrastive else 5e-3,
            lr_gen=5e-3,
            lr_disc=5e-3,
            noise_scale=100.0,
            alpha=1.0,
            beta=0.1,
            lambda1=0.05 if mode == "adassm_bc_pc" else 0.001,
            lambda2=0.05,
        )
    else:
        raise ValueError(f"unknown preset dataset {dataset!r}")
    return cfg


def resolve_seed(cfg: TrainConfig) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return cfg.seed


def effective_weights(cfg: TrainConfig) -> LossWeights:
    """Loss weights actually used by the mode; warns about ignored ones."""
    adversarial = cfg.mode in ADVERSARIAL_MODES
    l1 = cfg.lambda1 if cfg.mode in ("adassm_bc", "adassm_bc_pc") else 0.0
    l2 = cfg.lambda2 if cfg.mode in ("adassm_pc", "adassm_bc_pc") else 0.0
    if cfg.lambda1 != 0.0 and l1 == 0.0:
        log.warning("lambda1=%s ignored in mode %s", cfg.lambda1, cfg.mode)
    if cfg.lambda2 != 0.0 and l2 == 0.0:
        log.warning("lambda2=%s ignored in mode %s", cfg.lambda2, cfg.mode)
    if cfg.mode in ("adassm_bc", "adassm_bc_pc") and l1 == 0.0:
        log.warning("mode %s with lambda1=0 behaves like plain adassm", cfg.mode)
    if cfg.mode in ("adassm_pc", "adassm_bc_pc") and l2 == 0.0:
        log.warning("mode %s with lambda2=0 behaves like plain adassm", cfg.mode)
    return LossWeights(
        alpha=cfg.alpha if adversarial else 0.0,
        beta=cfg.beta,
        lambda1=l1,
        lambda2=l2,
    )


def partition_batch(batch, rng) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint halves of a batch; the first gets ceil(B/2) elements."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    batch = np.asarray(batch)
    b = len(batch)
    if b < 2:
        raise ValueError("cannot partition a batch of fewer than 2 samples")
    perm = rng.permutation(b)
    n1 = (b + 1) // 2
    return batch[perm[:n1]], batch[perm[n1:]]


@dataclass
class RunLog:
    steps: list = field(default_factory=list)  # (step, epoch, LossBreakdown)
    epochs: list = field(default_factory=list)  # {"epoch","train_total","val_rmse"}
    timings: dict = field(default_factory=lambda: {
        "augmentation_s": 0.0, "training_s": 0.0, "total_s": 0.0})

    def append_step(self, step: int, epoch: int, breakdown: LossBreakdown):
        self.steps.append((step, epoch, breakdown))

    def write_runlog_csv(self, path: Path) -> None:
        lines = [",".join(losses.CSV_FIELDS)]
        for step, epoch, b in self.steps:
            vals = b.as_dict()
            row = [str(step), str(epoch)] + [
                f"{vals[k]:.10g}" for k in losses.CSV_FIELDS[2:]
            ]
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_epochs_csv(self, path: Path) -> None:
        lines = ["epoch,train_total,val_rmse"]
        for row in self.epochs:
            lines.append(f"{row['epoch']},{row['train_total']:.10g},{row['val_rmse']:.10g}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class TrainResult:
    out_dir: Path
    best_epoch: int
    best_val_rmse: float
    runlog: RunLog
    summary: dict


@dataclass
class _Data:
    ids: list[str]
    volumes: torch.Tensor  # (N, 1, Dx, Dy, Dz) z-scored
    targets: torch.Tensor  # (N, M, 3)


def _tensors(samples: list[GroundTruthSample]) -> _Data:
    vols = np.stack([ssm_net.normalize_volume(s.volume.grid) for s in samples])
    tgts = np.stack([np.asarray(s.points, dtype=np.float32) for s in samples])
    return _Data(
        ids=[s.sample_id for s in samples],
        volumes=torch.from_numpy(vols)[:, None],
        targets=torch.from_numpy(tgts),
    )


def _min_batch(cfg: TrainConfig, weights: LossWeights) -> int:
    if cfg.mode == "noaug" or cfg.mode == "kde_offline":
        return 1
    if weights.lambda1 > 0 or weights.lambda2 > 0:
        return 3  # partition must leave >= 2 samples for the contrastive batch
    return 2


def train_step_noaug(model, opt_model, x, y, weights) -> LossBreakdown:
    opt_model.zero_grad()
    _, pred = model(x)
    l = losses.rmse_loss(pred, y)
    l.backward()
    opt_model.step()
    b = LossBreakdown(rmse_clean=float(l))
    b.total = losses.total_loss(b, weights)
    return b


def train_step_gaussian(model, opt_model, x, y, sigma, weights, rng) -> LossBreakdown:
    i1, _ = partition_batch(np.arange(x.shape[0]), rng)
    x1, y1 = x[i1], y[i1]
    eps = torch.from_numpy(
        rng.standard_normal(tuple(x1.shape)).astype(np.float32)) * sigma
    x_hat = adversary.apply_noise(x1, eps, 1.0)
    opt_model.zero_grad()
    _, pred_noisy = model(x_hat)
    _, pred_clean = model(x)
    l_noisy = losses.rmse_loss(pred_noisy, y1)
    l_clean = losses.rmse_loss(pred_clean, y)
    (l_noisy + l_clean).backward()
    opt_model.step()
    b = LossBreakdown(rmse_noisy=float(l_noisy), rmse_clean=float(l_clean))
    b.total = losses.total_loss(b, weights)
    return b


def train_step_adassm(model, gen, disc, opt_model, opt_gen, opt_disc,
                      x, y, cfg: TrainConfig, weights: LossWeights,
                      rng: np.random.Generator) -> LossBreakdown:
    """One adversarial step: split the batch, perturb one half with generated
    noise, update the discriminator on the other half, then take a joint
    generator+model step with the reversal layer between the noisy volume and
    the shape network.
    """
    i1, i2 = partition_batch(np.arange(x.shape[0]), rng)
    x1, y1 = x[i1], y[i1]
    x2 = x[i2]

    z = torch.from_numpy(
        rng.standard_normal((len(i1), cfg.z_dim)).astype(np.float32))
    noise = gen(x1, z)
    x_hat = adversary.apply_noise(x1, noise, cfg.noise_scale)
    l_tv = losses.tv_loss(noise)

    # discriminator step on the detached fake batch
    opt_disc.zero_grad()
    l_d, _ = losses.gan_losses(disc, x2, x_hat.detach(), cfg.beta, l_tv.detach())
    l_d.backward()
    opt_disc.step()

    # joint generator + model step; reversal flips gradients reaching G
    opt_gen.zero_grad()
    opt_model.zero_grad()
    _, l_g = losses.gan_losses(disc, x2, x_hat, cfg.beta, l_tv)
    x_rev = adversary.grad_reverse(x_hat, cfg.lambda_rev)
    b_noisy, pred_noisy = model(x_rev)
    b_clean, pred_clean = model(x)
    l_noisy = losses.rmse_loss(pred_noisy, y1)
    l_clean = losses.rmse_loss(pred_clean, y)
    l_b = torch.zeros(())
    l_p = torch.zeros(())
    if weights.lambda1 > 0:
        l_b = losses.contrastive_loss(b_clean[i1], b_noisy)
    if weights.lambda2 > 0:
        l_p = losses.contrastive_loss(pred_clean[i1].flatten(1),
                                      pred_noisy.flatten(1))
    total = (weights.alpha * l_g + l_noisy + l_clean
             + weights.lambda1 * l_b + weights.lambda2 * l_p)
    total.backward()
    opt_gen.step()
    opt_model.step()

    b = LossBreakdown(
        tv=float(l_tv), gan_d=float(l_d), gan_g=float(l_g),
        rmse_noisy=float(l_noisy), rmse_clean=float(l_clean),
        b_contrastive=float(l_b), p_contrastive=float(l_p),
    )
    b.total = losses.total_loss(b, weights)
    return b


def _param_state(*nets) -> list[torch.Tensor]:
    return [p.detach().clone() for net in nets for p in net.parameters()]


def _validation_rmse(model, data: _Data) -> float:
    if len(data.ids) == 0:
        return math.nan
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(0, data.volumes.shape[0], 8):
            _, pred = model(data.volumes[i:i + 8])
            for p, t in zip(pred, data.targets[i:i + 8]):
                vals.append(rmse_eq8(p.numpy().astype(float),
                                     t.numpy().astype(float)))
    model.train()
    return float(np.mean(vals))


class Trainer:
    """Holds networks, optimizers, and data for one training run."""

    def __init__(self, cfg: TrainConfig, cohort: Cohort):
        self.cfg = cfg
        self.seed = resolve_seed(cfg)
        self.weights = effective_weights(cfg)
        if cfg.deterministic:
            torch.set_num_threads(1)
        if cfg.batch_size < _min_batch(cfg, self.weights):
            raise ValueError(
                f"batch_size {cfg.batch_size} too small for mode {cfg.mode}")

        train_samples = cohort.split("train")
        if not train_samples:
            raise ValueError("cohort has an empty training split")
        self.train_data = _tensors(train_samples)
        self.val_data = _tensors(cohort.split("val"))
        self.dims = cohort.dims
        self.n_points = cohort.n_points

        torch.manual_seed(self.seed)
        self.rng = np.random.default_rng(self.seed)
        net_cfg = ssm_net.NetConfig(
            dims=self.dims, n_points=self.n_points, bottleneck=cfg.bottleneck,
            channels=cfg.model_channels, fc_hidden=cfg.fc_hidden)
        self.model = ssm_net.ImageToSSMNet(net_cfg)
        self.gen = adversary.NoiseGenerator(adversary.GenConfig(
            dims=self.dims, z_dim=cfg.z_dim, channels=cfg.gen_channels))
        self.disc = adversary.Discriminator(adversary.DiscConfig(
            dims=self.dims, channels=cfg.disc_channels))

        pca = shape_space.fit_pca(
            [s.points for s in train_samples], cfg.variance_threshold)
        if pca.n_components > cfg.bottleneck:
            pca = shape_space.PCAModel(
                mean=pca.mean,
                components=pca.components[:cfg.bottleneck],
                eigenvalues=pca.eigenvalues[:cfg.bottleneck])
        ssm_net.init_decoder_from_pca(self.model, pca)

        self.opt_model = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_model)
        self.opt_gen = torch.optim.Adam(self.gen.parameters(), lr=cfg.lr_gen)
        self.opt_disc = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_disc)

    def _batches(self) -> list[np.ndarray]:
        n = self.train_data.volumes.shape[0]
        perm = self.rng.permutation(n)
        bs = self.cfg.batch_size
        minimum = _min_batch(self.cfg, self.weights)
        out = []
        for i in range(0, n, bs):
            chunk = perm[i:i + bs]
            if len(chunk) >= minimum:
                out.append(chunk)
        return out

    def step(self, idx: np.ndarray) -> LossBreakdown:
        x = self.train_data.volumes[idx]
        y = self.train_data.targets[idx]
        if self.cfg.mode in ADVERSARIAL_MODES:
            return train_step_adassm(
                self.model, self.gen, self.disc, self.opt_model, self.opt_gen,
                self.opt_disc, x, y, self.cfg, self.weights, self.rng)
        if self.cfg.mode == "gaussian":
            return train_step_gaussian(
                self.model, self.opt_model, x, y, self.cfg.gaussian_sigma,
                self.weights, self.rng)
        return train_step_noaug(self.model, self.opt_model, x, y, self.weights)

    def run(self, out_dir: Path, aug_seconds: float = 0.0,
            mode_label: str | None = None) -> TrainResult:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        runlog = RunLog()
        best = {"epoch": -1, "val_rmse": math.inf, "state": None}
        step_count = 0
        t_start = time.perf_counter()
        for epoch in range(self.cfg.epochs):
            totals = []
            for idx in self._batches():
                try:
                    breakdown = self.step(idx)
                    losses.validate_breakdown(breakdown, self.weights)
                except FloatingPointError as e:
                    ref = self._save_best(best, out_dir, "checkpoint_abort")
                    raise TrainingDivergedError(
                        f"{e}; last good checkpoint: {ref}") from e
                step_count += 1
                runlog.append_step(step_count, epoch, breakdown)
                totals.append(breakdown.total)
            val_rmse = _validation_rmse(self.model, self.val_data)
            runlog.epochs.append({
                "epoch": epoch,
                "train_total": float(np.mean(totals)) if totals else math.nan,
                "val_rmse": val_rmse,
            })
            select_metric = val_rmse if not math.isnan(val_rmse) else float(np.mean(totals))
            if select_metric < best["val_rmse"]:
                best.update(epoch=epoch, val_rmse=select_metric,
                            state=self._snapshot())
        train_seconds = time.perf_counter() - t_start

        ckpt = self._save_best(best, out_dir, "checkpoint_best")
        runlog.timings = {
            "augmentation_s": aug_seconds,
            "training_s": train_seconds,
            "total_s": aug_seconds + train_seconds,
        }
        runlog.write_runlog_csv(out_dir / "runlog.csv")
        runlog.write_epochs_csv(out_dir / "epochs.csv")
        summary = {
            "mode": mode_label or self.cfg.mode,
            "seed": self.seed,
            "epochs": self.cfg.epochs,
            "best_epoch": best["epoch"],
            "best_val_rmse": best["val_rmse"],
            "n_train": len(self.train_data.ids),
            "checkpoint": str(ckpt),
            "wall_clock": runlog.timings,
            "config": self.cfg.to_dict(),
        }
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=1), encoding="utf-8")
        return TrainResult(out_dir=out_dir, best_epoch=best["epoch"],
                           best_val_rmse=best["val_rmse"], runlog=runlog,
                           summary=summary)

    def _snapshot(self) -> dict:
        return {
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "gen": {k: v.detach().clone() for k, v in self.gen.state_dict().items()},
            "disc": {k: v.detach().clone() for k, v in self.disc.state_dict().items()},
        }

    def _save_best(self, best: dict, out_dir: Path, name: str) -> Path:
        if best["state"] is not None:
            self.model.load_state_dict(best["state"]["model"])
            self.gen.load_state_dict(best["state"]["gen"])
            self.disc.load_state_dict(best["state"]["disc"])
        ckpt = ssm_net.save_checkpoint(self.model, Path(out_dir) / name)
        if self.cfg.mode in ADVERSARIAL_MODES:
            adversary.save_generator(self.gen, Path(out_dir) / f"generator_{name.split('_')[-1]}")
            adversary.save_discriminator(self.disc, Path(out_dir) / f"discriminator_{name.split('_')[-1]}")
        return ckpt


def build_augmented_cohort(cfg: TrainConfig, cohort: Cohort,
                           out_dir: str | Path | None = None) -> tuple[Cohort, float]:
    """Offline KDE augmentation: returns (merged cohort, wall-clock seconds).

    PCA and KDE are fitted on the training split only; the merged cohort adds
    n_aug_factor * n_train augmented pairs flagged `augmented: true`.
    """
    seed = resolve_seed(cfg)
    t0 = time.perf_counter()
    train_samples = cohort.split("train")
    if len(train_samples) < 2:
        raise ValueError("offline augmentation needs at least 2 training samples")
    pca = shape_space.fit_pca([s.points for s in train_samples],
                              cfg.variance_threshold)
    scores = np.asarray([shape_space.project(pca, s.points) for s in train_samples])
    kde = shape_space.fit_kde(scores)
    n_aug = cfg.n_aug_factor * len(train_samples)
    augmented = shape_space.make_augmented_samples(
        train_samples, pca, kde, n_aug, seed)
    merged = Cohort(
        spec=cohort.spec, dims=cohort.dims, spacing=cohort.spacing,
        n_points=cohort.n_points, samples=list(cohort.samples) + augmented)
    if out_dir is not None:
        save_cohort(merged, out_dir)
    return merged, time.perf_counter() - t0


def run_kde_offline(cfg: TrainConfig, cohort: Cohort, out_dir: str | Path) -> TrainResult:
    """Offline-KDE baseline: generate + persist the augmented cohort, then
    train in plain supervised mode on the enlarged training split."""
    out_dir = Path(out_dir)
    merged, aug_seconds = build_augmented_cohort(
        cfg, cohort, out_dir / "augmented_cohort")
    inner = TrainConfig.from_dict(
        {**cfg.to_dict(), "mode": "noaug", "lambda1": 0.0, "lambda2": 0.0})
    trainer = Trainer(inner, merged)
    return trainer.run(out_dir, aug_seconds=aug_seconds, mode_label="kde_offline")


def train(cfg: TrainConfig, cohort: Cohort | str | Path,
          out_dir: str | Path) -> TrainResult:
    """Train one run per the config mode; returns the result with the best
    checkpoint path in `summary["checkpoint"]`."""
    if not isinstance(cohort, Cohort):
        cohort = load_cohort(cohort)
    if cfg.mode == "kde_offline":
        return run_kde_offline(cfg, cohort, out_dir)
    trainer = Trainer(cfg, cohort)
    return trainer.run(Path(out_dir))
