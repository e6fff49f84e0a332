"""Linear PCA shape space, KDE sampling over its scores, and TPS image warping.

Together these implement the offline augmentation baseline: sample new shape
scores from a kernel density estimate fitted in the PCA subspace, reconstruct
correspondences, and warp a nearby training volume to match.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .cohort import Volume, GroundTruthSample


class TPSSingularError(ValueError):
    """The thin-plate-spline system is singular (coincident control points)."""


@dataclass
class PCAModel:
    mean: np.ndarray  # (3M,)
    components: np.ndarray  # (K, 3M), row-orthonormal
    eigenvalues: np.ndarray  # (K,), descending

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _flatten(corr_sets) -> np.ndarray:
    X = np.asarray([np.asarray(c, dtype=float).reshape(-1) for c in corr_sets])
    if X.ndim != 2:
        raise ValueError("correspondence sets must share the same point count")
    return X


def fit_pca(corr_sets, variance_threshold: float = 0.95) -> PCAModel:
    """PCA over flattened correspondences, keeping enough modes to reach the
    explained-variance threshold (threshold 1.0 keeps the full rank)."""
    X = _flatten(corr_sets)
    n = X.shape[0]
    if n < 2:
        raise ValueError("fit_pca requires at least 2 correspondence sets")
    mean = X.mean(axis=0)
    Xc = X - mean
    # SVD of the centered data: at most n-1 non-trivial modes.
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    k_max = min(n - 1, X.shape[1])
    s = s[:k_max]
    vt = vt[:k_max]
    eig = s**2 / (n - 1)
    total = eig.sum()
    if variance_threshold >= 1.0 or total == 0.0:
        k = k_max
    else:
        ratio = np.cumsum(eig) / total
        k = int(np.searchsorted(ratio, variance_threshold) + 1)
    return PCAModel(mean=mean, components=vt[:k].copy(), eigenvalues=eig[:k].copy())


def project(model: PCAModel, points: np.ndarray) -> np.ndarray:
    """Scores of one correspondence set (M,3) or a flat (3M,) vector."""
    x = np.asarray(points, dtype=float).reshape(-1)
    return model.components @ (x - model.mean)


def reconstruct_correspondences(model: PCAModel, scores: np.ndarray) -> np.ndarray:
    """mean + components^T scores, reshaped to (M, 3)."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (model.n_components,):
        raise ValueError(
            f"scores must have length {model.n_components}, got {scores.shape}"
        )
    flat = model.mean + model.components.T @ scores
    return flat.reshape(-1, 3)


def explained_variance_ratio(model: PCAModel) -> np.ndarray:
    total = model.eigenvalues.sum()
    return model.eigenvalues / total if total > 0 else np.zeros_like(model.eigenvalues)


def save_pca(model: PCAModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "mean": model.mean.tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
        "n_components": int(model.n_components),
        "dim": int(model.mean.shape[0]),
    }
    (out / "pca.json").write_text(json.dumps(meta), encoding="utf-8")
    (out / "components.f32").write_bytes(
        np.ascontiguousarray(model.components, dtype="<f4").tobytes()
    )


def load_pca(in_dir: str | Path) -> PCAModel:
    root = Path(in_dir)
    meta = json.loads((root / "pca.json").read_text(encoding="utf-8"))
    comps = np.frombuffer((root / "components.f32").read_bytes(), dtype="<f4")
    comps = comps.reshape(meta["n_components"], meta["dim"]).astype(float)
    return PCAModel(
        mean=np.array(meta["mean"]),
        components=comps,
        eigenvalues=np.array(meta["eigenvalues"]),
    )


@dataclass
class KDEModel:
    training_scores: np.ndarray  # (n, K)
    bandwidth: float


def fit_kde(scores: np.ndarray) -> KDEModel:
    """Gaussian KDE with bandwidth = mean nearest-neighbor distance."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    if n < 2:
        raise ValueError("fit_kde requires at least 2 score vectors")
    d = np.linalg.norm(scores[:, None, :] - scores[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    bandwidth = float(np.mean(d.min(axis=1)))
    return KDEModel(training_scores=scores.copy(), bandwidth=bandwidth)


def sample_kde(model: KDEModel, n: int, seed: int) -> np.ndarray:
    """Draw n score vectors: uniformly chosen training score + N(0, bandwidth^2 I)."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, model.training_scores.shape[0], size=n)
    eps = rng.standard_normal((n, model.training_scores.shape[1]))
    return model.training_scores[idx] + model.bandwidth * eps


# ---------------------------------------------------------------------------
# Thin-plate-spline warping (3D polyharmonic kernel U(r) = r)
# ---------------------------------------------------------------------------

@dataclass
class TPSSpline:
    control: np.ndarray  # (M, 3)
    weights: np.ndarray  # (M, C)
    affine: np.ndarray  # (4, C): constant + linear terms


def fit_tps(control: np.ndarray, values: np.ndarray) -> TPSSpline:
    control = np.asarray(control, dtype=float)
    values = np.asarray(values, dtype=float)
    m = control.shape[0]
    k = np.linalg.norm(control[:, None, :] - control[None, :, :], axis=-1)
    p = np.concatenate([np.ones((m, 1)), control], axis=1)
    lhs = np.zeros((m + 4, m + 4))
    lhs[:m, :m] = k
    lhs[:m, m:] = p
    lhs[m:, :m] = p.T
    rhs = np.zeros((m + 4, values.shape[1]))
    rhs[:m] = values
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as e:
        raise TPSSingularError(f"TPS system singular: {e}") from e
    if not np.all(np.isfinite(sol)):
        raise TPSSingularError("TPS system singular: non-finite solution")
    return TPSSpline(control=control, weights=sol[:m], affine=sol[m:])


def tps_evaluate(spline: TPSSpline, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    d = np.linalg.norm(points[:, None, :] - spline.control[None, :, :], axis=-1)
    return d @ spline.weights + spline.affine[0] + points @ spline.affine[1:]


def tps_warp(vol: Volume, src: np.ndarray, dst: np.ndarray,
             max_disp_fraction: float = 0.5) -> Volume:
    """Warp a volume so that content at the src correspondences moves to dst.

    A TPS fitted at the dst points interpolates the dense inverse map
    (output voxel -> input location); trilinear resampling with border clamp.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have identical shapes")
    extent = min(vol.dims)
    max_disp = float(np.max(np.linalg.norm(dst - src, axis=1)))
    if max_disp > max_disp_fraction * extent:
        raise ValueError(
            f"max correspondence displacement {max_disp:.2f} exceeds "
            f"{max_disp_fraction:.2f} of grid extent {extent}"
        )
    spline = fit_tps(dst, src - dst)
    ax = [np.arange(n, dtype=float) for n in vol.dims]
    xx, yy, zz = np.meshgrid(*ax, indexing="ij")
    grid = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    lookup = grid + tps_evaluate(spline, grid)
    coords = lookup.T.reshape(3, *vol.dims)
    warped = map_coordinates(vol.grid.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(warped.astype(np.float32), spacing=vol.spacing)


# ---------------------------------------------------------------------------
# Offline augmentation: sampled score -> (reconstructed shape, warped volume)
# ---------------------------------------------------------------------------

def make_augmented_samples(train_samples: list[GroundTruthSample], pca: PCAModel,
                           kde: KDEModel, n_aug: int, seed: int
                           ) -> list[GroundTruthSample]:
    """Generate paired (volume, correspondences) samples from KDE draws.

    Each augmented pair comes from one sampled score vector: the shape is its
    PCA reconstruction, the image the TPS-warped volume of the score-nearest
    training sample.
    """
    train_scores = np.asarray([project(pca, s.points) for s in train_samples])
    sampled = sample_kde(kde, n_aug, seed)
    out = []
    for j, scores in enumerate(sampled):
        new_pts = reconstruct_correspondences(pca, scores)
        nearest = int(np.argmin(np.linalg.norm(train_scores - scores, axis=1)))
        source = train_samples[nearest]
        vol = tps_warp(source.volume, source.points, new_pts)
        out.append(GroundTruthSample(
            sample_id=f"aug{j:04d}",
            volume=vol,
            points=new_pts,
            params=None,
            group=source.group,
            split="train",
            augmented=True,
        ))
    return out
