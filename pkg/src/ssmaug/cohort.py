"""Synthetic volumetric shape cohorts with analytically known correspondences.

Shapes are star-shaped surfaces: an ellipsoid radius function modulated by a
fixed low-order real spherical-harmonic basis. Because the radius function is
closed-form, correspondence points (a fixed set of anchor directions) and the
voxel occupancy are both exact, so every downstream quantity has an analytic
oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y


class InvalidShapeParamsError(ValueError):
    """Shape parameters produce a non-positive radius somewhere."""


class GridFitError(ValueError):
    """Shape does not fit inside the voxel grid with the required margin."""


# Fixed deformation basis: real spherical harmonics for l = 1..3, m = -l..l.
SH_DEGREES: list[tuple[int, int]] = [
    (l, m) for l in range(1, 4) for m in range(-l, l + 1)
]
N_BUMP_COEFFS = len(SH_DEGREES)  # 15

# Coefficient acting as the pathology factor (l=2, m=0: polar bump).
PATHOLOGY_COEFF_INDEX = SH_DEGREES.index((2, 0))


def real_sph_harm(l: int, m: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Orthonormal real spherical harmonic at polar angle theta, azimuth phi."""
    if m == 0:
        return np.real(sph_harm_y(l, 0, theta, phi))
    y = sph_harm_y(l, abs(m), theta, phi)
    if m > 0:
        return np.sqrt(2.0) * (-1.0) ** m * np.real(y)
    return np.sqrt(2.0) * (-1.0) ** m * np.imag(y)


def anchor_angles(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed quasi-uniform set of n (theta, phi) pairs (Fibonacci lattice).

    Pure function of n; this ordering defines the correspondence semantics
    for every cohort member.
    """
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    phi = np.mod(2.0 * np.pi * i / golden, 2.0 * np.pi)
    return theta, phi


def unit_directions(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


@dataclass
class ShapeParams:
    """Generating parameters of one cohort member."""

    radii: np.ndarray  # (3,) base ellipsoid semi-axes, voxel units
    bump_coeffs: np.ndarray  # (15,) amplitudes over SH_DEGREES
    group_label: str = "control"  # "control" | "pathology"
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # Euler xyz, rad
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # voxels

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=float)
        self.bump_coeffs = np.asarray(self.bump_coeffs, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.radii.shape != (3,):
            raise ValueError("radii must have shape (3,)")
        if self.bump_coeffs.shape != (N_BUMP_COEFFS,):
            raise ValueError(f"bump_coeffs must have shape ({N_BUMP_COEFFS},)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeParams":
        return cls(
            radii=np.array(d["radii"]),
            bump_coeffs=np.array(d["bump_coeffs"]),
            group_label=d.get("group_label", "control"),
            rotation=np.array(d.get("rotation", [0.0, 0.0, 0.0])),
            translation=np.array(d.get("translation", [0.0, 0.0, 0.0])),
        )


@dataclass
class Volume:
    """Scalar 3D image, indexed grid[x, y, z], isotropic spacing."""

    grid: np.ndarray
    spacing: float = 1.0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.shape


def bump_factor(params: ShapeParams, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Radial modulation 1 + sum_lm c_lm Y_lm(theta, phi)."""
    f = np.ones_like(theta, dtype=float)
    for c, (l, m) in zip(params.bump_coeffs, SH_DEGREES):
        if c != 0.0:
            f = f + c * real_sph_harm(l, m, theta, phi)
    return f


def ellipsoid_radius(radii: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    u = unit_directions(theta, phi)
    inv = np.sqrt(np.sum((u / radii) ** 2, axis=-1))
    return 1.0 / inv


def radius_function(params: ShapeParams, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Analytic surface radius along (theta, phi) in the shape's own frame."""
    return ellipsoid_radius(params.radii, theta, phi) * bump_factor(params, theta, phi)


def validate_params(params: ShapeParams, n_check: int = 4096) -> None:
    """Reject parameter sets whose radius function is not strictly positive.

    The check evaluates the modulation on a dense angular lattice; the error
    names the dominant (largest magnitude) bump coefficient.
    """
    if np.any(params.radii <= 0.0):
        raise InvalidShapeParamsError(f"non-positive base radius: {params.radii}")
    theta, phi = anchor_angles(n_check)
    f = bump_factor(params, theta, phi)
    if np.min(f) <= 0.0:
        worst = int(np.argmax(np.abs(params.bump_coeffs)))
        l, m = SH_DEGREES[worst]
        raise InvalidShapeParamsError(
            f"radius function non-positive (min modulation {np.min(f):.4f}); "
            f"dominant coefficient c[{worst}] = {params.bump_coeffs[worst]:.4f} "
            f"on harmonic (l={l}, m={m})"
        )


def pose_matrix(params: ShapeParams) -> np.ndarray:
    return Rotation.from_euler("xyz", params.rotation).as_matrix()


def generate_shape(params: ShapeParams, n_points: int) -> np.ndarray:
    """Surface correspondence points at the fixed anchor directions.

    Returns an (n_points, 3) array in the shape frame: origin-centered
    surface, rotated by the pose and shifted by the pose translation.
    Identical params give identical output.
    """
    validate_params(params)
    theta, phi = anchor_angles(n_points)
    r = radius_function(params, theta, phi)
    pts = r[:, None] * unit_directions(theta, phi)
    return pts @ pose_matrix(params).T + params.translation


def shape_inside(params: ShapeParams, points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Analytic occupancy test for points given the shape placed at center."""
    rot = pose_matrix(params)
    q = (np.asarray(points, dtype=float) - center - params.translation) @ rot
    rho = np.linalg.norm(q, axis=-1)
    with np.errstate(invalid="ignore"):
        theta = np.arccos(np.clip(np.divide(q[..., 2], rho, where=rho > 0), -1.0, 1.0))
    phi = np.arctan2(q[..., 1], q[..., 0])
    r_surf = radius_function(params, theta, phi)
    inside = rho <= r_surf
    inside[rho == 0.0] = True
    return inside


def grid_center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=float) - 1.0) / 2.0


def max_radius(params: ShapeParams, n_check: int = 4096) -> float:
    theta, phi = anchor_angles(n_check)
    return float(np.max(radius_function(params, theta, phi)))


def voxelize(params: ShapeParams, dims, spacing: float = 1.0, margin: float = 2.0) -> Volume:
    """Binary occupancy volume of the shape centered in the grid.

    The surface radius is in voxel units; a bounding-sphere check enforces the
    fit margin before rasterizing.
    """
    validate_params(params)
    dims = tuple(int(d) for d in dims)
    center = grid_center(dims)
    r_max = max_radius(params)
    lo = center + params.translation - r_max
    hi = center + params.translation + r_max
    if np.any(lo < margin) or np.any(hi > np.asarray(dims) - 1.0 - margin):
        raise GridFitError(
            f"shape bounding box [{lo.round(2)}, {hi.round(2)}] exceeds grid "
            f"{dims} with margin {margin} voxels"
        )
    ax = [np.arange(d, dtype=float) for d in dims]
    xx, yy, zz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    occ = shape_inside(params, pts, center).reshape(dims)
    return Volume(occ.astype(np.float32), spacing=float(spacing))


@dataclass
class TextureConfig:
    fg_mean: float = 1.0
    bg_mean: float = 0.0
    gradient_amplitude: float = 0.3
    n_blobs: int = 6
    blob_intensity: float = 0.8
    blob_sigma: float = 2.5  # voxels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TextureConfig":
        return cls(**d)


def apply_texture(vol: Volume, cfg: TextureConfig, seed: int) -> Volume:
    """Texture a binary occupancy volume; the occupancy mask itself is untouched.

    Foreground/background means, a smooth linear intensity ramp in a seeded
    random direction, and seeded distractor blobs confined to the background.
    """
    occ = np.asarray(vol.grid, dtype=np.float64)
    uniq = np.unique(occ)
    if not np.all(np.isin(uniq, [0.0, 1.0])):
        raise ValueError("apply_texture expects a binary occupancy volume")
    if cfg.n_blobs < 0:
        raise ValueError("n_blobs must be >= 0")
    rng = np.random.default_rng(seed)
    dims = vol.dims
    out = cfg.bg_mean + (cfg.fg_mean - cfg.bg_mean) * occ

    if cfg.gradient_amplitude != 0.0:
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        ax = [np.arange(n, dtype=float) for n in dims]
        xx, yy, zz = np.meshgrid(*ax, indexing="ij")
        proj = xx * d[0] + yy * d[1] + zz * d[2]
        ramp = (proj - proj.mean()) / max(proj.max() - proj.min(), 1e-12)
        out = out + cfg.gradient_amplitude * ramp

    if cfg.n_blobs > 0:
        bg_idx = np.argwhere(occ == 0.0)
        chosen = bg_idx[rng.choice(len(bg_idx), size=cfg.n_blobs, replace=False)]
        ax = [np.arange(n, dtype=float) for n in dims]
        xx, yy, zz = np.meshgrid(*ax, indexing="ij")
        blob_field = np.zeros(dims)
        for c in chosen:
            d2 = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2
            blob_field += np.exp(-d2 / (2.0 * cfg.blob_sigma**2))
        out = out + cfg.blob_intensity * blob_field * (1.0 - occ)

    return Volume(out.astype(np.float32), spacing=vol.spacing)


@dataclass
class CohortSpec:
    """Full recipe for a reproducible cohort; the cohort is a pure function of it."""

    n_samples: int = 60
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: float = 1.0
    n_points: int = 128  # correspondences per sample
    texture: TextureConfig = field(default_factory=TextureConfig)
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)  # train/val/test
    seed: int = 0
    # shape sampling ranges
    radii_range: tuple[float, float] = (9.0, 13.0)
    bump_amplitude: float = 0.04
    control_range: tuple[float, float] = (0.0, 0.05)
    pathology_range: tuple[float, float] = (0.16, 0.26)
    pathology_threshold: float = 0.10
    pathology_fraction: float = 0.5
    rotation_amplitude: float = 0.2  # rad
    translation_amplitude: float = 1.0  # voxels

    def __post_init__(self):
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.n_samples < 8:
            raise ValueError("n_samples must be >= 8")
        if self.n_points < 16:
            raise ValueError("n_points must be >= 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["texture"] = self.texture.to_dict()
        d["dims"] = list(self.dims)
        d["splits"] = list(self.splits)
        d["radii_range"] = list(self.radii_range)
        d["control_range"] = list(self.control_range)
        d["pathology_range"] = list(self.pathology_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        if "texture" in d:
            d["texture"] = TextureConfig.from_dict(d["texture"])
        for key in ("dims", "splits", "radii_range", "control_range", "pathology_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class GroundTruthSample:
    """One cohort member: textured volume, correspondences, generating params."""

    sample_id: str
    volume: Volume
    points: np.ndarray  # (M, 3) voxel coordinates
    params: ShapeParams | None
    group: str
    split: str
    augmented: bool = False


@dataclass
class Cohort:
    spec: CohortSpec | None
    dims: tuple[int, int, int]
    spacing: float
    n_points: int
    samples: list[GroundTruthSample]

    def split(self, name: str) -> list[GroundTruthSample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self, sample_id: str) -> GroundTruthSample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)


def sample_params(spec: CohortSpec, rng: np.random.Generator, pathology: bool) -> ShapeParams:
    """Draw one valid parameter set; resamples on the rare rejection."""
    for _ in range(100):
        radii = rng.uniform(*spec.radii_range, size=3)
        coeffs = rng.uniform(-spec.bump_amplitude, spec.bump_amplitude, size=N_BUMP_COEFFS)
        lo, hi = spec.pathology_range if pathology else spec.control_range
        coeffs[PATHOLOGY_COEFF_INDEX] = rng.uniform(lo, hi)
        group = "pathology" if coeffs[PATHOLOGY_COEFF_INDEX] > spec.pathology_threshold else "control"
        params = ShapeParams(
            radii=radii,
            bump_coeffs=coeffs,
            group_label=group,
            rotation=rng.uniform(-spec.rotation_amplitude, spec.rotation_amplitude, size=3),
            translation=rng.uniform(-spec.translation_amplitude, spec.translation_amplitude, size=3),
        )
        try:
            validate_params(params)
            return params
        except InvalidShapeParamsError:
            continue
    raise InvalidShapeParamsError("could not draw valid shape parameters in 100 tries")


def _split_counts(n: int, fractions) -> list[int]:
    counts = [int(round(n * f)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def assign_splits(n: int, fractions, rng: np.random.Generator) -> list[str]:
    counts = _split_counts(n, fractions)
    labels = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    perm = rng.permutation(n)
    out = [""] * n
    for lab, i in zip(labels, perm):
        out[i] = lab
    return out


def build_sample(spec: CohortSpec, params: ShapeParams, sample_id: str, split: str,
                 texture_seed: int) -> GroundTruthSample:
    occ = voxelize(params, spec.dims, spec.spacing)
    vol = apply_texture(occ, spec.texture, seed=texture_seed)
    pts = generate_shape(params, spec.n_points) + grid_center(spec.dims)
    return GroundTruthSample(
        sample_id=sample_id,
        volume=vol,
        points=pts,
        params=params,
        group=params.group_label,
        split=split,
    )


def generate_cohort(spec: CohortSpec, out_dir: str | Path | None = None) -> Cohort:
    """Generate the full cohort; optionally persist it in the cohort directory format."""
    root = np.random.SeedSequence(spec.seed)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    splits = assign_splits(spec.n_samples, spec.splits, split_rng)
    child_seeds = root.spawn(spec.n_samples + 1)[1:]

    samples = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng(child_seeds[i])
        pathology = i < int(round(spec.pathology_fraction * spec.n_samples))
        params = sample_params(spec, rng, pathology)
        texture_seed = int(rng.integers(0, 2**63 - 1))
        samples.append(build_sample(spec, params, f"s{i:04d}", splits[i], texture_seed))

    cohort = Cohort(spec=spec, dims=spec.dims, spacing=spec.spacing,
                    n_points=spec.n_points, samples=samples)
    if out_dir is not None:
        save_cohort(cohort, out_dir)
    return cohort


# ---------------------------------------------------------------------------
# Cohort directory format:
#   manifest.json            spec, dims, spacing, M, per-sample records
#   vol_<id>.f32             raw little-endian float32, x-fastest ordering
#   corr_<id>.particles      one "x y z" line per point, %.17g
# ---------------------------------------------------------------------------

def write_volume_f32(path: Path, vol: Volume) -> None:
    data = np.ascontiguousarray(vol.grid.astype("<f4").ravel(order="F"))
    path.write_bytes(data.tobytes())


def read_volume_f32(path: Path, dims, spacing: float) -> Volume:
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(dims))
    if raw.size != expected:
        raise IOError(f"{path}: expected {expected} voxels, found {raw.size}")
    return Volume(raw.reshape(tuple(dims), order="F").copy(), spacing=spacing)


def write_particles(path: Path, points: np.ndarray) -> None:
    lines = [" ".join(f"{v:.17g}" for v in row) for row in np.asarray(points, dtype=float)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_particles(path: Path) -> np.ndarray:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in line.split()])
    return np.asarray(rows, dtype=float)


def save_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in cohort.samples:
        try:
            write_volume_f32(out / f"vol_{s.sample_id}.f32", s.volume)
            write_particles(out / f"corr_{s.sample_id}.particles", s.points)
        except OSError as e:
            raise IOError(f"failed writing sample {s.sample_id} under {out}: {e}") from e
        rec = {
            "id": s.sample_id,
            "group": s.group,
            "split": s.split,
            "params": s.params.to_dict() if s.params is not None else None,
        }
        if s.augmented:
            rec["augmented"] = True
        records.append(rec)
    manifest = {
        "spec": cohort.spec.to_dict() if cohort.spec is not None else None,
        "dims": list(cohort.dims),
        "spacing": cohort.spacing,
        "n_points": cohort.n_points,
        "samples": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return out


def load_cohort(in_dir: str | Path) -> Cohort:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise IOError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    dims = tuple(manifest["dims"])
    spacing = float(manifest["spacing"])
    spec = CohortSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    samples = []
    for rec in manifest["samples"]:
        sid = rec["id"]
        vol = read_volume_f32(root / f"vol_{sid}.f32", dims, spacing)
        pts = read_particles(root / f"corr_{sid}.particles")
        params = ShapeParams.from_dict(rec["params"]) if rec.get("params") else None
        samples.append(GroundTruthSample(
            sample_id=sid, volume=vol, points=pts, params=params,
            group=rec["group"], split=rec["split"],
            augmented=bool(rec.get("augmented", False)),
        ))
    return Cohort(spec=spec, dims=dims, spacing=spacing,
                  n_points=int(manifest["n_points"]), samples=samples)
