"""Quantitative evaluation: coordinate-averaged RMSE, per-point RMSE,
surface-to-surface distance, group differences, and the PCA-score
classification downstream task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from . import ssm_net
from .cohort import (GroundTruthSample, anchor_angles, grid_center,
                     pose_matrix, radius_function, unit_directions)
from .shape_space import fit_pca, fit_tps, project, tps_evaluate


def rmse_eq8(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of the per-axis RMSE values: (RMSE_x + RMSE_y + RMSE_z) / 3."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    per_axis = np.sqrt(np.mean((pred - gt) ** 2, axis=0))
    return float(per_axis.mean())


def per_point_rmse(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RMSE_i = sqrt((dx_i^2 + dy_i^2 + dz_i^2) / 3) for each point."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return np.sqrt(np.mean((pred - gt) ** 2, axis=1))


def sample_surface(sample: GroundTruthSample, n: int) -> np.ndarray:
    """Dense points on the analytic ground-truth surface, in voxel coordinates."""
    if sample.params is None:
        raise ValueError(f"sample {sample.sample_id} has no generating parameters")
    params = sample.params
    theta, phi = anchor_angles(n)
    r = radius_function(params, theta, phi)
    pts = r[:, None] * unit_directions(theta, phi)
    rot = pose_matrix(params)
    return pts @ rot.T + params.translation + grid_center(sample.volume.dims)


def surface_distance(pred: np.ndarray, gt_sample: GroundTruthSample,
                     n_surface_pts: int = 2048) -> tuple[float, np.ndarray]:
    """Symmetric mean nearest-point distance between the analytic ground-truth
    surface and the predicted surface.

    The predicted surface is the dense ground-truth surface carried through a
    TPS warp driven by the ground-truth -> predicted correspondence
    displacements. Returns (mean distance, ground-truth-side distances).
    """
    gt_surface = sample_surface(gt_sample, n_surface_pts)
    gt_corr = np.asarray(gt_sample.points, dtype=float)
    pred = np.asarray(pred, dtype=float)
    spline = fit_tps(gt_corr, pred - gt_corr)
    pred_surface = gt_surface + tps_evaluate(spline, gt_surface)
    d_gt, _ = cKDTree(pred_surface).query(gt_surface)
    d_pred, _ = cKDTree(gt_surface).query(pred_surface)
    mean = 0.5 * (float(d_gt.mean()) + float(d_pred.mean()))
    return mean, d_gt


@dataclass
class GroupDifference:
    vectors: np.ndarray  # (M, 3) mean(group1) - mean(group2)
    magnitudes: np.ndarray  # (M,) normalized to [0, 1]
    reference_mean: np.ndarray  # (M, 3) mean shape of group 1 for overlay


def group_difference(corr_sets_g1, corr_sets_g2) -> GroupDifference:
    g1 = np.asarray([np.asarray(c, dtype=float) for c in corr_sets_g1])
    g2 = np.asarray([np.asarray(c, dtype=float) for c in corr_sets_g2])
    if g1.shape[0] == 0 or g2.shape[0] == 0:
        raise ValueError("group_difference requires at least 1 sample per group")
    mu1 = g1.mean(axis=0)
    mu2 = g2.mean(axis=0)
    vectors = mu1 - mu2
    mags = np.linalg.norm(vectors, axis=1)
    peak = mags.max()
    return GroupDifference(
        vectors=vectors,
        magnitudes=mags / peak if peak > 0 else mags,
        reference_mean=mu1,
    )


def save_group_difference(diff: GroupDifference, path: str | Path) -> None:
    lines = ["point,dx,dy,dz,normalized_magnitude"]
    for i, (v, m) in enumerate(zip(diff.vectors, diff.magnitudes)):
        lines.append(f"{i},{v[0]:.9g},{v[1]:.9g},{v[2]:.9g},{m:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class ClassificationResult:
    accuracy_mean: float
    accuracy_std: float
    fold_accuracies: list[float]


def classify_downstream(features, labels, folds: int = 5, seed: int = 0,
                        variance_threshold: float = 0.95) -> ClassificationResult:
    """Stratified k-fold classification from shape features.

    (N, M, 3) correspondence input is reduced to PCA scores with the PCA
    fitted on each training fold only; (N, D) input is used directly.
    A one-hidden-layer MLP (16 units) is trained per fold.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("classification requires at least 2 classes")
    if counts.min() < 4:
        raise ValueError("each class needs at least 4 samples")
    feats = np.asarray(features, dtype=float)
    corr_input = feats.ndim == 3

    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs = []
    for fold, (tr, te) in enumerate(skf.split(np.zeros(len(labels)), labels)):
        tr_labels = labels[tr]
        if min(np.bincount(np.searchsorted(classes, tr_labels))) < 2:
            raise ValueError(f"fold {fold}: a class has fewer than 2 training samples")
        if corr_input:
            pca = fit_pca(feats[tr], variance_threshold)
            x_tr = np.asarray([project(pca, f) for f in feats[tr]])
            x_te = np.asarray([project(pca, f) for f in feats[te]])
        else:
            x_tr, x_te = feats[tr], feats[te]
        clf = make_pipeline(
            StandardScaler(),
            MLPClassifier(hidden_layer_sizes=(16,), max_iter=3000,
                          random_state=seed + fold),
        )
        clf.fit(x_tr, tr_labels)
        accs.append(float(clf.score(x_te, labels[te])))
    return ClassificationResult(
        accuracy_mean=float(np.mean(accs)),
        accuracy_std=float(np.std(accs)),
        fold_accuracies=accs,
    )


@dataclass
class EvalReport:
    sample_ids: list[str]
    rmse: list[float]
    surface: list[float]
    per_point_rmse_pooled: np.ndarray  # (M,) RMSE per correspondence, pooled
    best_id: str
    median_id: str
    worst_id: str
    heatmaps: dict  # id -> per-surface-point distances for best/median/worst
    downstream: ClassificationResult | None = None

    def summary(self) -> dict:
        return {
            "rmse_mean": float(np.mean(self.rmse)),
            "rmse_std": float(np.std(self.rmse)),
            "surface_mean": float(np.mean(self.surface)),
            "surface_std": float(np.std(self.surface)),
        }


def evaluate_model(net, samples: list[GroundTruthSample],
                   n_surface_pts: int = 2048) -> EvalReport:
    """Predict correspondences for each sample and compute all metrics;
    best/median/worst are selected by mean surface distance."""
    if not samples:
        raise ValueError("no samples to evaluate")
    ids, rmses, surfs, heat = [], [], [], {}
    sq_sums = np.zeros(len(samples[0].points))
    preds = {}
    for s in samples:
        _, pred = ssm_net.predict(net, s.volume)
        preds[s.sample_id] = pred
        ids.append(s.sample_id)
        rmses.append(rmse_eq8(pred, s.points))
        d, _ = surface_distance(pred, s, n_surface_pts)
        surfs.append(d)
        sq_sums += np.sum((pred - s.points) ** 2, axis=1)
    pooled = np.sqrt(sq_sums / (3 * len(samples)))

    order = np.argsort(surfs)
    best_id = ids[order[0]]
    median_id = ids[order[len(order) // 2]]
    worst_id = ids[order[-1]]
    for sid in {best_id, median_id, worst_id}:
        sample = next(s for s in samples if s.sample_id == sid)
        _, d_gt = surface_distance(preds[sid], sample, n_surface_pts)
        heat[sid] = d_gt
    return EvalReport(
        sample_ids=ids, rmse=rmses, surface=surfs,
        per_point_rmse_pooled=pooled,
        best_id=best_id, median_id=median_id, worst_id=worst_id,
        heatmaps=heat,
    )


def save_eval_report(report: EvalReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "samples": [
            {"id": i, "rmse_eq8": r, "surface_distance": s}
            for i, r, s in zip(report.sample_ids, report.rmse, report.surface)
        ],
        "summary": report.summary(),
        "per_point_rmse": report.per_point_rmse_pooled.tolist(),
        "best": report.best_id,
        "median": report.median_id,
        "worst": report.worst_id,
        "downstream": (
            {
                "accuracy_mean": report.downstream.accuracy_mean,
                "accuracy_std": report.downstream.accuracy_std,
                "folds": report.downstream.fold_accuracies,
            }
            if report.downstream is not None else None
        ),
    }
    (out / "eval_report.json").write_text(json.dumps(payload, indent=1),
                                          encoding="utf-8")
    for sid, dists in report.heatmaps.items():
        lines = ["surface_point,distance"]
        lines += [f"{i},{d:.9g}" for i, d in enumerate(dists)]
        (out / f"heatmap_{sid}.csv").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")
    return out
