"""Static report emission: comparison CSV, SVG bar charts, heatmap bundles,
and the offline-vs-on-the-fly timing table; plus the experiment matrix runner.

SVG output is plain text with no timestamps, so re-emitting a report from the
same run directories yields identical bytes.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

from . import evaluation, ssm_net, trainer
from .cohort import Cohort, load_cohort

log = logging.getLogger(__name__)

STANDARD_RUNS: list[tuple[str, dict]] = [
    ("NoAug", {"mode": "noaug"}),
    ("Gaussian_sigma1", {"mode": "gaussian", "gaussian_sigma": 1.0}),
    ("Gaussian_sigma10", {"mode": "gaussian", "gaussian_sigma": 10.0}),
    ("KDE", {"mode": "kde_offline"}),
    ("ADASSM", {"mode": "adassm"}),
    ("ADASSM_BC", {"mode": "adassm_bc", "lambda1": 0.1}),
    ("ADASSM_PC", {"mode": "adassm_pc", "lambda2": 0.05}),
    ("ADASSM_BC_PC", {"mode": "adassm_bc_pc", "lambda1": 0.1, "lambda2": 0.05}),
]


@dataclass
class ExperimentMatrix:
    cohort_dir: str
    out_dir: str
    runs: list[tuple[str, trainer.TrainConfig]]
    n_surface_pts: int = 512

    def __post_init__(self):
        names = [n for n, _ in self.runs]
        if len(set(names)) != len(names):
            raise ValueError(f"run names must be unique, got {names}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentMatrix":
        base = d.get("base", {})
        run_specs = d.get("runs")
        if run_specs is None:
            run_specs = [{"name": n, "overrides": o} for n, o in STANDARD_RUNS]
        runs = []
        for spec in run_specs:
            cfg = trainer.TrainConfig.from_dict({**base, **spec.get("overrides", {})})
            runs.append((spec["name"], cfg))
        return cls(
            cohort_dir=d["cohort"],
            out_dir=d["out"],
            runs=runs,
            n_surface_pts=int(d.get("n_surface_pts", 512)),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentMatrix":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_run(run_dir: str | Path, cohort: Cohort, split: str = "test",
                 n_surface_pts: int = 512) -> Path:
    """Evaluate a finished run's best checkpoint on a cohort split; writes the
    eval report into <run_dir>/eval."""
    run_dir = Path(run_dir)
    net = ssm_net.load_checkpoint(run_dir / "checkpoint_best")
    samples = cohort.split(split)
    report = evaluation.evaluate_model(net, samples, n_surface_pts)
    return evaluation.save_eval_report(report, run_dir / "eval")


def run_matrix(matrix: ExperimentMatrix) -> Path:
    """Execute every configured run on the shared cohort, evaluate each, and
    emit the comparison report bundle."""
    cohort = load_cohort(matrix.cohort_dir)
    out_root = Path(matrix.out_dir)
    run_dirs = []
    for name, cfg in matrix.runs:
        run_dir = out_root / name
        log.info("matrix run %s (mode=%s)", name, cfg.mode)
        trainer.train(cfg, cohort, run_dir)
        evaluate_run(run_dir, cohort, "test", matrix.n_surface_pts)
        run_dirs.append(run_dir)
    return emit_report(run_dirs, out_root / "report")


# ---------------------------------------------------------------------------
# SVG bar chart (single series, deterministic output)
# ---------------------------------------------------------------------------

_BAR_W = 56
_GAP = 24
_PLOT_H = 240.0
_MARGIN_L = 60
_MARGIN_TOP = 40
_MARGIN_BOT = 70


def bar_chart_svg(title: str, names: list[str], values: list[float]) -> str:
    axis_max = max(max(values), 1e-12) * 1.05
    width = _MARGIN_L + len(names) * (_BAR_W + _GAP) + _GAP
    height = _MARGIN_TOP + _PLOT_H + _MARGIN_BOT
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<g data-axis-max="{axis_max:.8g}">',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_TOP}" x2="{_MARGIN_L}" '
        f'y2="{_MARGIN_TOP + _PLOT_H:.1f}" stroke="black"/>',
        f'<line x1="{_MARGIN_L}" y1="{_MARGIN_TOP + _PLOT_H:.1f}" '
        f'x2="{width - _GAP:.0f}" y2="{_MARGIN_TOP + _PLOT_H:.1f}" stroke="black"/>',
        f'<text x="{_MARGIN_L - 6}" y="{_MARGIN_TOP + 4}" text-anchor="end">'
        f'{axis_max:.3g}</text>',
        f'<text x="{_MARGIN_L - 6}" y="{_MARGIN_TOP + _PLOT_H + 4:.1f}" '
        f'text-anchor="end">0</text>',
    ]
    for i, (name, v) in enumerate(zip(names, values)):
        h = _PLOT_H * v / axis_max
        x = _MARGIN_L + _GAP + i * (_BAR_W + _GAP)
        y = _MARGIN_TOP + _PLOT_H - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.4f}" width="{_BAR_W}" height="{h:.4f}" '
            f'fill="#4878a8" data-name="{name}" data-value="{v:.8g}"/>'
        )
        parts.append(
            f'<text x="{x + _BAR_W / 2:.1f}" y="{_MARGIN_TOP + _PLOT_H + 14:.1f}" '
            f'text-anchor="middle" transform="rotate(30 {x + _BAR_W / 2:.1f} '
            f'{_MARGIN_TOP + _PLOT_H + 14:.1f})">{name}</text>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _read_json(path: Path) -> dict | None:
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def emit_report(run_dirs, out_dir: str | Path) -> Path:
    """Bundle per-run evaluation results into comparison/timing tables, bar
    charts, and best/median/worst heatmap CSVs. Missing inputs are reported as
    warnings and the rest of the bundle is still produced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    warnings = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        name = run_dir.name
        eval_report = _read_json(run_dir / "eval" / "eval_report.json")
        summary = _read_json(run_dir / "summary.json")
        if eval_report is None:
            warnings.append(f"missing eval_report.json in {run_dir}")
            continue
        if summary is None:
            warnings.append(f"missing summary.json in {run_dir}")
            continue
        rows.append({
            "run": name,
            "rmse": eval_report["summary"]["rmse_mean"],
            "surface_distance": eval_report["summary"]["surface_mean"],
            "wall_clock": summary["wall_clock"],
            "run_dir": run_dir,
            "eval": eval_report,
        })
    for w in warnings:
        log.warning("%s", w)
    rows.sort(key=lambda r: r["run"])

    lines = ["run,rmse_eq8,surface_distance"]
    for r in rows:
        lines.append(f"{r['run']},{r['rmse']:.9g},{r['surface_distance']:.9g}")
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["run,augmentation_s,training_s,total_s"]
    for r in rows:
        wc = r["wall_clock"]
        lines.append(f"{r['run']},{wc['augmentation_s']:.6g},"
                     f"{wc['training_s']:.6g},{wc['total_s']:.6g}")
    (out / "timing.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if rows:
        names = [r["run"] for r in rows]
        (out / "rmse_comparison.svg").write_text(
            bar_chart_svg("Test RMSE (coordinate average)", names,
                          [r["rmse"] for r in rows]), encoding="utf-8")
        (out / "surface_comparison.svg").write_text(
            bar_chart_svg("Surface-to-surface distance", names,
                          [r["surface_distance"] for r in rows]), encoding="utf-8")

    for r in rows:
        for rank in ("best", "median", "worst"):
            sid = r["eval"][rank]
            src = r["run_dir"] / "eval" / f"heatmap_{sid}.csv"
            if src.exists():
                shutil.copyfile(src, out / f"heatmap_{r['run']}_{rank}.csv")
            else:
                warnings.append(f"missing heatmap for {r['run']} {rank}")

    (out / "report.json").write_text(
        json.dumps({"runs": [r["run"] for r in rows], "warnings": warnings},
                   indent=1), encoding="utf-8")
    return out
