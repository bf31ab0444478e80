"""RMSE scoring, five-trial aggregation, and report emission.

Total RMSE pools every (node, year) residual of the whole test split into
one root-mean-square; it is not a mean of per-year RMSEs, and the two
differ whenever yearly errors differ. Aggregation over the five trials uses the
sample (n-1) standard deviation. Pixel metrics convert to centimeters at
exactly 4 cm per pixel, reported alongside pixels, never instead of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

CM_PER_PIXEL = 4.0
TARGET_YEARS = tuple(range(2003, 2013))
N_TRIALS = 5


@dataclass(frozen=True)
class TrialReport:
    model_kind: str
    trial: int
    per_year_px: tuple[float, ...]  # RMSE per target year, pixels
    total_px: float  # pooled over all (node, year) residuals

    @property
    def per_year_cm(self):
        return tuple(v * CM_PER_PIXEL for v in self.per_year_px)

    @property
    def total_cm(self):
        return self.total_px * CM_PER_PIXEL


@dataclass(frozen=True)
class AggregateReport:
    model_kind: str
    total_mean_px: float
    total_std_px: float
    per_year_mean_px: tuple[float, ...]
    per_year_std_px: tuple[float, ...]

    def formatted_total(self):
        return format_mean_std(self.total_mean_px, self.total_std_px)


def format_mean_std(mean, std):
    return f"{mean:.3f} ± {std:.3f}"


def rmse(pred: np.ndarray, target: np.ndarray):
    """Per-year and pooled-total RMSE over stacked test rows.

    `pred` and `target` stack every test record's (nodes, 10) matrix along
    axis 0. Returns (per_year (10,), total scalar).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"rmse: shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ConfigError("rmse: empty prediction stack")
    sq = (pred - target) ** 2
    per_year = np.sqrt(sq.mean(axis=0))
    total = float(np.sqrt(sq.mean()))
    return per_year, total


def mean_predictor_rmse(train_targets: np.ndarray, test_targets: np.ndarray) -> float:
    """Total RMSE of the constant predictor that outputs the per-year train mean."""
    prediction = np.broadcast_to(
        train_targets.mean(axis=0), test_targets.shape
    )
    return rmse(prediction, test_targets)[1]


def make_trial_report(model_kind, trial, pred, target) -> TrialReport:
    per_year, total = rmse(pred, target)
    return TrialReport(
        model_kind=model_kind,
        trial=trial,
        per_year_px=tuple(float(v) for v in per_year),
        total_px=total,
    )


def aggregate(reports) -> AggregateReport:
    """Mean and sample (n-1) std of totals and per-year values over 5 trials."""
    reports = sorted(reports, key=lambda r: r.trial)
    kinds = {r.model_kind for r in reports}
    if len(kinds) != 1:
        raise ConfigError(f"aggregate needs one model kind, got {sorted(kinds)}")
    if len(reports) != N_TRIALS or [r.trial for r in reports] != list(range(N_TRIALS)):
        raise ConfigError(
            f"aggregate needs trials 0..{N_TRIALS - 1}, got {[r.trial for r in reports]}"
        )
    totals = np.array([r.total_px for r in reports])
    years = np.array([r.per_year_px for r in reports])
    return AggregateReport(
        model_kind=reports[0].model_kind,
        total_mean_px=float(totals.mean()),
        total_std_px=float(totals.std(ddof=1)),
        per_year_mean_px=tuple(float(v) for v in years.mean(axis=0)),
        per_year_std_px=tuple(float(v) for v in years.std(axis=0, ddof=1)),
    )


# ---------------------------------------------------------------------------
# report files


def emit_report(reports, destination, svg: bool = True):
    """Write metrics.csv, summary.csv, and optionally summary.svg.

    metrics.csv: one row per (model, trial, year).
    summary.csv: one row per model, mean +- sample std of total RMSE.
    """
    reports = sorted(reports, key=lambda r: (r.model_kind, r.trial))
    if not reports:
        raise ConfigError("emit_report: no trial reports")
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)

    lines = ["model,trial,year,rmse_px,rmse_cm"]
    for r in reports:
        for year, px in zip(TARGET_YEARS, r.per_year_px):
            px = float(px)
            lines.append(f"{r.model_kind},{r.trial},{year},{px!r},{px * CM_PER_PIXEL!r}")
    metrics_path = dest / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")

    by_kind = {}
    for r in reports:
        by_kind.setdefault(r.model_kind, []).append(r)
    aggregates = {kind: aggregate(rs) for kind, rs in sorted(by_kind.items())}

    lines = [
        "model,total_rmse_mean_px,total_rmse_std_px,"
        "total_rmse_mean_cm,total_rmse_std_cm,summary"
    ]
    for kind, agg in aggregates.items():
        lines.append(
            f"{kind},{agg.total_mean_px!r},{agg.total_std_px!r},"
            f"{agg.total_mean_px * CM_PER_PIXEL!r},{agg.total_std_px * CM_PER_PIXEL!r},"
            f"{agg.formatted_total()}"
        )
    summary_path = dest / "summary.csv"
    summary_path.write_text("\n".join(lines) + "\n")

    paths = {"metrics": metrics_path, "summary": summary_path}
    if svg:
        svg_path = dest / "summary.svg"
        svg_path.write_text(_per_year_bar_chart(aggregates))
        paths["svg"] = svg_path
    return paths


_SVG_COLORS = ("#4878a8", "#d08048", "#60a860")


def _per_year_bar_chart(aggregates):
    """Hand-rolled grouped bar chart: per-year mean RMSE with std whiskers.

    Written directly as SVG text so emission stays byte-deterministic.
    """
    kinds = list(aggregates)
    width, height = 880, 420
    left, right, top, bottom = 60, 20, 40, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    peak = max(
        m + s
        for agg in aggregates.values()
        for m, s in zip(agg.per_year_mean_px, agg.per_year_std_px)
    )
    peak = peak * 1.1 if peak > 0 else 1.0

    def sy(value):
        return top + plot_h * (1.0 - value / peak)

    group_w = plot_w / len(TARGET_YEARS)
    bar_w = group_w * 0.8 / max(len(kinds), 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
        "Per-year test RMSE (pixels), mean over 5 trials</text>",
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        value = peak * frac
        y = sy(value)
        parts.append(
            f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{value:.2f}</text>'
        )
    for yi, year in enumerate(TARGET_YEARS):
        x0 = left + yi * group_w
        parts.append(
            f'<text x="{x0 + group_w / 2:.2f}" y="{top + plot_h + 18}" '
            f'text-anchor="middle" font-size="11">{year}</text>'
        )
        for ki, kind in enumerate(kinds):
            agg = aggregates[kind]
            mean = agg.per_year_mean_px[yi]
            std = agg.per_year_std_px[yi]
            bx = x0 + group_w * 0.1 + ki * bar_w
            by = sy(mean)
            parts.append(
                f'<rect x="{bx:.2f}" y="{by:.2f}" width="{bar_w:.2f}" '
                f'height="{top + plot_h - by:.2f}" fill="{_SVG_COLORS[ki % 3]}"/>'
            )
            cx = bx + bar_w / 2
            parts.append(
                f'<line x1="{cx:.2f}" y1="{sy(mean - std):.2f}" x2="{cx:.2f}" '
                f'y2="{sy(mean + std):.2f}" stroke="black" stroke-width="1"/>'
            )
    for ki, kind in enumerate(kinds):
        lx = left + 10 + ki * 140
        parts.append(
            f'<rect x="{lx}" y="{top - 12}" width="12" height="12" fill="{_SVG_COLORS[ki % 3]}"/>'
        )
        parts.append(
            f'<text x="{lx + 16}" y="{top - 2}" font-size="12">{kind}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
