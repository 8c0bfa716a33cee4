"""Compositing, masked MAE, SSIM, naive baselines and correlation analyses."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .masking import MaskedChip

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MEAN_REFLECTANCE = 0.15

CSV_HEADER = ["chip_id", "model", "mode", "epoch", "coverage", "max_gap_days", "mae_masked", "ssim"]
SCOPES = ("E1_center", "E2_all")


@dataclass
class MetricsRecord:
    chip_id: str
    model: str
    mode: str
    epoch: int
    coverage: float
    time_gaps: list[float]
    mae_masked: float
    ssim: float

    @property
    def max_gap(self) -> float:
        return max(self.time_gaps) if self.time_gaps else 0.0


def _broadcast_mask(pixel_mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Expand a [..., T, H, W] pixel mask over the band axis of [..., T, B, H, W] data."""
    m = np.asarray(pixel_mask).astype(bool)
    return np.broadcast_to(np.expand_dims(m, -3), shape)


def composite(generated: np.ndarray, truth: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Ground truth everywhere except masked pixels, which take the generated value."""
    generated = np.asarray(generated)
    truth = np.asarray(truth)
    if generated.shape != truth.shape:
        raise DataError(f"shape mismatch {generated.shape} vs {truth.shape}")
    return np.where(_broadcast_mask(pixel_mask, truth.shape), generated, truth)


def mae_masked(generated: np.ndarray, truth: np.ndarray, pixel_mask: np.ndarray) -> float:
    generated = np.asarray(generated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if generated.shape != truth.shape:
        raise DataError(f"shape mismatch {generated.shape} vs {truth.shape}")
    sel = _broadcast_mask(pixel_mask, truth.shape)
    n = int(sel.sum())
    if n == 0:
        raise DataError("no masked pixels to score")
    return float(np.abs(generated[sel] - truth[sel]).sum() / n)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = g.size
    x = sliding_window_view(x, k, axis=-1) @ g
    x = sliding_window_view(x, k, axis=-2) @ g
    return x


def ssim_planes(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Mean SSIM of each [..., H, W] plane pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise DataError(f"plane {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=(-2, -1))


def ssim(composite_: np.ndarray, truth: np.ndarray, scope: str) -> float:
    """SSIM of a [T, B, H, W] chip, averaged per (scene, band) plane.

    ``E1_center`` scores only the middle scene, ``E2_all`` every scene.
    """
    if scope not in SCOPES:
        raise DataError(f"unknown SSIM scope {scope!r}")
    composite_ = np.asarray(composite_)
    truth = np.asarray(truth)
    if scope == "E1_center":
        t = truth.shape[0] // 2
        composite_, truth = composite_[t : t + 1], truth[t : t + 1]
    return float(ssim_planes(composite_, truth).mean())


def scope_for_mode(mode: str) -> str:
    return "E1_center" if mode == "E1" else "E2_all"


def baseline_impute(masked_chip: MaskedChip, strategy: str,
                    dates: Sequence[int] | None = None) -> np.ndarray:
    """Fill masked pixels from the same location in other, unmasked scenes.

    ``copy_nearest_scene`` takes the scene closest in time (ties go to the
    earlier scene); ``mean_of_unmasked_scenes`` averages all unmasked scenes.
    Pixels masked in every scene get the dataset mean reflectance. Without
    ``dates`` scenes are taken to be evenly spaced.
    """
    data = np.asarray(masked_chip.masked_data)
    pm = np.asarray(masked_chip.pixel_mask).astype(bool)
    t_count = data.shape[0]
    dates = np.arange(t_count) if dates is None else np.asarray(dates)
    out = data.astype(np.float64, copy=True)
    clear = ~pm  # [T, H, W]
    for t in range(t_count):
        if not pm[t].any():
            continue
        others = [s for s in range(t_count) if s != t]
        if strategy == "copy_nearest_scene":
            fill = np.full(data.shape[1:], MEAN_REFLECTANCE)
            filled = np.zeros(pm.shape[1:], dtype=bool)
            # Stable sort on gap keeps the earlier scene first on ties.
            for s in sorted(others, key=lambda s: (abs(int(dates[s]) - int(dates[t])), s)):
                take = clear[s] & ~filled
                fill[:, take] = data[s][:, take]
                filled |= take
        elif strategy == "mean_of_unmasked_scenes":
            weights = clear[others].astype(np.float64)  # [S, H, W]
            total = np.einsum("shw,sbhw->bhw", weights, data[others].astype(np.float64))
            count = weights.sum(axis=0)
            fill = np.where(count > 0, total / np.maximum(count, 1), MEAN_REFLECTANCE)
        else:
            raise DataError(f"unknown baseline strategy {strategy!r}")
        sel = np.broadcast_to(pm[t], data.shape[1:])
        out[t][sel] = fill[sel]
    return out.astype(data.dtype)


BASELINES = ("copy_nearest_scene", "mean_of_unmasked_scenes")


# ---------------------------------------------------------------------------
# correlation analyses

REPORT_FIELDS = ("coverage", "max_gap", "mae_masked", "ssim")


@dataclass
class CorrelationReport:
    names: tuple[str, ...]
    matrix: np.ndarray
    undefined: np.ndarray  # bool, True where r could not be computed

    def as_rows(self) -> list[list[str]]:
        rows = [["", *self.names]]
        for name, row in zip(self.names, self.matrix):
            rows.append([name, *(f"{v:.4f}" if np.isfinite(v) else "nan" for v in row)])
        return rows


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0.0:
        return float("nan")
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


def correlation_report(records: Iterable[MetricsRecord]) -> CorrelationReport:
    cols = np.array(
        [[r.coverage, r.max_gap, r.mae_masked, r.ssim] for r in records], dtype=np.float64
    ).reshape(-1, len(REPORT_FIELDS))
    k = cols.shape[1]
    mat = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            ok = np.isfinite(cols[:, i]) & np.isfinite(cols[:, j])
            r = pearson(cols[ok, i], cols[ok, j]) if ok.sum() >= 2 else float("nan")
            if i == j and np.isfinite(r):
                r = 1.0
            mat[i, j] = mat[j, i] = r
    return CorrelationReport(REPORT_FIELDS, mat, ~np.isfinite(mat))


@dataclass
class BandCorrMatrix:
    matrix: np.ndarray  # [T*B, T*B]
    population: str  # "generated" or "truth"
    n_pixels: int
    labels: list[str] = field(default_factory=list)


def band_correlation(values: np.ndarray, pixel_mask: np.ndarray, population: str = "truth") -> BandCorrMatrix:
    """Pearson correlation between all (scene, band) channels over masked pixel locations.

    Accepts a single chip [T, B, H, W] with mask [T, H, W], or a stack with a
    leading chip axis. A location counts when any scene is masked there.
    """
    values = np.asarray(values, dtype=np.float64)
    pm = np.asarray(pixel_mask).astype(bool)
    if values.ndim == 4:
        values, pm = values[None], pm[None]
    n, t_count, b_count, h, w = values.shape
    where = pm.any(axis=1)  # [N, H, W]
    chans = values.reshape(n, t_count * b_count, h, w).transpose(1, 0, 2, 3)[:, where]  # [C, P]
    if chans.shape[1] < 2:
        raise DataError("band correlation needs at least two masked pixel locations")
    c = chans.shape[0]
    mat = np.full((c, c), np.nan)
    for i in range(c):
        for j in range(i, c):
            r = pearson(chans[i], chans[j])
            if i == j and np.isfinite(r):
                r = 1.0
            mat[i, j] = mat[j, i] = r
    labels = [f"t{t}b{b}" for t in range(t_count) for b in range(b_count)]
    return BandCorrMatrix(mat, population, int(chans.shape[1]), labels)


def write_band_matrix_csv(bm: BandCorrMatrix, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([bm.population, *bm.labels])
        for label, row in zip(bm.labels, bm.matrix):
            w.writerow([label, *(f"{v:.6f}" if np.isfinite(v) else "nan" for v in row)])


# ---------------------------------------------------------------------------
# per-chip evaluation and CSV I/O


def evaluate_chip(generated: np.ndarray, truth: np.ndarray, pixel_mask: np.ndarray, *,
                  chip_id: str, model: str, mode: str, epoch: int, dates: Sequence[int]) -> MetricsRecord:
    comp = composite(generated, truth, pixel_mask)
    pm = np.asarray(pixel_mask)
    scenes = [t for t in range(pm.shape[0]) if pm[t].any()]
    coverage = float(np.mean([pm[t].mean() for t in scenes])) if scenes else 0.0
    return MetricsRecord(
        chip_id=chip_id,
        model=model,
        mode=mode,
        epoch=epoch,
        coverage=coverage,
        time_gaps=[float(g) for g in np.diff(np.asarray(dates))],
        mae_masked=mae_masked(comp, truth, pm),
        ssim=ssim(comp, truth, scope_for_mode(mode)),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(records: Iterable[MetricsRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.chip_id, r.model, r.mode, r.epoch, _fmt(r.coverage), _fmt(r.max_gap),
                        _fmt(r.mae_masked), _fmt(r.ssim)])


def read_metrics_csv(path: str | os.PathLike) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            MetricsRecord(
                chip_id=row["chip_id"],
                model=row["model"],
                mode=row["mode"],
                epoch=int(row["epoch"]),
                coverage=float(row["coverage"]),
                time_gaps=[float(row["max_gap_days"])],
                mae_masked=float(row["mae_masked"]),
                ssim=float(row["ssim"]),
            )
            for row in reader
        ]
