"""Clearance-masked image quality metrics and the bicubic baseline.

cPSNR/cSSIM follow the PROBA-V challenge convention: the ground-truth
interior is cropped by a small border, the super-resolved image slides
over a grid of integer registration shifts, a per-shift brightness bias
(mean error over clear pixels) is removed, and the best score over all
shifts is reported. Occluded pixels never influence either metric: the
MSE averages over clear pixels only, and the SSIM window statistics are
mask-weighted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cotmisr.errors import DataError

__all__ = [
    "SceneScore",
    "cpsnr",
    "cssim",
    "bicubic_upscale",
    "write_scene_scores_csv",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class SceneScore:
    """Per-scene metric record: best scores plus the winning alignment."""

    cpsnr: float
    cssim: float
    best_shift: tuple[int, int]
    bias: float


def _check_pair(sr: np.ndarray, hr: np.ndarray, hr_mask: np.ndarray):
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    mask = np.asarray(hr_mask).astype(bool)
    if sr.ndim != 2 or hr.ndim != 2:
        raise ValueError(f"images must be 2-D, got sr {sr.shape}, hr {hr.shape}")
    if sr.shape != hr.shape or mask.shape != hr.shape:
        raise ValueError(
            f"extent mismatch: sr {sr.shape}, hr {hr.shape}, mask {mask.shape}"
        )
    return sr, hr, mask


def _gaussian_kernel_1d(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _valid_correlate(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a symmetric 1-D kernel."""
    tmp = sliding_window_view(img, len(k1d), axis=1) @ k1d
    return sliding_window_view(tmp, len(k1d), axis=0) @ k1d


def _masked_ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean SSIM over clear window centers, with mask-weighted statistics.

    Each local mean/variance/covariance uses Gaussian weights zeroed on
    occluded pixels and renormalized, so the value depends only on clear
    pixels. Positions whose center pixel is occluded are excluded.
    """
    k = _gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA)
    half = SSIM_WINDOW // 2
    m = mask.astype(np.float64)
    centers = mask[half:-half, half:-half]
    if not centers.any():
        raise DataError("no clear pixels left for the SSIM window interior")

    s = _valid_correlate(m, k)
    ma = _valid_correlate(m * a, k)
    mb = _valid_correlate(m * b, k)
    maa = _valid_correlate(m * a * a, k)
    mbb = _valid_correlate(m * b * b, k)
    mab = _valid_correlate(m * a * b, k)

    with np.errstate(divide="ignore", invalid="ignore"):
        mu_a = ma / s
        mu_b = mb / s
        var_a = maa / s - mu_a * mu_a
        var_b = mbb / s - mu_b * mu_b
        cov = mab / s - mu_a * mu_b
        c1 = SSIM_K1 * SSIM_K1
        c2 = SSIM_K2 * SSIM_K2
        ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        )
    return float(ssim[centers].mean())


def cpsnr(
    sr: np.ndarray,
    hr: np.ndarray,
    hr_clear_mask: np.ndarray,
    max_shift: int = 3,
    border: int = 3,
    cap_db: float = PSNR_CAP_DB,
) -> SceneScore:
    """Score one scene: bias-corrected masked PSNR and SSIM, best shift wins.

    The HR interior is cropped by ``border`` pixels per side; the SR
    window slides over all integer offsets within ``max_shift`` of
    center. For each alignment the brightness bias (mean of HR-SR over
    clear pixels) is removed before scoring; an exact match caps at
    ``cap_db``. Ties keep the first shift in row-major scan order, so
    identical inputs always produce an identical record.
    """
    sr, hr, mask = _check_pair(sr, hr, hr_clear_mask)
    if max_shift < 0 or border < max_shift:
        raise ValueError(f"need 0 <= max_shift <= border, got max_shift={max_shift}, border={border}")
    h, w = hr.shape
    ch, cw = h - 2 * border, w - 2 * border
    if ch <= 0 or cw <= 0:
        raise ValueError(f"images of extent {h}x{w} are too small for border={border}")
    hr_c = hr[border : border + ch, border : border + cw]
    mask_c = mask[border : border + ch, border : border + cw]
    n_clear = int(mask_c.sum())
    if n_clear == 0:
        raise DataError("scoring crop is fully occluded")

    best_psnr = -np.inf
    best_ssim = -np.inf
    best_shift = (0, 0)
    best_bias = 0.0
    for u in range(border - max_shift, border + max_shift + 1):
        for v in range(border - max_shift, border + max_shift + 1):
            sr_w = sr[u : u + ch, v : v + cw]
            diff = hr_c - sr_w
            bias = float(diff[mask_c].mean())
            resid = diff - bias
            mse = float((resid[mask_c] ** 2).mean())
            psnr = cap_db if mse == 0.0 else min(cap_db, -10.0 * np.log10(mse))
            if psnr > best_psnr:
                best_psnr = psnr
                best_shift = (u - border, v - border)
                best_bias = bias
            ssim = _masked_ssim(sr_w + bias, hr_c, mask_c)
            if ssim > best_ssim:
                best_ssim = ssim
    return SceneScore(cpsnr=best_psnr, cssim=best_ssim, best_shift=best_shift, bias=best_bias)


def cssim(
    sr: np.ndarray,
    hr: np.ndarray,
    hr_clear_mask: np.ndarray,
    max_shift: int = 3,
    border: int = 3,
) -> float:
    """Best bias-corrected, clearance-weighted SSIM over the shift grid."""
    return cpsnr(sr, hr, hr_clear_mask, max_shift=max_shift, border=border).cssim


# -- bicubic baseline -----------------------------------------------------------


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    out = np.zeros_like(at)
    near = at <= 1.0
    far = (at > 1.0) & (at < 2.0)
    out[near] = (a + 2.0) * at[near] ** 3 - (a + 3.0) * at[near] ** 2 + 1.0
    out[far] = a * at[far] ** 3 - 5.0 * a * at[far] ** 2 + 8.0 * a * at[far] - 4.0 * a
    return out


def _resample_matrix(n: int, r: int) -> np.ndarray:
    """Rows map n source samples to r*n bicubic-interpolated samples."""
    m = np.zeros((r * n, n))
    for i in range(r * n):
        src = (i + 0.5) / r - 0.5
        i0 = int(np.floor(src))
        for tap in range(-1, 3):
            j = i0 + tap
            weight = _catmull_rom(np.array(src - j))
            m[i, min(max(j, 0), n - 1)] += float(weight)
    return m


def bicubic_upscale(lr: np.ndarray, r: int) -> np.ndarray:
    """Catmull-Rom bicubic upscale by an integer factor, edges clamped."""
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 2:
        raise ValueError(f"bicubic_upscale expects a 2-D image, got shape {lr.shape}")
    if r < 1:
        raise ValueError(f"upscale factor must be >= 1, got {r}")
    if r == 1:
        return lr.copy()
    mh = _resample_matrix(lr.shape[0], r)
    mw = _resample_matrix(lr.shape[1], r)
    return mh @ lr @ mw.T


# -- report emitter ----------------------------------------------------------------

SCORE_COLUMNS = ("scene_id", "band", "cpsnr", "cssim", "shift_u", "shift_v", "bias")


def write_scene_scores_csv(path, rows: Iterable[tuple[str, str, SceneScore]]) -> None:
    """Write per-scene scores plus NIR/RED/ALL aggregate rows.

    Aggregates are plain means over the listed scenes; bands without any
    scenes leave their metric cells empty.
    """
    rows = list(rows)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for scene_id, band, score in rows:
            writer.writerow(
                [
                    scene_id,
                    band,
                    repr(score.cpsnr),
                    repr(score.cssim),
                    score.best_shift[0],
                    score.best_shift[1],
                    repr(score.bias),
                ]
            )
        for band in ("NIR", "RED", "ALL"):
            member = [s for _, b, s in rows if band == "ALL" or b == band]
            if member:
                mean_psnr = repr(float(np.mean([s.cpsnr for s in member])))
                mean_ssim = repr(float(np.mean([s.cssim for s in member])))
            else:
                mean_psnr = mean_ssim = ""
            writer.writerow(["aggregate", band, mean_psnr, mean_ssim, "", "", ""])
