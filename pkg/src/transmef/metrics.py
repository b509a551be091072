"""Objective fusion-quality metrics (two sources A, B and one fused F).

All metrics quantize their inputs to 8-bit (0..255) first, so a full 8-bit
round trip of an image cannot change any score.  Larger is better for every
metric.  Implemented: mutual-information transfer (q_mi), Tsallis-entropy
transfer of order 1.85 (q_te), mean PSNR against both sources, gradient
preservation q_abf (Sobel edges, sigmoid preservation factors), fused-image
standard deviation, mean SSIM and mean Pearson correlation.

q_te uses the Tsallis mutual information

    I_q(X;Y) = (1 - sum p(x,y)^q (p(x)p(y))^(1-q)) / (1 - q)

which reduces to Shannon mutual information as q -> 1 and is nonnegative
for q > 1 by Jensen's inequality.
"""

import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, ShapeError, no_grad
from . import loss as loss_mod

TSALLIS_Q = 1.85
PSNR_CAP = 100.0

# gradient-preservation sigmoid constants (edge strength, then orientation)
QABF_GAMMA_G = 0.9994
QABF_KAPPA_G = -15.0
QABF_SIGMA_G = 0.5
QABF_GAMMA_A = 0.9879
QABF_KAPPA_A = -22.0
QABF_SIGMA_A = 0.8


def _to_u8(image: np.ndarray) -> np.ndarray:
    """Quantize to uint8: floats are treated as [0,1], ints as already 0..255."""
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.uint8)
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _check_extents(*images) -> None:
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"metric inputs must share one extent, got {shapes}")


def _joint_hist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    idx = x.astype(np.int64).ravel() * 256 + y.astype(np.int64).ravel()
    return np.bincount(idx, minlength=256 * 256).reshape(256, 256).astype(np.float64)


def _marginals(hist: np.ndarray):
    pxy = hist / hist.sum()
    return pxy, pxy.sum(axis=1), pxy.sum(axis=0)


def mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    """Shannon MI (natural log) from a 256-bin joint histogram."""
    pxy, px, py = _marginals(_joint_hist(x, y))
    nz = pxy > 0
    prod = np.outer(px, py)[nz]
    return float((pxy[nz] * np.log(pxy[nz] / prod)).sum())


def tsallis_information(x: np.ndarray, y: np.ndarray, q: float) -> float:
    pxy, px, py = _marginals(_joint_hist(x, y))
    nz = pxy > 0
    prod = np.outer(px, py)[nz]
    f = (pxy[nz] ** q * prod ** (1.0 - q)).sum()
    return float((1.0 - f) / (1.0 - q))


def q_mi(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """MI(A,F) + MI(B,F): information transferred into the fused image."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    return mutual_information(a, f) + mutual_information(b, f)


def q_te(a: np.ndarray, b: np.ndarray, f: np.ndarray, q: float = TSALLIS_Q) -> float:
    """Tsallis-entropy transfer of order q from both sources."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    return tsallis_information(a, f, q) + tsallis_information(b, f, q)


def _psnr(f: np.ndarray, x: np.ndarray) -> float:
    mse = float(np.mean((f.astype(np.float64) - x.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP)


def psnr_metric(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Mean of PSNR(F,A) and PSNR(F,B), peak 255, capped at 100 dB."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    return 0.5 * (_psnr(f, a) + _psnr(f, b))


def _sobel(img: np.ndarray):
    """Correlation with the Sobel pair, replicate borders; (sx, sy)."""
    p = np.pad(img, 1, mode="edge")
    sx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2.0 * p[1:-1, :-2] - p[2:, :-2])
    sy = (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
          - p[2:, :-2] - 2.0 * p[2:, 1:-1] - p[2:, 2:])
    return sx, sy


def _edge_maps(img: np.ndarray):
    sx, sy = _sobel(img.astype(np.float64))
    g = np.hypot(sx, sy)
    safe = np.where(sx == 0.0, 1.0, sx)
    alpha = np.where(sx == 0.0, np.pi / 2.0, np.arctan(sy / safe))
    return g, alpha


def _preservation(g_src, a_src, g_f, a_f):
    # ratio of weaker to stronger gradient; the equality branch keeps the
    # raw magnitude, matching the reference formulation of this metric
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f, g_f / g_src,
                         np.where(g_src == g_f, g_f, g_src / g_f))
    ratio = np.nan_to_num(ratio, nan=0.0, posinf=0.0, neginf=0.0)
    q_g = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
    delta = 1.0 - np.abs(a_src - a_f) / (np.pi / 2.0)
    q_a = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (delta - QABF_SIGMA_A)))
    return q_g * q_a


def q_abf(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Edge-information preservation, weighted by source edge strength."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise ShapeError("q_abf needs at least 3x3 images")
    g_a, al_a = _edge_maps(a)
    g_b, al_b = _edge_maps(b)
    g_f, al_f = _edge_maps(f)
    q_af = _preservation(g_a, al_a, g_f, al_f)
    q_bf = _preservation(g_b, al_b, g_f, al_f)
    den = float((g_a + g_b).sum())
    if den == 0.0:
        return 0.0
    return float((q_af * g_a + q_bf * g_b).sum() / den)


def std_metric(f: np.ndarray) -> float:
    """Population standard deviation of the fused image on the 0..255 scale."""
    return float(np.std(_to_u8(f).astype(np.float64)))


def ssim_metric(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Mean of SSIM(F,A) and SSIM(F,B) (11x11 Gaussian window)."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    with no_grad():
        ft = Tensor((f[None] / 255.0).astype(np.float64))
        sa = loss_mod.ssim(ft, Tensor((a[None] / 255.0).astype(np.float64))).item()
        sb = loss_mod.ssim(ft, Tensor((b[None] / 255.0).astype(np.float64))).item()
    return 0.5 * (sa + sb)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x.astype(np.float64).ravel()
    y = y.astype(np.float64).ravel()
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0.0:
        return 0.0  # zero-variance plane: correlation defined as 0
    return float((xc * yc).sum() / den)


def cc(a: np.ndarray, b: np.ndarray, f: np.ndarray) -> float:
    """Mean Pearson correlation of the fused image with both sources."""
    a, b, f = _to_u8(a), _to_u8(b), _to_u8(f)
    _check_extents(a, b, f)
    return 0.5 * (_pearson(f, a) + _pearson(f, b))


# -- reports and corpus evaluation ------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    pair: str
    q_mi: float
    q_te: float
    psnr: float
    q_abf: float
    std: float
    ssim: float
    cc: float

    COLUMNS = ("q_mi", "q_te", "psnr", "q_abf", "std", "ssim", "cc")


def compute_report(pair: str, a: np.ndarray, b: np.ndarray, f: np.ndarray) -> MetricReport:
    return MetricReport(
        pair=pair,
        q_mi=q_mi(a, b, f),
        q_te=q_te(a, b, f),
        psnr=psnr_metric(a, b, f),
        q_abf=q_abf(a, b, f),
        std=std_metric(f),
        ssim=ssim_metric(a, b, f),
        cc=cc(a, b, f),
    )


def mean_report(reports) -> MetricReport:
    if not reports:
        raise ValueError("cannot average an empty report list")
    values = {
        col: float(np.mean([getattr(r, col) for r in reports]))
        for col in MetricReport.COLUMNS
    }
    return MetricReport(pair="mean", **values)


def evaluate_corpus(directory: str):
    """Score every <name>_A/_B/_F triple in a directory.

    Returns (reports sorted by pair name, mean report or None, skipped
    count).  Triples with a missing or unreadable member are skipped.
    """
    from . import imio

    suffixes = (".png", ".pgm", ".ppm")
    stems = {}
    for entry in sorted(os.listdir(directory)):
        base, ext = os.path.splitext(entry)
        if ext.lower() not in suffixes or "_" not in base:
            continue
        name, role = base.rsplit("_", 1)
        if role in ("A", "B", "F"):
            stems.setdefault(name, {})[role] = os.path.join(directory, entry)

    reports = []
    skipped = 0
    for name in sorted(stems):
        roles = stems[name]
        if set(roles) != {"A", "B", "F"}:
            skipped += 1
            continue
        try:
            planes = {r: imio.to_grayscale(imio.load_image(roles[r])) for r in "ABF"}
        except (OSError, ValueError):
            skipped += 1
            continue
        reports.append(compute_report(name, planes["A"], planes["B"], planes["F"]))
    mean = mean_report(reports) if reports else None
    return reports, mean, skipped


def write_metrics_csv(reports, mean, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", *MetricReport.COLUMNS])
        rows = list(reports) + ([mean] if mean is not None else [])
        for r in rows:
            writer.writerow([r.pair] + [f"{getattr(r, c):.9g}" for c in MetricReport.COLUMNS])
