"""Reconstruction losses: per-task MSE + weighted SSIM + weighted TV.

Each reconstruction task is scored as

    task = mse + lambda_ssim * (1 - ssim) + lambda_tv * tv

and the training total is the unweighted sum of the enabled task losses.
MSE and TV are means over pixels so the default weights (20, 20) are
independent of image size.  The TV term penalizes horizontal and vertical
differences of the residual between reconstruction and original, with each
absolute difference smoothed as sqrt(d^2 + 1e-12) for differentiability.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, conv2d, narrow, sqrt

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
_TV_SMOOTH = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the SSIM and TV terms inside one task loss."""
    lambda_ssim: float = 20.0
    lambda_tv: float = 20.0

    def __post_init__(self):
        if not (np.isfinite(self.lambda_ssim) and np.isfinite(self.lambda_tv)):
            raise ValueError("loss weights must be finite")
        if self.lambda_ssim < 0 or self.lambda_tv < 0:
            raise ValueError("loss weights must be nonnegative")


def _check_same_shape(out: Tensor, target: Tensor, op: str) -> None:
    if out.data.shape != target.data.shape:
        raise ShapeError(f"{op}: shapes differ {out.data.shape} vs {target.data.shape}")


def mse_loss(out: Tensor, target: Tensor) -> Tensor:
    """Mean over pixels of the squared difference."""
    _check_same_shape(out, target, "mse_loss")
    d = out - target
    return (d * d).mean()


_window_cache = {}


def ssim_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                dtype=np.float32) -> Tensor:
    """Normalized 2-D Gaussian window as a constant (1,1,size,size) kernel."""
    key = (size, sigma, np.dtype(dtype).str)
    if key not in _window_cache:
        d = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        g = np.exp(-(d * d) / (2.0 * sigma * sigma))
        w = np.outer(g, g)
        w /= w.sum()
        _window_cache[key] = Tensor(w.astype(dtype).reshape(1, 1, size, size))
    return _window_cache[key]


def ssim(a: Tensor, b: Tensor, data_range: float = 1.0) -> Tensor:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5).

    Differentiable; inputs are [1,H,W] tensors with H,W >= 11.
    """
    _check_same_shape(a, b, "ssim")
    if a.data.ndim != 3 or a.data.shape[0] != 1:
        raise ShapeError("ssim expects [1,H,W] tensors")
    h, w = a.data.shape[1], a.data.shape[2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = ssim_window(dtype=a.data.dtype)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu1 = conv2d(a, win, padding=0)
    mu2 = conv2d(b, win, padding=0)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    sigma1_sq = conv2d(a * a, win, padding=0) - mu1_sq
    sigma2_sq = conv2d(b * b, win, padding=0) - mu2_sq
    sigma12 = conv2d(a * b, win, padding=0) - mu12

    num = (2.0 * mu12 + c1) * (2.0 * sigma12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2)
    return (num / den).mean()


def ssim_loss(out: Tensor, target: Tensor) -> Tensor:
    return 1.0 - ssim(out, target)


def tv_loss(out: Tensor, target: Tensor) -> Tensor:
    """Total variation of the residual out - target, mean-normalized.

    Sums |R(p,q+1)-R(p,q)| + |R(p+1,q)-R(p,q)| over valid offsets and
    divides by the pixel count.
    """
    _check_same_shape(out, target, "tv_loss")
    if out.data.ndim != 3:
        raise ShapeError("tv_loss expects [1,H,W] tensors")
    h, w = out.data.shape[1], out.data.shape[2]
    if h < 2 or w < 2:
        raise ShapeError("tv_loss needs at least 2x2 images")
    r = out - target
    dh = narrow(r, 2, 1, w) - narrow(r, 2, 0, w - 1)
    dv = narrow(r, 1, 1, h) - narrow(r, 1, 0, h - 1)
    tv = sqrt(dh * dh + _TV_SMOOTH).sum() + sqrt(dv * dv + _TV_SMOOTH).sum()
    return tv / float(h * w)


def task_loss_terms(out: Tensor, target: Tensor, weights: LossWeights):
    """(mse, ssim_term, tv, total) tensors for one reconstruction task."""
    m = mse_loss(out, target)
    s = ssim_loss(out, target)
    t = tv_loss(out, target)
    total = m + weights.lambda_ssim * s + weights.lambda_tv * t
    return m, s, t, total


def task_loss(out: Tensor, target: Tensor, weights: LossWeights) -> Tensor:
    return task_loss_terms(out, target, weights)[3]


def total_loss(task_losses) -> Tensor:
    """Unweighted sum of the enabled task losses."""
    task_losses = list(task_losses)
    if not task_losses:
        raise ValueError("total_loss needs at least one task loss")
    acc = task_losses[0]
    for t in task_losses[1:]:
        acc = acc + t
    return acc


@dataclass(frozen=True)
class TaskTerms:
    mse: float = 0.0
    ssim_term: float = 0.0
    tv: float = 0.0
    task_total: float = 0.0


@dataclass(frozen=True)
class LossReport:
    """Per-step record of the three task losses and the grand total.

    ``task_total`` of every task equals mse + l1*ssim_term + l2*tv and the
    grand total is the sum of the task totals, both recomputed in float64 so
    the identities hold to within accumulation error of the terms.
    """
    gamma: TaskTerms
    fourier: TaskTerms
    shuffle: TaskTerms
    total: float

    @classmethod
    def from_terms(cls, weights: LossWeights, gamma=None, fourier=None, shuffle=None):
        def build(terms):
            if terms is None:
                return TaskTerms()
            m, s, t = (float(v) for v in terms)
            return TaskTerms(m, s, t,
                             m + weights.lambda_ssim * s + weights.lambda_tv * t)
        g, f, s = build(gamma), build(fourier), build(shuffle)
        return cls(gamma=g, fourier=f, shuffle=s,
                   total=g.task_total + f.task_total + s.task_total)
