"""Self-supervised destruction transforms: gamma, Fourier, region shuffling.

All three operate on grayscale images as (H,W) float arrays with intensities
in [0,1] and are identity outside the touched subregions.  Randomness comes
from an explicit SplitMix64 stream per call, so (image, task, seed) fully
determines the output.

Draw order (part of the determinism contract):
  * sample_subregions: per region h, w, x, y.
  * gamma: after the 10 regions, one gamma per region, in region order,
    from the substream derive(seed, 1).
  * fourier: per region (substream derive(seed, 1)): n_p, then n_p
    Fisher-Yates shuffles of the flattened phase grid.
  * shuffle: 10 iterations, each drawing (h, w, x, y) then the partner
    (x', y'), all from the single stream.

Regions are applied sequentially, so overlapping regions see the values
written by earlier ones.
"""

import math
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive

MAX_REGION = 25      # inclusive upper bound on subregion extent, pixels
NUM_REGIONS = 10
TASK_GAMMA = "gamma"
TASK_FOURIER = "fourier"
TASK_SHUFFLE = "shuffle"
TASKS = (TASK_GAMMA, TASK_FOURIER, TASK_SHUFFLE)


class CorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class SubRegion:
    """Rectangular patch: top-left (x,y) in pixel coords, extents h, w."""
    x: int
    y: int
    h: int
    w: int

    @property
    def slices(self):
        return (slice(self.y, self.y + self.h), slice(self.x, self.x + self.w))


@dataclass(frozen=True)
class CorruptionPlan:
    task: str
    regions: tuple  # exactly NUM_REGIONS SubRegions
    rng_seed: int


def _sample_one_region(rng: SplitMix64, height: int, width: int) -> SubRegion:
    h = rng.randint(1, MAX_REGION)
    w = rng.randint(1, MAX_REGION)
    x = rng.randint(0, width - w)
    y = rng.randint(0, height - h)
    return SubRegion(x=x, y=y, h=h, w=w)


def sample_subregions(rng: SplitMix64, height: int, width: int) -> list:
    """10 subregions with extents uniform on [1,25]; overlaps permitted."""
    if height < MAX_REGION or width < MAX_REGION:
        raise CorruptionError(
            f"image {height}x{width} smaller than {MAX_REGION}x{MAX_REGION}")
    return [_sample_one_region(rng, height, width) for _ in range(NUM_REGIONS)]


def make_plan(task: str, seed: int, height: int, width: int) -> CorruptionPlan:
    if task not in TASKS:
        raise CorruptionError(f"unknown corruption task {task!r}")
    rng = SplitMix64(seed)
    regions = tuple(sample_subregions(rng, height, width))
    return CorruptionPlan(task=task, regions=regions, rng_seed=seed)


def _require_unit_range(image: np.ndarray) -> None:
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0:
        raise CorruptionError(f"intensities outside [0,1]: min={lo}, max={hi}")


# -- gamma -----------------------------------------------------------------------


def gamma_corrupt(image: np.ndarray, plan: CorruptionPlan) -> np.ndarray:
    """Raise each region's pixels to a per-region power drawn from U[0,3].

    0**0 evaluates to 1, so a gamma of exactly 0 maps the whole region
    to white.
    """
    _require_unit_range(image)
    rng = SplitMix64(derive(plan.rng_seed, 1))
    out = image.copy()
    for region in plan.regions:
        g = rng.uniform(0.0, 3.0)
        sl = region.slices
        out[sl] = np.power(out[sl], g)
    return out


# -- Fourier ------------------------------------------------------------------------


_dft_cache = {}


def _dft_matrix(n: int) -> np.ndarray:
    if n not in _dft_cache:
        k = np.arange(n)
        _dft_cache[n] = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return _dft_cache[n]


def dft2(patch: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT, direct row-column evaluation.

    Region extents are arbitrary (1..25), so no radix-2 restriction applies;
    areas are at most 625 which keeps the O(n^2) product cheap.
    """
    h, w = patch.shape
    return _dft_matrix(h) @ patch.astype(np.complex128) @ _dft_matrix(w)


def idft2(grid: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT scaled by 1/(h*w); returns the complex grid."""
    h, w = grid.shape
    out = _dft_matrix(h).conj() @ grid @ _dft_matrix(w).conj()
    return out / (h * w)


def gaussian_blur(grid: np.ndarray, sigma: float = 0.5) -> np.ndarray:
    """Separable Gaussian with radius ceil(3*sigma) and wrap-around edges.

    Wrap-around matches the periodicity of the spectrum this is applied to,
    and the normalized kernel preserves the grid's total sum exactly.
    """
    if sigma <= 0:
        raise CorruptionError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    weights = np.exp(-(d * d) / (2.0 * sigma * sigma))
    weights /= weights.sum()
    out = np.zeros_like(grid, dtype=np.float64)
    for k, wk in zip(range(-radius, radius + 1), weights):
        out += wk * np.roll(grid, -k, axis=0)
    out2 = np.zeros_like(out)
    for k, wk in zip(range(-radius, radius + 1), weights):
        out2 += wk * np.roll(out, -k, axis=1)
    return out2


def fourier_corrupt(image: np.ndarray, plan: CorruptionPlan) -> np.ndarray:
    """Blur each region's amplitude spectrum and shuffle its phase values.

    Per region: amplitude <- gaussian_blur(amplitude, 0.5); the flattened
    phase grid gets n_p full Fisher-Yates shuffles with n_p uniform on
    {1..5}; the spectrum is recombined as amplitude*exp(i*phase), inverted,
    and the real part clamped to [0,1].
    """
    _require_unit_range(image)
    rng = SplitMix64(derive(plan.rng_seed, 1))
    out = image.copy()
    for region in plan.regions:
        sl = region.slices
        patch = out[sl].astype(np.float64)
        spectrum = dft2(patch)
        amplitude = gaussian_blur(np.abs(spectrum), sigma=0.5)
        phase = np.angle(spectrum).ravel()
        n_p = rng.randint(1, 5)
        for _ in range(n_p):
            rng.shuffle(phase)
        phase = phase.reshape(patch.shape)
        rec = idft2(amplitude * np.exp(1j * phase)).real
        out[sl] = np.clip(rec, 0.0, 1.0).astype(out.dtype)
    return out


# -- global region shuffling ------------------------------------------------------------


def shuffle_corrupt(image: np.ndarray, rng: SplitMix64) -> np.ndarray:
    """Swap 10 random region pairs of equal size.

    Each iteration draws a region and a same-sized partner (overlap with the
    first is permitted); both are copied before either is written, so an
    overlapping swap is still well-defined.
    """
    height, width = image.shape
    if height < MAX_REGION or width < MAX_REGION:
        raise CorruptionError(
            f"image {height}x{width} smaller than {MAX_REGION}x{MAX_REGION}")
    out = image.copy()
    for _ in range(NUM_REGIONS):
        first = _sample_one_region(rng, height, width)
        x2 = rng.randint(0, width - first.w)
        y2 = rng.randint(0, height - first.h)
        second = SubRegion(x=x2, y=y2, h=first.h, w=first.w)
        a = out[first.slices].copy()
        b = out[second.slices].copy()
        out[first.slices] = b
        out[second.slices] = a
    return out


# -- dispatcher --------------------------------------------------------------------------


def corrupt(image: np.ndarray, task: str, seed: int) -> np.ndarray:
    """Apply one named corruption task with a fresh stream from ``seed``."""
    if task == TASK_SHUFFLE:
        return shuffle_corrupt(image, SplitMix64(seed))
    plan = make_plan(task, seed, image.shape[0], image.shape[1])
    if task == TASK_GAMMA:
        return gamma_corrupt(image, plan)
    return fourier_corrupt(image, plan)


# -- amplitude/phase demo ------------------------------------------------------------------


def _normalize_for_display(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi - lo < 1e-12:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def amplitude_only(image: np.ndarray) -> np.ndarray:
    """Reconstruction with the phase spectrum set to a constant zero."""
    amp = np.abs(dft2(image))
    return _normalize_for_display(idft2(amp.astype(np.complex128)).real)


def phase_only(image: np.ndarray) -> np.ndarray:
    """Reconstruction with the amplitude spectrum set to a constant one."""
    phase = np.angle(dft2(image))
    return _normalize_for_display(idft2(np.exp(1j * phase)).real)


def phase_exchange(a: np.ndarray, b: np.ndarray):
    """Swap the phase spectra of two same-sized images.

    Returns (amplitude of a + phase of b, amplitude of b + phase of a),
    both min-max normalized for display.
    """
    if a.shape != b.shape:
        raise CorruptionError("phase_exchange requires equally sized images")
    sa, sb = dft2(a), dft2(b)
    rec_ab = idft2(np.abs(sa) * np.exp(1j * np.angle(sb))).real
    rec_ba = idft2(np.abs(sb) * np.exp(1j * np.angle(sa))).real
    return _normalize_for_display(rec_ab), _normalize_for_display(rec_ba)
