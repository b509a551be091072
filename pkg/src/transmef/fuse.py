"""Fusion pipeline: encode both exposures, average features, decode.

Grayscale fusion is decode(mean(encode(I1), encode(I2))); the mean makes the
pipeline exactly symmetric in its inputs and exactly idempotent on identical
inputs.  Inputs whose extent is not a multiple of the patch size are padded
(reflect, bottom/right) to the next multiple and cropped back after decoding.

Color images are fused in YCbCr: the luminance plane goes through the
network, the chroma planes are combined by a weighted average that favors
values far from the neutral point tau=128 (the exact mean is used as the
fallback when both planes sit at tau and the weights vanish).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, no_grad
from .model import TransMEF

CHROMA_TAU = 128.0
_CHROMA_EPS = 1e-6

# Full-range BT.601 RGB -> YCbCr; the inverse is the exact matrix inverse.
_FWD = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=np.float64)
_OFFSET = np.array([0.0, 128.0, 128.0])
_INV = np.linalg.inv(_FWD)


@dataclass(frozen=True)
class ExposurePair:
    """Two registered exposures of one scene, same extent and kind."""
    under: np.ndarray
    over: np.ndarray

    def __post_init__(self):
        if self.under.shape != self.over.shape:
            raise ShapeError(
                f"exposure extents differ: {self.under.shape} vs {self.over.shape}")
        if self.under.ndim not in (2, 3):
            raise ShapeError("exposures must be (H,W) or (H,W,3) arrays")


def fuse_features(f1: Tensor, f2: Tensor) -> Tensor:
    """Element-wise mean of two feature maps."""
    if f1.data.shape != f2.data.shape:
        raise ShapeError(f"feature shapes differ: {f1.data.shape} vs {f2.data.shape}")
    return (f1 + f2) * 0.5


def _pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    # reflect needs pad < extent; fall back to edge replication for tiny images
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(image, ((0, ph), (0, pw)), mode=mode)


def fuse_gray(under: np.ndarray, over: np.ndarray, model: TransMEF) -> np.ndarray:
    """Fuse two grayscale exposures ((H,W) floats in [0,1])."""
    if under.shape != over.shape:
        raise ShapeError(f"exposure extents differ: {under.shape} vs {over.shape}")
    h, w = under.shape
    p = model.config.patch_size
    with no_grad():
        a = Tensor(_pad_to_multiple(under, p)[None].astype(np.float32))
        b = Tensor(_pad_to_multiple(over, p)[None].astype(np.float32))
        fused = model.decode(fuse_features(model.encode(a), model.encode(b)))
    return fused.data[0, :h, :w].copy()


def fuse_chroma(c1: np.ndarray, c2: np.ndarray, tau: float = CHROMA_TAU) -> np.ndarray:
    """Distance-from-neutral weighted average of two chroma planes (0..255)."""
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    w1 = np.abs(c1 - tau)
    w2 = np.abs(c2 - tau)
    den = w1 + w2
    mean = 0.5 * (c1 + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        weighted = (c1 * w1 + c2 * w2) / den
    return np.where(den < _CHROMA_EPS, mean, weighted)


@dataclass(frozen=True)
class YCbCrImage:
    """Luma/chroma planes, full-range 0..255 convention."""
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        if not (self.y.shape == self.cb.shape == self.cr.shape):
            raise ShapeError("YCbCr planes must share one extent")


def rgb_to_ycbcr(rgb: np.ndarray) -> YCbCrImage:
    """(H,W,3) 0..255 RGB to full-range BT.601 YCbCr planes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    planes = np.tensordot(rgb, _FWD.T, axes=1) + _OFFSET
    planes = np.clip(planes, 0.0, 255.0)
    return YCbCrImage(y=planes[..., 0], cb=planes[..., 1], cr=planes[..., 2])


def ycbcr_to_rgb(image: YCbCrImage) -> np.ndarray:
    """Inverse conversion, channels clamped to [0,255]."""
    planes = np.stack([image.y, image.cb, image.cr], axis=-1) - _OFFSET
    rgb = np.tensordot(planes, _INV.T, axes=1)
    return np.clip(rgb, 0.0, 255.0)


def fuse_color(under_rgb: np.ndarray, over_rgb: np.ndarray, model: TransMEF) -> np.ndarray:
    """Fuse two RGB exposures ((H,W,3), 0..255); returns uint8 RGB."""
    pair = ExposurePair(np.asarray(under_rgb), np.asarray(over_rgb))
    yc1 = rgb_to_ycbcr(pair.under)
    yc2 = rgb_to_ycbcr(pair.over)
    fused_y = fuse_gray((yc1.y / 255.0).astype(np.float32),
                        (yc2.y / 255.0).astype(np.float32), model)
    fused = YCbCrImage(
        y=np.asarray(fused_y, dtype=np.float64) * 255.0,
        cb=fuse_chroma(yc1.cb, yc2.cb),
        cr=fuse_chroma(yc1.cr, yc2.cr),
    )
    return np.clip(np.rint(ycbcr_to_rgb(fused)), 0, 255).astype(np.uint8)


def average_fusion(under: np.ndarray, over: np.ndarray) -> np.ndarray:
    """Naive pixel-average baseline used for metric comparisons."""
    if under.shape != over.shape:
        raise ShapeError(f"exposure extents differ: {under.shape} vs {over.shape}")
    return 0.5 * (under.astype(np.float64) + over.astype(np.float64))
