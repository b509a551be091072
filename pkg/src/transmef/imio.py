"""Image file IO and dataset ingestion.

Self-contained codecs, no imaging dependency:
  * binary PGM (P5) and PPM (P6), 8-bit, lossless round trip;
  * PNG, 8-bit non-interlaced, color types 0 (gray), 2 (RGB), 3 (palette),
    4 (gray+alpha) and 6 (RGBA); alpha is dropped, palettes are expanded.
    The encoder writes unfiltered scanlines.

Grayscale conversion uses the same BT.601 luma as the fusion pipeline.
"""

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import fuse
from .rng import SplitMix64, derive, STREAM_DATA, STREAM_CROP


class ImageFormatError(ValueError):
    """File is not a decodable raster in a supported format."""


class DataError(ValueError):
    """Dataset-level problem (e.g. no decodable images)."""


@dataclass(frozen=True)
class RasterFile:
    """Decoded 8-bit raster: data is (H,W) for gray or (H,W,3) for RGB."""
    width: int
    height: int
    channels: int
    data: np.ndarray


def _as_raster(data: np.ndarray) -> RasterFile:
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise ImageFormatError("raster data must be uint8")
    if data.ndim == 2:
        ch = 1
    elif data.ndim == 3 and data.shape[2] == 3:
        ch = 3
    else:
        raise ImageFormatError(f"unsupported raster shape {data.shape}")
    return RasterFile(width=data.shape[1], height=data.shape[0], channels=ch, data=data)


# -- PGM / PPM ---------------------------------------------------------------------


def _read_pnm_token(blob: bytes, pos: int):
    while pos < len(blob):
        c = blob[pos:pos + 1]
        if c == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PNM header")
    return blob[start:pos], pos


def _decode_pnm(blob: bytes) -> RasterFile:
    magic = blob[:2]
    channels = 1 if magic == b"P5" else 3
    pos = 2
    values = []
    for _ in range(3):
        token, pos = _read_pnm_token(blob, pos)
        if not token.isdigit():
            raise ImageFormatError(f"bad PNM header token {token!r}")
        values.append(int(token))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive PNM dimensions")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PNM maxval {maxval} (need 255)")
    pos += 1  # single whitespace after maxval
    need = width * height * channels
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError("truncated PNM pixel data")
    data = np.frombuffer(raw, dtype=np.uint8)
    if channels == 1:
        return _as_raster(data.reshape(height, width).copy())
    return _as_raster(data.reshape(height, width, 3).copy())


def _encode_pnm(raster: RasterFile) -> bytes:
    magic = b"P5" if raster.channels == 1 else b"P6"
    header = magic + f"\n{raster.width} {raster.height}\n255\n".encode("ascii")
    return header + raster.data.tobytes()


# -- PNG ------------------------------------------------------------------------------


_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw: np.ndarray, height: int, stride: int, bpp: int) -> np.ndarray:
    """Undo per-scanline PNG filters; raw is (height, 1+stride) bytes."""
    out = np.zeros((height, stride), dtype=np.uint8)
    for y in range(height):
        ftype = int(raw[y, 0])
        line = raw[y, 1:].astype(np.int32)
        prev = out[y - 1].astype(np.int32) if y else np.zeros(stride, np.int32)
        if ftype == 0:
            rec = line
        elif ftype == 1:  # Sub: cumulative sum per channel offset
            rec = line.copy()
            for ch in range(bpp):
                rec[ch::bpp] = np.cumsum(rec[ch::bpp]) % 256
        elif ftype == 2:  # Up
            rec = (line + prev) % 256
        elif ftype == 3:  # Average
            rec = np.empty(stride, np.int32)
            for x in range(stride):
                left = rec[x - bpp] if x >= bpp else 0
                rec[x] = (line[x] + (left + prev[x]) // 2) % 256
        elif ftype == 4:  # Paeth
            rec = np.empty(stride, np.int32)
            for x in range(stride):
                left = rec[x - bpp] if x >= bpp else 0
                upleft = prev[x - bpp] if x >= bpp else 0
                rec[x] = (line[x] + _paeth(int(left), int(prev[x]), int(upleft))) % 256
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = rec.astype(np.uint8)
    return out


def _decode_png(blob: bytes) -> RasterFile:
    if blob[:8] != _PNG_SIG:
        raise ImageFormatError("bad PNG signature")
    pos = 8
    ihdr = None
    palette = None
    idat = []
    while pos + 8 <= len(blob):
        length, ctype = struct.unpack(">I4s", blob[pos:pos + 8])
        pos += 8
        if pos + length + 4 > len(blob):
            raise ImageFormatError("truncated PNG chunk")
        payload = blob[pos:pos + length]
        pos += length + 4  # skip the chunk CRC
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif ctype == b"PLTE":
            palette = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3)
        elif ctype == b"IDAT":
            idat.append(payload)
        elif ctype == b"IEND":
            break
    if ihdr is None or not idat:
        raise ImageFormatError("PNG missing IHDR or IDAT")
    width, height, depth, color, comp, filt, interlace = ihdr
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth}")
    if comp or filt or interlace:
        raise ImageFormatError("unsupported PNG compression/filter/interlace flags")
    channels = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}.get(color)
    if channels is None:
        raise ImageFormatError(f"unsupported PNG color type {color}")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG stream: {exc}") from None
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise ImageFormatError("PNG pixel data has wrong length")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(height, stride + 1)
    pixels = _unfilter(rows, height, stride, channels)
    if color == 0:
        data = pixels
    elif color == 2:
        data = pixels.reshape(height, width, 3)
    elif color == 3:
        if palette is None:
            raise ImageFormatError("palette PNG without PLTE")
        data = palette[pixels.reshape(height, width)]
    elif color == 4:
        data = pixels.reshape(height, width, 2)[:, :, 0]
    else:  # RGBA
        data = pixels.reshape(height, width, 4)[:, :, :3]
    return _as_raster(np.ascontiguousarray(data))


def _png_chunk(ctype: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(ctype + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + ctype + payload + struct.pack(">I", crc)


def _encode_png(raster: RasterFile) -> bytes:
    color = 0 if raster.channels == 1 else 2
    ihdr = struct.pack(">IIBBBBB", raster.width, raster.height, 8, color, 0, 0, 0)
    flat = raster.data.reshape(raster.height, -1)
    scanlines = b"".join(b"\x00" + flat[y].tobytes() for y in range(raster.height))
    return (_PNG_SIG + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(scanlines))
            + _png_chunk(b"IEND", b""))


# -- public io -----------------------------------------------------------------------


def load_image(path: str) -> RasterFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] == _PNG_SIG:
        return _decode_png(blob)
    if blob[:2] in (b"P5", b"P6"):
        return _decode_pnm(blob)
    raise ImageFormatError(f"{path}: not a PNG or binary PGM/PPM file")


def save_image(data, path: str) -> None:
    """Write uint8 raster data; format chosen by extension (atomic write)."""
    raster = data if isinstance(data, RasterFile) else _as_raster(data)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        blob = _encode_png(raster)
    elif ext in (".pgm", ".ppm"):
        if ext == ".pgm" and raster.channels != 1:
            raise ImageFormatError("PGM requires single-channel data")
        if ext == ".ppm" and raster.channels != 3:
            raise ImageFormatError("PPM requires 3-channel data")
        blob = _encode_pnm(raster)
    else:
        raise ImageFormatError(f"unsupported output extension {ext!r}")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def to_grayscale(raster: RasterFile) -> np.ndarray:
    """(H,W) float32 in [0,1]; RGB collapses through BT.601 luma."""
    if raster.channels == 1:
        return (raster.data.astype(np.float32) / 255.0)
    y = fuse.rgb_to_ycbcr(raster.data).y
    return (y / 255.0).astype(np.float32)


def to_u8(image: np.ndarray) -> np.ndarray:
    """[0,1] float image to uint8."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- resize / crop ----------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center coordinates."""
    h, w = image.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    img = image.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    y = (h - size) // 2
    x = (w - size) // 2
    return image[y:y + size, x:x + size]


def prepare_image(image: np.ndarray, size: int, mode: str, rng: SplitMix64 = None) -> np.ndarray:
    """Bring one grayscale image to size x size per the crop mode."""
    h, w = image.shape
    if mode == "resize" or h < size or w < size:
        return bilinear_resize(image, size, size)
    if mode == "center":
        return center_crop(image, size)
    if mode == "random":
        y = rng.randint(0, h - size)
        x = rng.randint(0, w - size)
        return image[y:y + size, x:x + size]
    raise ValueError(f"unknown crop mode {mode!r}")


def ingest_dataset(directory: str, image_size: int, seed: int,
                   epoch: int = None, mode: str = "center") -> list:
    """Normalized grayscale images from a directory, name-sorted.

    Undecodable files are skipped; an empty result raises DataError.  With
    ``epoch`` given, the list order is the seeded per-epoch shuffle used by
    training.  Random crops are drawn once per image from a per-index
    substream, so the pixel content is stable across epochs.
    """
    names = sorted(
        n for n in os.listdir(directory)
        if os.path.splitext(n)[1].lower() in (".png", ".pgm", ".ppm"))
    images = []
    for index, name in enumerate(names):
        try:
            raster = load_image(os.path.join(directory, name))
        except (OSError, ValueError):
            continue
        gray = to_grayscale(raster)
        rng = SplitMix64(derive(seed, STREAM_CROP, index))
        images.append(prepare_image(gray, image_size, mode, rng).astype(np.float32))
    if not images:
        raise DataError(f"no decodable images in {directory}")
    if epoch is not None:
        order = np.arange(len(images))
        SplitMix64(derive(seed, STREAM_DATA, epoch)).shuffle(order)
        images = [images[i] for i in order]
    return images
