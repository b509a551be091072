"""Encoder-decoder fusion network.

The encoder runs two parallel feature extractors over a grayscale image: a
CNN branch (three ConvBlocks) for local features and a transformer branch
(patchify -> linear embed -> L pre-norm transformer layers -> token
projection -> nearest-neighbor upsample back to pixel resolution) for global
dependencies.  Their channel-concatenated output passes through two
enhancement ConvBlocks.  The decoder is two ConvBlocks plus a 1x1 head with
a sigmoid, so reconstructions always lie in (0,1).

Checkpoint format (little-endian):

    magic   b"TMEF"
    u32     format version (currently 1)
    u32 x7  image_size, patch_size, embed_dim, n_layers, n_heads,
            cnn_channels, enhance_channels
    u8      use_transformer
    u64     seed
    u32     tensor count, then per tensor:
              u32 name length, name bytes (utf-8),
              u32 rank, u32 x rank extents,
              float32 payload (row-major)
    u32     CRC32 of all preceding bytes
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ShapeError, conv2d, sigmoid, concat, reshape, transpose, upsample_nearest, matmul
from .layers import (
    ConvBlockParams, PatchEmbedParams, TransformerLayerParams,
    conv_block, init_conv_block, init_patch_embed, init_transformer_layer,
    kaiming_uniform, zeros_param, patchify, patch_embed, transformer_layer,
)
from .rng import SplitMix64, derive, STREAM_WEIGHTS

CHECKPOINT_MAGIC = b"TMEF"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Checkpoint file is malformed, corrupt, or inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    cnn_channels: int = 16
    enhance_channels: int = 64
    use_transformer: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed dim {self.embed_dim} must be divisible by {self.n_heads} heads")


class TransMEF:
    """The encoder-decoder network with named parameters."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = SplitMix64(derive(config.seed, STREAM_WEIGHTS))
        c = config.cnn_channels
        d = config.embed_dim
        e = config.enhance_channels

        self.cnn_blocks = [
            init_conv_block(rng, 1, c, c),
            init_conv_block(rng, c, c, c),
            init_conv_block(rng, c, c, c),
        ]
        if config.use_transformer:
            self.patch_embed_params = init_patch_embed(rng, config.patch_size, d)
            self.transformer_layers = [
                init_transformer_layer(rng, d, config.n_heads)
                for _ in range(config.n_layers)
            ]
            self.token_proj_w = kaiming_uniform(rng, (d, d), fan_in=d)
            self.token_proj_b = zeros_param((d,))
            fused_channels = c + d
        else:
            self.patch_embed_params = None
            self.transformer_layers = []
            self.token_proj_w = None
            self.token_proj_b = None
            fused_channels = c
        self.enhance_blocks = [
            init_conv_block(rng, fused_channels, e, e),
            init_conv_block(rng, e, e, e),
        ]
        self.decoder_blocks = [
            init_conv_block(rng, e, e, e),
            init_conv_block(rng, e, e, e),
        ]
        self.head_w = kaiming_uniform(rng, (1, e, 1, 1), fan_in=e)
        self.head_b = zeros_param((1,))

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> dict:
        """Insertion-ordered name -> Tensor map of all trainable leaves."""
        params = {}
        for i, block in enumerate(self.cnn_blocks, 1):
            params.update(block.named(f"cnn.block{i}"))
        if self.config.use_transformer:
            params.update(self.patch_embed_params.named("patch_embed"))
            for i, layer in enumerate(self.transformer_layers):
                params.update(layer.named(f"transformer.layer{i}"))
            params["token_proj.w"] = self.token_proj_w
            params["token_proj.b"] = self.token_proj_b
        for i, block in enumerate(self.enhance_blocks, 1):
            params.update(block.named(f"enhance.block{i}"))
        for i, block in enumerate(self.decoder_blocks, 1):
            params.update(block.named(f"decoder.block{i}"))
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def zero_grads(self):
        for p in self.parameters().values():
            p.grad = None

    def cast(self, dtype):
        """In-place dtype cast of all parameters (float64 for grad oracles)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    # -- forward pieces --------------------------------------------------------

    def cnn_branch(self, image: Tensor) -> Tensor:
        h = image
        for block in self.cnn_blocks:
            h = conv_block(h, block)
        return h

    def transformer_branch(self, image: Tensor) -> Tensor:
        cfg = self.config
        _, h, w = image.data.shape
        p = cfg.patch_size
        seq = patchify(image, p)
        z = patch_embed(seq, self.patch_embed_params)
        for layer in self.transformer_layers:
            z = transformer_layer(z, layer)
        z = matmul(z, self.token_proj_w) + self.token_proj_b
        grid = transpose(reshape(z, (h // p, w // p, cfg.embed_dim)), (2, 0, 1))
        return upsample_nearest(grid, p)

    def encode(self, image: Tensor) -> Tensor:
        if image.data.ndim != 3 or image.data.shape[0] != 1:
            raise ShapeError("encode expects a [1,H,W] tensor")
        lo, hi = float(image.data.min()), float(image.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"encode input must be normalized to [0,1], got [{lo}, {hi}]")
        features = self.cnn_branch(image)
        if self.config.use_transformer:
            features = concat([features, self.transformer_branch(image)], axis=0)
        for block in self.enhance_blocks:
            features = conv_block(features, block)
        return features

    def decode(self, features: Tensor) -> Tensor:
        if features.data.shape[0] != self.config.enhance_channels:
            raise ShapeError(
                f"decode expects {self.config.enhance_channels} channels, "
                f"got {features.data.shape[0]}")
        h = features
        for block in self.decoder_blocks:
            h = conv_block(h, block)
        return sigmoid(conv2d(h, self.head_w, self.head_b, padding=0))

    def forward(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))

    __call__ = forward


# -- checkpoint io -----------------------------------------------------------------


def _pack_config(cfg: ModelConfig) -> bytes:
    return struct.pack(
        "<7IBQ", cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.n_layers,
        cfg.n_heads, cfg.cnn_channels, cfg.enhance_channels,
        1 if cfg.use_transformer else 0, cfg.seed & 0xFFFFFFFFFFFFFFFF)


def save_weights(model: TransMEF, path: str) -> None:
    """Write the checkpoint atomically (temp file + rename)."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             _pack_config(model.config)]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path: str) -> TransMEF:
    """Rebuild a model from a checkpoint; no partial state on failure."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fields = struct.unpack("<7IBQ", r.take(7 * 4 + 1 + 8))
    cfg = ModelConfig(
        image_size=fields[0], patch_size=fields[1], embed_dim=fields[2],
        n_layers=fields[3], n_heads=fields[4], cnn_channels=fields[5],
        enhance_channels=fields[6], use_transformer=bool(fields[7]),
        seed=fields[8])
    model = TransMEF(cfg)
    params = model.parameters()
    n = r.u32()
    if n != len(params):
        raise CheckpointError(
            f"checkpoint holds {n} tensors, model expects {len(params)}")
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name not in params:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        if params[name].data.shape != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(shape)}, "
                f"model expects {params[name].data.shape}")
        params[name].data = payload.astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return model
