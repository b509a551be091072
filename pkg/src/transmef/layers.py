"""Neural building blocks: ConvBlock, patch embedding, transformer layer.

A ConvBlock is conv3x3 -> ReLU -> conv3x3 (padding 1 throughout, so spatial
extent is preserved).  The transformer layer is pre-norm: LN -> multi-head
attention -> residual, then LN -> MLP (linear -> GELU -> linear) -> residual.
Attention and MLP projections carry no bias terms; with all projection
weights zero the layer is exactly the identity.  No positional embedding is
added, so the layer is token-permutation-equivariant (the CNN branch of the
encoder supplies spatial information).
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor, ShapeError, conv2d, relu, gelu, matmul, softmax, reshape,
    transpose, sqrt, mean,
)
from .rng import SplitMix64

LN_EPS = 1e-5


def kaiming_uniform(rng: SplitMix64, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) leaf parameter."""
    bound = math.sqrt(6.0 / fan_in)
    n = int(np.prod(shape))
    vals = rng.uniform_block(n, -bound, bound).astype(dtype)
    return Tensor(vals.reshape(shape), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# -- ConvBlock -----------------------------------------------------------------


@dataclass
class ConvBlockParams:
    w1: Tensor  # (c_mid, c_in, 3, 3)
    b1: Tensor
    w2: Tensor  # (c_out, c_mid, 3, 3)
    b2: Tensor

    def named(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def init_conv_block(rng: SplitMix64, c_in: int, c_mid: int, c_out: int) -> ConvBlockParams:
    return ConvBlockParams(
        w1=kaiming_uniform(rng, (c_mid, c_in, 3, 3), fan_in=c_in * 9),
        b1=zeros_param((c_mid,)),
        w2=kaiming_uniform(rng, (c_out, c_mid, 3, 3), fan_in=c_mid * 9),
        b2=zeros_param((c_out,)),
    )


def conv_block(x: Tensor, params: ConvBlockParams) -> Tensor:
    h = conv2d(x, params.w1, params.b1, padding=1)
    h = relu(h)
    return conv2d(h, params.w2, params.b2, padding=1)


# -- patch sequence ------------------------------------------------------------


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """[1,H,W] -> [M, P*P] with M = H*W/P^2.

    Row k is the k-th patch in row-major patch order, itself flattened
    row-major.  Exact inverse of ``unpatchify``.
    """
    p = int(patch_size)
    if image.data.ndim != 3 or image.data.shape[0] != 1:
        raise ShapeError("patchify expects a [1,H,W] tensor")
    _, h, w = image.data.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} must divide image extent {h}x{w}")
    hp, wp = h // p, w // p
    x = reshape(image, (hp, p, wp, p))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (hp * wp, p * p))


def unpatchify(seq: Tensor, h: int, w: int, patch_size: int) -> Tensor:
    """Inverse of patchify: [M, P*P] -> [1,H,W]."""
    p = int(patch_size)
    hp, wp = h // p, w // p
    x = reshape(seq, (hp, wp, p, p))
    x = transpose(x, (0, 2, 1, 3))
    return reshape(x, (1, h, w))


@dataclass
class PatchEmbedParams:
    e: Tensor  # (P*P, D)
    b: Tensor  # (D,)
    patch_size: int

    def named(self, prefix):
        yield f"{prefix}.e", self.e
        yield f"{prefix}.b", self.b


def init_patch_embed(rng: SplitMix64, patch_size: int, dim: int) -> PatchEmbedParams:
    p2 = patch_size * patch_size
    return PatchEmbedParams(
        e=kaiming_uniform(rng, (p2, dim), fan_in=p2),
        b=zeros_param((dim,)),
        patch_size=patch_size,
    )


def patch_embed(seq: Tensor, params: PatchEmbedParams) -> Tensor:
    if seq.data.shape[-1] != params.e.data.shape[0]:
        raise ShapeError(
            f"patch_embed expects {params.e.data.shape[0]} columns, got {seq.data.shape[-1]}")
    return matmul(seq, params.e) + params.b


# -- layer norm ------------------------------------------------------------------


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * scale + shift


# -- transformer layer -------------------------------------------------------------


@dataclass
class TransformerLayerParams:
    ln1_scale: Tensor
    ln1_shift: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    mlp_w1: Tensor  # (D, D_mlp)
    mlp_w2: Tensor  # (D_mlp, D)
    n_heads: int

    def named(self, prefix):
        for field in ("ln1_scale", "ln1_shift", "wq", "wk", "wv", "wo",
                      "ln2_scale", "ln2_shift", "mlp_w1", "mlp_w2"):
            yield f"{prefix}.{field}", getattr(self, field)


def init_transformer_layer(rng: SplitMix64, dim: int, n_heads: int,
                           mlp_ratio: int = 4) -> TransformerLayerParams:
    if dim % n_heads:
        raise ShapeError(f"embed dim {dim} not divisible by {n_heads} heads")
    d_mlp = dim * mlp_ratio
    return TransformerLayerParams(
        ln1_scale=ones_param((dim,)),
        ln1_shift=zeros_param((dim,)),
        wq=kaiming_uniform(rng, (dim, dim), fan_in=dim),
        wk=kaiming_uniform(rng, (dim, dim), fan_in=dim),
        wv=kaiming_uniform(rng, (dim, dim), fan_in=dim),
        wo=kaiming_uniform(rng, (dim, dim), fan_in=dim),
        ln2_scale=ones_param((dim,)),
        ln2_shift=zeros_param((dim,)),
        mlp_w1=kaiming_uniform(rng, (dim, d_mlp), fan_in=dim),
        mlp_w2=kaiming_uniform(rng, (d_mlp, dim), fan_in=d_mlp),
        n_heads=n_heads,
    )


def multi_head_attention(z: Tensor, params: TransformerLayerParams,
                         return_weights: bool = False):
    """Self-attention over tokens [M,D], h heads, 1/sqrt(D/h) scaling."""
    m, d = z.data.shape
    h = params.n_heads
    dh = d // h
    q = matmul(z, params.wq)
    k = matmul(z, params.wk)
    v = matmul(z, params.wv)

    def split_heads(t):
        return transpose(reshape(t, (m, h, dh)), (1, 0, 2))  # (h, M, dh)

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)                                    # (h, M, dh)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (m, d))
    out = matmul(ctx, params.wo)
    if return_weights:
        return out, attn
    return out


def transformer_layer(z: Tensor, params: TransformerLayerParams) -> Tensor:
    if z.data.shape[-1] != params.wq.data.shape[0]:
        raise ShapeError("token dim does not match layer params")
    z1 = z + multi_head_attention(
        layer_norm(z, params.ln1_scale, params.ln1_shift), params)
    hidden = layer_norm(z1, params.ln2_scale, params.ln2_shift)
    mlp = matmul(gelu(matmul(hidden, params.mlp_w1)), params.mlp_w2)
    return z1 + mlp
