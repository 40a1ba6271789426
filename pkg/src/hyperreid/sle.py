"""Two-stream stem and the short/long-range extraction branches.

The stem is a modality-specific stride-2 convolution block followed by a
shared block, standing in for a pretrained backbone at desk scale. The
short-range branch stacks 3x3 convolution blocks; the long-range branch
runs multi-head self-attention blocks over the flattened token grid. Both
branches share parameters across modalities, so swapping the modality
inputs swaps the outputs exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ContractError, Tensor


@dataclass
class StemParams:
    w1_vis: Tensor
    b1_vis: Tensor
    w1_ir: Tensor
    b1_ir: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ConvBranchParams:
    weights: list
    biases: list


@dataclass
class TransformerBlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class TransformerBranchParams:
    blocks: list
    pos: Tensor  # constant sinusoidal encoding, (N, C)
    heads: int


@dataclass
class SleParams:
    stem: StemParams
    conv: ConvBranchParams
    transformer: TransformerBranchParams
    grid_h: int
    grid_w: int
    channels: int


@dataclass
class FeatureQuad:
    """Per-pair feature maps flattened to (B, N, C), N = grid_h * grid_w."""

    long_vis: Tensor
    short_vis: Tensor
    long_ir: Tensor
    short_ir: Tensor

    def items(self):
        return [(("vis", "long"), self.long_vis), (("vis", "short"), self.short_vis),
                (("ir", "long"), self.long_ir), (("ir", "short"), self.short_ir)]


def sinusoidal_positions(n: int, c: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(c)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / c)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def instance_standardize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-sample zero-mean/unit-variance over all non-batch axes.

    Removes the input-independent pedestal that rectified activations put
    into every feature map; without it, pooled descriptors of different
    images are nearly parallel and cosine training collapses. Deterministic
    and batch-independent (statistics are per sample), so train and eval
    see the same transform.
    """
    axes = tuple(range(1, x.ndim))
    mu = ops.mean(x, axis=axes, keepdims=True)
    centered = ops.sub(x, mu)
    var = ops.mean(ops.mul(centered, centered), axis=axes, keepdims=True)
    return ops.mul(centered, ops.power(ops.add(var, eps), -0.5))


def stem_forward(params: StemParams, images, modality: str) -> Tensor:
    """Modality-selected first block then the shared block, NHWC in/out."""
    if modality == "vis":
        w1, b1 = params.w1_vis, params.b1_vis
    elif modality == "ir":
        w1, b1 = params.w1_ir, params.b1_ir
    else:
        raise ContractError(f"unknown modality tag {modality!r}")
    x = ops.relu(ops.conv2d(images, w1, b1, 3, 3, stride=2, pad=1))
    x = ops.relu(ops.conv2d(x, params.w2, params.b2, 3, 3, stride=1, pad=1))
    return instance_standardize(x)


def conv_branch(params: ConvBranchParams, fmap: Tensor) -> Tensor:
    x = fmap
    for w, b in zip(params.weights, params.biases):
        x = ops.relu(ops.conv2d(x, w, b, 3, 3, stride=1, pad=1))
    # Keeps branch outputs O(1) across training so the downstream whitening
    # covariance stays well-conditioned at the high-lr phase.
    return instance_standardize(x)


def _attention(block: TransformerBlockParams, x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    d = c // heads
    q = ops.matmul(x, block.wq)
    k = ops.matmul(x, block.wk)
    v = ops.matmul(x, block.wv)
    def split(t):  # (B, N, C) -> (B, heads, N, d)
        return ops.transpose(ops.reshape(t, (b, n, heads, d)), (0, 2, 1, 3))
    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh)), 1.0 / np.sqrt(d))
    attn = ops.softmax_rows(scores)
    ctx = ops.matmul(attn, vh)
    merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
    return ops.matmul(merged, block.wo)


def transformer_branch(params: TransformerBranchParams, tokens: Tensor) -> Tensor:
    x = ops.add(tokens, params.pos)
    for block in params.blocks:
        x = ops.add(x, _attention(block, x, params.heads))
        hidden = ops.relu(ops.add(ops.matmul(x, block.w1), block.b1))
        x = ops.add(x, ops.add(ops.matmul(hidden, block.w2), block.b2))
    return instance_standardize(x)


def extract_quad(params: SleParams, b_vis: Tensor, b_ir: Tensor) -> FeatureQuad:
    """Run both branches on both modality maps, flattening to (B, N, C)."""
    if b_vis.shape != b_ir.shape:
        raise ContractError(f"stem outputs differ: {b_vis.shape} vs {b_ir.shape}")
    bsz = b_vis.shape[0]
    n = params.grid_h * params.grid_w
    c = params.channels
    vis_tokens = ops.reshape(b_vis, (bsz, n, c))
    ir_tokens = ops.reshape(b_ir, (bsz, n, c))
    short_vis = ops.reshape(conv_branch(params.conv, b_vis), (bsz, n, c))
    short_ir = ops.reshape(conv_branch(params.conv, b_ir), (bsz, n, c))
    long_vis = transformer_branch(params.transformer, vis_tokens)
    long_ir = transformer_branch(params.transformer, ir_tokens)
    return FeatureQuad(long_vis, short_vis, long_ir, short_ir)
