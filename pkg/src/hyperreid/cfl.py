"""Graph-attention alignment, middle-feature synthesis, and pooling.

A middle feature aligns one relation-enhanced feature (the query) against
the other three (across modality and range) with pruned graph attention,
plus a residual. Middle features exist only for training; retrieval uses
the enhanced features alone. Pooling concatenates a holistic generalized
mean with per-stripe generalized means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .hsl import EnhancedQuad
from .tensor import ContractError, Tensor


@dataclass
class GatParams:
    theta_q: Tensor             # (C, C)
    theta_k: Tensor             # (C, C)
    theta_v: Tensor             # (C, C)
    lambda_thresh: float = 1.3  # prunes below-average attention entries


@dataclass
class MiddleQuad:
    long_vis: Tensor
    short_vis: Tensor
    long_ir: Tensor
    short_ir: Tensor

    def items(self):
        return [(("vis", "long"), self.long_vis), (("vis", "short"), self.short_vis),
                (("ir", "long"), self.long_ir), (("ir", "short"), self.short_ir)]


def gat_align(query: Tensor, key_value: Tensor, params: GatParams) -> Tensor:
    """Aggregate key_value rows onto query rows by pruned attention.

    P = softmax_rows((query theta_q)(key_value theta_k)^T); entries below
    lambda times the global mean of P are zeroed before aggregating the
    projected values. Rows of P each sum to 1, so the global mean is 1/N
    and lambda > 1 prunes uniform (uninformative) attention entirely.
    """
    if query.shape != key_value.shape:
        raise ContractError(f"gat_align shapes differ: {query.shape} vs {key_value.shape}")
    q = ops.matmul(query, params.theta_q)
    k = ops.matmul(key_value, params.theta_k)
    v = ops.matmul(key_value, params.theta_v)
    p = ops.softmax_rows(ops.matmul(q, ops.transpose(k)))
    mean_axes = (-2, -1)
    global_mean = ops.mean(p, axis=mean_axes, keepdims=True)
    pruned = ops.relu(ops.sub(p, ops.mul(global_mean, params.lambda_thresh)))
    return ops.matmul(pruned, v)


def build_middle(r: EnhancedQuad, params: GatParams, fusion: str = "gat",
                 concat_proj: Optional[Tensor] = None) -> MiddleQuad:
    """Synthesize the four middle features by role rotation.

    Each feature plays query once, aligned against the remaining three;
    the query itself is the residual. `fusion` selects the comparison
    baselines: "add" sums the other three features, "concat" projects
    their channel concatenation back to C.
    """
    entries = r.items()
    outputs = []
    for i, (_, query) in enumerate(entries):
        others = [f for j, (_, f) in enumerate(entries) if j != i]
        if fusion == "gat":
            fused = ops.add(ops.add(gat_align(query, others[0], params),
                                    gat_align(query, others[1], params)),
                            gat_align(query, others[2], params))
        elif fusion == "add":
            fused = ops.add(ops.add(others[0], others[1]), others[2])
        elif fusion == "concat":
            if concat_proj is None:
                raise ContractError("concat fusion needs a projection matrix")
            fused = ops.matmul(ops.concat(others, axis=-1), concat_proj)
        else:
            raise ContractError(f"unknown fusion mode {fusion!r}")
        outputs.append(ops.add(fused, query))
    return MiddleQuad(*outputs)


def _gem(x: Tensor, p_gem: float) -> Tensor:
    """Generalized mean over the node axis, per channel."""
    clamped = ops.clamp_min(x, 1e-6)
    return ops.power(ops.mean(ops.power(clamped, p_gem), axis=-2), 1.0 / p_gem)


def pool(feature: Tensor, n_parts: int = 2, p_gem: float = 3.0) -> Tensor:
    """Holistic + per-stripe generalized mean pooling, concatenated.

    Rows are grid row-major, so stripes are horizontal bands. Output length
    is (1 + n_parts) * C.
    """
    n = feature.shape[-2]
    if n % n_parts != 0:
        raise ContractError(f"{n} nodes not divisible into {n_parts} stripes")
    stripe = n // n_parts
    pieces = [_gem(feature, p_gem)]
    for i in range(n_parts):
        pieces.append(_gem(ops.slice_axis(feature, -2, i * stripe, (i + 1) * stripe), p_gem))
    return ops.concat(pieces, axis=-1)


def pooled_descriptor(feature: Tensor, n_parts: int = 2, p_gem: float = 3.0) -> Tensor:
    """Pooled vector, mean-centered then L2-normalized.

    Rectified generalized means put a large common positive pedestal into
    every pooled vector; subtracting each vector's own mean removes the
    pedestal's dominant (all-ones) component so cosines actually spread.
    """
    raw = pool(feature, n_parts, p_gem)
    return ops.l2_normalize_rows(ops.sub(raw, ops.mean(raw, axis=-1, keepdims=True)))
