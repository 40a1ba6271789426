"""Whitened hypergraph relation enhancement.

For each feature map (rows = grid nodes), the pipeline is: whiten the node
set to zero mean and identity covariance via a Cholesky factor of the
regularized sample covariance, score node/hyperedge affinities from the
whitened nodes, threshold the scores into a binary incidence matrix, and
run one hypergraph convolution with a residual connection.

The whitening is the collapse guard: without it, hyperedge columns tend to
select near-identical node subsets. `mean_column_jaccard` quantifies that.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import ops
from .sle import FeatureQuad
from .tensor import ContractError, Tensor


@dataclass
class WhiteningParams:
    gamma: Tensor            # (N, 1) per-node scale
    beta: Tensor             # (N, C) per-node offset
    eps_cov: float = 1e-5    # covariance regularizer, keeps Cholesky safe


@dataclass
class IncidenceParams:
    psi: Tensor              # (C, C') node projection
    lambda_diag: Tensor      # (C',) diagonal metric
    omega: Tensor            # (C, M) node-to-hyperedge contribution map
    edge_weights: Tensor     # (M,) hyperedge weights, used diagonally
    theta: Tensor            # (C, C) convolution weights
    eps_deg: float = 1e-6    # degree smoothing; degrees get inverted/rooted


@dataclass
class HslParams:
    whitening: WhiteningParams
    incidence: IncidenceParams


@dataclass
class IncidenceMatrix:
    h: Tensor             # (..., N, M), entries exactly 0/1
    node_degrees: Tensor  # (..., N) row sums + eps_deg
    edge_degrees: Tensor  # (..., M) column sums + eps_deg


@dataclass
class EnhancedQuad:
    long_vis: Tensor
    short_vis: Tensor
    long_ir: Tensor
    short_ir: Tensor

    def items(self):
        return [(("vis", "long"), self.long_vis), (("vis", "short"), self.short_vis),
                (("ir", "long"), self.long_ir), (("ir", "short"), self.short_ir)]


def whiten_nodes(f: Tensor, params: WhiteningParams) -> Tensor:
    """Zero-mean, identity-covariance transform of the node rows.

    Covariance uses the 1/(N-1) convention plus eps_cov on the diagonal;
    the inverse factor is applied by triangular solve, never formed.
    Output row n is gamma_n * whitened_n + beta_n.
    """
    n = f.shape[-2]
    if n < 2:
        raise ContractError(f"whitening needs at least 2 nodes, got {n}")
    mu = ops.mean(f, axis=-2, keepdims=True)
    centered = ops.sub(f, mu)
    cov = ops.mul(ops.matmul(ops.transpose(centered), centered), 1.0 / (n - 1))
    cov = ops.add(cov, Tensor(params.eps_cov * np.eye(f.shape[-1])))
    factor = ops.cholesky(cov)
    white = ops.transpose(ops.solve_lower_triangular(factor, ops.transpose(centered)))
    return ops.add(ops.mul(params.gamma, white), params.beta)


def learn_incidence(f_white: Tensor, params: IncidenceParams) -> IncidenceMatrix:
    """Binary incidence from thresholded cross-correlation scores.

    scores = (F Psi) diag(lambda) (F Psi)^T (F Omega), an (N, M) map whose
    hard sign pattern becomes H. The threshold's backward rule is the
    clipped straight-through estimator.
    """
    proj = ops.matmul(f_white, params.psi)
    metric = ops.mul(proj, params.lambda_diag)
    pairwise = ops.matmul(metric, ops.transpose(proj))
    scores = ops.matmul(pairwise, ops.matmul(f_white, params.omega))
    h = ops.step_straight_through(scores)
    node_deg = ops.add(ops.sum_(h, axis=-1), params.eps_deg)
    edge_deg = ops.add(ops.sum_(h, axis=-2), params.eps_deg)
    return IncidenceMatrix(h, node_deg, edge_deg)


def hypergraph_convolve(f: Tensor, f_white: Tensor, inc: IncidenceMatrix,
                        params: IncidenceParams) -> Tensor:
    """One hypergraph convolution with a residual to the raw feature.

    R = (I - D^{1/2} H W B^{-1} H^T D^{-1/2}) F' Theta + F, with D and B the
    smoothed node/edge degree diagonals.
    """
    n = f.shape[-2]
    w_over_b = ops.div(params.edge_weights, inc.edge_degrees)
    lead = w_over_b.shape[:-1]
    weighted = ops.mul(inc.h, ops.reshape(w_over_b, lead + (1, w_over_b.shape[-1])))
    pair = ops.matmul(weighted, ops.transpose(inc.h))
    d_lead = inc.node_degrees.shape[:-1]
    row = ops.reshape(ops.power(inc.node_degrees, 0.5), d_lead + (n, 1))
    col = ops.reshape(ops.power(inc.node_degrees, -0.5), d_lead + (1, n))
    propagator = ops.mul(ops.mul(row, pair), col)
    operator = ops.sub(Tensor(np.eye(n)), propagator)
    return ops.add(ops.matmul(ops.matmul(operator, f_white), params.theta), f)


def enhance_quad(quad: FeatureQuad, params: HslParams,
                 whitening: bool = True) -> tuple[EnhancedQuad, list[IncidenceMatrix]]:
    """Whiten, build incidence, and convolve each of the four features.

    One shared parameter set serves all four. `whitening=False` substitutes
    the identity (raw features feed the incidence scoring), the collapse
    ablation.
    """
    outputs, incidences = [], []
    for _, f in quad.items():
        f_white = whiten_nodes(f, params.whitening) if whitening else f
        inc = learn_incidence(f_white, params.incidence)
        outputs.append(hypergraph_convolve(f, f_white, inc, params.incidence))
        incidences.append(inc)
    return EnhancedQuad(*outputs), incidences


def mean_column_jaccard(h: np.ndarray) -> float:
    """Mean pairwise Jaccard similarity among distinct hyperedge columns.

    High values mean many hyperedges select the same node subset (collapse).
    Two all-zero columns count as identical (similarity 1). Accepts (N, M)
    or a stack (..., N, M), averaging over the stack.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    flat = h.reshape(-1, h.shape[-2], h.shape[-1])
    m = flat.shape[-1]
    if m < 2:
        raise ContractError("need at least two hyperedge columns")
    sims = []
    for mat in flat:
        cols = mat.T.astype(bool)
        for a, b in combinations(range(m), 2):
            inter = np.sum(cols[a] & cols[b])
            union = np.sum(cols[a] | cols[b])
            sims.append(1.0 if union == 0 else inter / union)
    return float(np.mean(sims))
