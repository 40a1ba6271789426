"""Identity centers, the modality-range identity-center (MRIC) contrastive
loss family, classifier cross-entropy, batch-hard triplet, and the joint
objective.

Center sets are built per batch, identity-major (K consecutive rows per
identity). The MRIC pair loss is a bidirectional cross-entropy on the
center-to-center cosine similarity matrix plus an L1 pull between matched
centers; both terms consume the L2-normalized centers, so the loss is
invariant to positive rescaling of any center.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from . import ops
from .tensor import ContractError, Tensor


@dataclass
class ClassifierParams:
    weight: Tensor  # (num_train_identities, feature_length)
    bias: Tensor    # (num_train_identities,)


@dataclass
class LossBreakdown:
    ce: Tensor
    tri: Tensor
    mric_sl: Tensor
    mric_mid: Tensor
    mric_vim: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "tri": self.tri.item(),
                "mric_sl": self.mric_sl.item(), "mric_mid": self.mric_mid.item(),
                "mric_vim": self.mric_vim.item(), "total": self.total.item()}


def identity_center(features: Tensor) -> Tensor:
    """Self-similarity softmax-weighted average of one identity's features.

    Weight j is softmax over j of sum_k <f_j, f_k>; the center is the
    weighted sum, so it always lies in the inputs' convex hull.
    """
    if features.ndim != 2 or features.shape[0] < 1:
        raise ContractError(f"identity_center needs (K, C) with K >= 1, got {features.shape}")
    sims = ops.sum_(ops.matmul(features, ops.transpose(features)), axis=-1)
    weights = ops.softmax_rows(sims)
    k, c = features.shape
    return ops.reshape(ops.matmul(ops.reshape(weights, (1, k)), features), (c,))


def grouped(features: Tensor, k: int) -> Tensor:
    """(P*K, C) identity-major rows -> (P, K, C)."""
    pk, c = features.shape
    if pk % k != 0:
        raise ContractError(f"{pk} rows do not group into blocks of {k}")
    return ops.reshape(features, (pk // k, k, c))


def weighted_centers(features: Tensor, k: int) -> Tensor:
    """Batched identity_center over all identities: (P*K, C) -> (P, C)."""
    g = grouped(features, k)
    p, _, c = g.shape
    sims = ops.sum_(ops.matmul(g, ops.transpose(g)), axis=-1)
    weights = ops.softmax_rows(sims)
    return ops.reshape(ops.matmul(ops.reshape(weights, (p, 1, k)), g), (p, c))


def mean_centers(feature_sets: list[Tensor], k: int) -> Tensor:
    """Plain per-identity average over one or more (P*K, C) feature sets."""
    stacked = ops.concat([grouped(f, k) for f in feature_sets], axis=1)
    return ops.mean(stacked, axis=1)


def mric_pair(a: Tensor, b: Tensor) -> Tensor:
    """Contrastive pull between two equally-ordered center sets.

    Bidirectional mean cross-entropy on the cosine similarity matrix with
    diagonal labels, plus the mean L1 distance between matched normalized
    centers.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"mric_pair needs matching (P, C) sets, got {a.shape} vs {b.shape}")
    p = a.shape[0]
    an = ops.l2_normalize_rows(a)
    bn = ops.l2_normalize_rows(b)
    sim = ops.matmul(an, ops.transpose(bn))
    labels = np.arange(p)
    forward_ce = ops.cross_entropy_rows(sim, labels)
    backward_ce = ops.cross_entropy_rows(ops.transpose(sim), labels)
    pull = ops.mean(ops.l1_distance(an, bn))
    return ops.add(ops.add(forward_ce, backward_ce), pull)


def mric_sl(centers: dict) -> Tensor:
    """Intra-range term: VIS vs IR centers at each range."""
    for key in (("vis", "short"), ("ir", "short"), ("vis", "long"), ("ir", "long")):
        if key not in centers:
            raise ContractError(f"missing center set {key}")
    return ops.add(mric_pair(centers[("vis", "short")], centers[("ir", "short")]),
                   mric_pair(centers[("vis", "long")], centers[("ir", "long")]))


def mric_mid(middle_centers: dict) -> Tensor:
    """Middle-feature term: all six unordered pairs among the four sets."""
    keys = [("vis", "short"), ("vis", "long"), ("ir", "short"), ("ir", "long")]
    for key in keys:
        if key not in middle_centers:
            raise ContractError(f"missing middle center set {key}")
    total = None
    for ka, kb in combinations(keys, 2):
        term = mric_pair(middle_centers[ka], middle_centers[kb])
        total = term if total is None else ops.add(total, term)
    return total


def mric_vim(pooled: dict, middles: Optional[dict], k: int) -> Tensor:
    """Inter-modality term on modality-aggregate plain-average centers.

    VIS/IR aggregates average both ranges of pooled enhanced features per
    identity; the middle aggregate averages all four middle sets. Without
    middles only the VIS/IR pair remains.
    """
    c_vis = mean_centers([pooled[("vis", "long")], pooled[("vis", "short")]], k)
    c_ir = mean_centers([pooled[("ir", "long")], pooled[("ir", "short")]], k)
    total = mric_pair(c_vis, c_ir)
    if middles is not None:
        c_mid = mean_centers([middles[key] for key in
                              (("vis", "long"), ("vis", "short"),
                               ("ir", "long"), ("ir", "short"))], k)
        total = ops.add(total, ops.add(mric_pair(c_vis, c_mid), mric_pair(c_ir, c_mid)))
    return total


def mric_total(pooled: dict, middles: Optional[dict], k: int,
               use_sl: bool = True, use_mid: bool = True,
               use_vim: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """(sl, mid, vim) components; disabled or unavailable terms are zero."""
    zero = Tensor(0.0)
    sl = zero
    if use_sl:
        sl = mric_sl({key: weighted_centers(f, k) for key, f in pooled.items()})
    mid = zero
    if use_mid and middles is not None:
        mid = mric_mid({key: weighted_centers(f, k) for key, f in middles.items()})
    vim = mric_vim(pooled, middles, k) if use_vim else zero
    return sl, mid, vim


def ce_loss(features: Tensor, labels: np.ndarray, classifier: ClassifierParams) -> Tensor:
    """Mean softmax cross-entropy of classifier logits against identities."""
    logits = ops.add(ops.matmul(features, ops.transpose(classifier.weight)),
                     classifier.bias)
    return ops.cross_entropy_rows(logits, labels)


def triplet_loss(features: Tensor, labels: np.ndarray,
                 margin: float = 0.3) -> tuple[Tensor, int]:
    """Batch-hard triplet on L2-normalized features.

    Per anchor: hardest positive distance minus hardest negative distance
    plus margin, hinged at zero, averaged over anchors that have both a
    positive and a negative. Returns (loss, number of valid anchors);
    zero valid anchors yields a zero loss, the caller's warning condition.
    """
    labels = np.asarray(labels)
    n = features.shape[0]
    x = ops.l2_normalize_rows(features)
    sq = ops.sum_(ops.mul(x, x), axis=-1)
    dots = ops.matmul(x, ops.transpose(x))
    d2 = ops.sub(ops.add(ops.reshape(sq, (n, 1)), ops.reshape(sq, (1, n))),
                 ops.mul(dots, 2.0))
    dist = ops.power(ops.clamp_min(d2, 1e-12), 0.5)

    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(0.0), 0

    pos_idx = np.where(pos_mask, dist.data, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist.data, np.inf).argmin(axis=1)
    sel_pos = Tensor(np.eye(n)[pos_idx])
    sel_neg = Tensor(np.eye(n)[neg_idx])
    d_pos = ops.sum_(ops.mul(dist, sel_pos), axis=-1)
    d_neg = ops.sum_(ops.mul(dist, sel_neg), axis=-1)
    hinge = ops.relu(ops.add(ops.sub(d_pos, d_neg), margin))
    loss = ops.mul(ops.sum_(ops.mul(hinge, Tensor(valid.astype(np.float64)))),
                   1.0 / n_valid)
    return loss, n_valid


def joint_loss(pooled: dict, middles: Optional[dict], inference_features: Tensor,
               inference_labels: np.ndarray, classifier: ClassifierParams, k: int,
               use_mric: bool = True, use_sl: bool = True, use_mid: bool = True,
               use_vim: bool = True, margin: float = 0.3) -> LossBreakdown:
    """Joint objective: cross-entropy + triplet + the MRIC components."""
    ce = ce_loss(inference_features, inference_labels, classifier)
    tri, _ = triplet_loss(inference_features, inference_labels, margin)
    if use_mric:
        sl, mid, vim = mric_total(pooled, middles, k, use_sl, use_mid, use_vim)
    else:
        sl, mid, vim = Tensor(0.0), Tensor(0.0), Tensor(0.0)
    total = ops.add(ops.add(ce, tri), ops.add(ops.add(sl, mid), vim))
    return LossBreakdown(ce, tri, sl, mid, vim, total)
