"""Cross-modality retrieval metrics: CMC, mAP, similarity statistics.

Ranking uses cosine distance on the unit-norm deployed features, with ties
broken by gallery index (stable sort). A query whose identity never occurs
in the gallery is excluded and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SyntheticSample, stack_samples
from .model import Network
from .tensor import ContractError


@dataclass
class MetricsReport:
    ranks: list[int]
    cmc: np.ndarray          # Rank-k accuracy per requested k
    map: float
    mean_intra_similarity: float  # same identity, cross-modal
    mean_inter_similarity: float  # different identity, cross-modal
    num_query: int
    num_gallery: int
    num_excluded_queries: int

    def as_dict(self) -> dict:
        return {"ranks": list(self.ranks), "cmc": [float(v) for v in self.cmc],
                "map": float(self.map),
                "mean_intra_similarity": float(self.mean_intra_similarity),
                "mean_inter_similarity": float(self.mean_inter_similarity),
                "num_query": self.num_query, "num_gallery": self.num_gallery,
                "num_excluded_queries": self.num_excluded_queries}


def extract_inference_features(net: Network, samples: list[SyntheticSample]):
    """Deployed features for a sample list: (features, ids, modality codes)."""
    images, ids, mods = stack_samples(samples)
    feats = np.zeros((len(samples), net.feature_length))
    for code, modality in ((0, "vis"), (1, "ir")):
        idx = np.where(mods == code)[0]
        if idx.size:
            feats[idx] = net.encode(images[idx], modality).data
    return feats, ids, mods


def _ranking(query_feats, gallery_feats) -> np.ndarray:
    """Gallery order per query by ascending cosine distance, stable ties."""
    qn = query_feats / np.maximum(np.linalg.norm(query_feats, axis=1, keepdims=True), 1e-12)
    gn = gallery_feats / np.maximum(np.linalg.norm(gallery_feats, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - qn @ gn.T
    return np.argsort(dist, axis=1, kind="stable")


def cmc(query_feats, query_ids, gallery_feats, gallery_ids,
        ks: list[int]) -> tuple[np.ndarray, int]:
    """Rank-k accuracies: fraction of queries with a correct identity in
    the top k. Returns (accuracies, number of excluded queries)."""
    if len(gallery_ids) == 0:
        raise ContractError("gallery is empty")
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    order = _ranking(query_feats, gallery_feats)
    hits = np.zeros(len(ks))
    excluded = 0
    counted = 0
    for qi in range(len(query_ids)):
        matches = gallery_ids[order[qi]] == query_ids[qi]
        if not matches.any():
            excluded += 1
            continue
        counted += 1
        first = int(np.argmax(matches))
        for j, k in enumerate(ks):
            if first < k:
                hits[j] += 1
    if counted == 0:
        raise ContractError("no query identity occurs in the gallery")
    return hits / counted, excluded


def mean_ap(query_feats, query_ids, gallery_feats, gallery_ids) -> tuple[float, int]:
    """mAP with AP = mean over relevant items of precision at their rank."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    order = _ranking(query_feats, gallery_feats)
    aps = []
    excluded = 0
    for qi in range(len(query_ids)):
        matches = gallery_ids[order[qi]] == query_ids[qi]
        n_rel = int(matches.sum())
        if n_rel == 0:
            excluded += 1
            continue
        positions = np.flatnonzero(matches)
        precisions = (np.arange(1, n_rel + 1)) / (positions + 1)
        aps.append(precisions.mean())
    if not aps:
        raise ContractError("no query identity occurs in the gallery")
    return float(np.mean(aps)), excluded


def cross_modal_similarities(feats_a, ids_a, feats_b, ids_b):
    """(same-identity sims, different-identity sims) across the two sets."""
    an = feats_a / np.maximum(np.linalg.norm(feats_a, axis=1, keepdims=True), 1e-12)
    bn = feats_b / np.maximum(np.linalg.norm(feats_b, axis=1, keepdims=True), 1e-12)
    sims = an @ bn.T
    same = np.asarray(ids_a)[:, None] == np.asarray(ids_b)[None, :]
    return sims[same], sims[~same]


def cross_modal_distance(feats_a, ids_a, feats_b, ids_b) -> float:
    """Mean (1 - cosine) over same-identity cross-modal pairs."""
    intra, _ = cross_modal_similarities(feats_a, ids_a, feats_b, ids_b)
    if intra.size == 0:
        raise ContractError("sets share no identities")
    return float(np.mean(1.0 - intra))


def evaluate(net: Network, query: list[SyntheticSample],
             gallery: list[SyntheticSample], ranks: list[int]) -> MetricsReport:
    qf, qid, _ = extract_inference_features(net, query)
    gf, gid, _ = extract_inference_features(net, gallery)
    cmc_values, excluded = cmc(qf, qid, gf, gid, ranks)
    map_value, _ = mean_ap(qf, qid, gf, gid)
    intra, inter = cross_modal_similarities(qf, qid, gf, gid)
    return MetricsReport(ranks, cmc_values, map_value,
                         float(intra.mean()), float(inter.mean()),
                         len(query), len(gallery), excluded)


def distance_trace(parameter_snapshots: list[dict], net: Network,
                   query: list[SyntheticSample],
                   gallery: list[SyntheticSample]) -> list[float]:
    """Same-identity cross-modal distance for each parameter snapshot.

    Snapshots are {name: array} mappings as produced by the checkpoint
    loader; the network's current values are restored afterwards.
    """
    from .tensor import assign_parameters
    saved = {p.name: p.value.data.copy() for p in net.all_parameters()}
    out = []
    try:
        for snap in parameter_snapshots:
            assign_parameters(net.all_parameters(), snap)
            qf, qid, _ = extract_inference_features(net, query)
            gf, gid, _ = extract_inference_features(net, gallery)
            out.append(cross_modal_distance(qf, qid, gf, gid))
    finally:
        assign_parameters(net.all_parameters(), saved)
    return out


def similarity_histogram(feats_a, ids_a, feats_b, ids_b, bins: int = 40):
    """Binned intra/inter similarity counts over [-1, 1] for plotting."""
    intra, inter = cross_modal_similarities(feats_a, ids_a, feats_b, ids_b)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    intra_counts, _ = np.histogram(intra, bins=edges)
    inter_counts, _ = np.histogram(inter, bins=edges)
    return edges, intra_counts, inter_counts
