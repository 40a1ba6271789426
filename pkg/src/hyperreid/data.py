"""Synthetic two-modality identity data and PK mini-batch sampling.

Each identity is a latent vector; the two modalities render it through
distinct fixed random linear maps plus a per-modality channel bias, then
per-sample jitter. The render gap stands in for the visible/infrared
discrepancy, so cross-modal matching genuinely has to be learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

VIS = "vis"
IR = "ir"
MODALITIES = (VIS, IR)


class SamplingError(ValueError):
    """A batch request cannot be satisfied by the split."""


@dataclass
class SyntheticSample:
    id: int
    modality: str
    image: np.ndarray  # (H, W, C) float64


@dataclass
class BatchSpec:
    """P identities per batch, K images per identity per modality."""

    p: int = 8
    k: int = 4

    def __post_init__(self):
        if self.p < 2 or self.k < 1:
            raise ContractError(f"batch spec needs P >= 2, K >= 1, got P={self.p} K={self.k}")


@dataclass
class DatasetSplit:
    train: list[SyntheticSample]
    query: list[SyntheticSample]    # test images, one modality
    gallery: list[SyntheticSample]  # test images, the other modality
    meta: dict = field(default_factory=dict)

    @property
    def train_ids(self) -> list[int]:
        return sorted({s.id for s in self.train})


def generate_dataset(seed: int, p_total: int = 48, images_per_id: int = 8,
                     noise_level: float = 0.75, d_latent: int = 16,
                     height: int = 16, width: int = 8, channels: int = 8,
                     train_fraction: float = 2.0 / 3.0,
                     query_modality: str = IR,
                     signature_scale: float = 1.0,
                     force_equal_renders: bool = False) -> DatasetSplit:
    """Deterministically generate a train split plus cross-modal test sets.

    Each modality's render is one fixed linear map from the latent to the
    image grid; its distribution has a fine-grained per-pixel part and a
    channel-constant part (`signature_scale`) so identity information
    survives spatial pooling in downstream encoders. Identities are split
    train/test disjointly. The query set holds every test image of
    `query_modality`; the gallery holds the other modality.
    `force_equal_renders` collapses the two render maps and biases into one
    (no modality gap), for tests.
    """
    if p_total < 4:
        raise ContractError(f"need at least 4 identities, got {p_total}")
    n_train = int(round(p_total * train_fraction))
    n_train = min(max(n_train, 2), p_total - 2)
    rng = np.random.default_rng(seed)

    dim = height * width * channels
    render, bias = {}, {}
    for m in MODALITIES:
        fine = rng.normal(0.0, 1.0 / np.sqrt(d_latent), size=(d_latent, dim))
        channel_part = rng.normal(0.0, signature_scale / np.sqrt(d_latent),
                                  size=(d_latent, channels))
        render[m] = fine + np.tile(channel_part, (1, height * width))
        bias[m] = rng.normal(0.0, 1.0, size=channels)
    if force_equal_renders:
        render[IR] = render[VIS]
        bias[IR] = bias[VIS]

    latents = rng.normal(size=(p_total, d_latent))
    samples: dict[str, list[SyntheticSample]] = {VIS: [], IR: []}
    for ident in range(p_total):
        for m in MODALITIES:
            base = (latents[ident] @ render[m]).reshape(height, width, channels)
            base = base + bias[m]
            for _ in range(images_per_id):
                img = base + noise_level * rng.normal(size=(height, width, channels))
                samples[m].append(SyntheticSample(ident, m, img))

    train_ids = set(range(n_train))
    gal_modality = IR if query_modality == VIS else VIS
    train = [s for m in MODALITIES for s in samples[m] if s.id in train_ids]
    query = [s for s in samples[query_modality] if s.id not in train_ids]
    gallery = [s for s in samples[gal_modality] if s.id not in train_ids]
    meta = {
        "seed": seed, "p_total": p_total, "n_train": n_train,
        "n_test": p_total - n_train, "images_per_id": images_per_id,
        "noise_level": noise_level, "d_latent": d_latent,
        "height": height, "width": width, "channels": channels,
        "query_modality": query_modality,
    }
    return DatasetSplit(train, query, gallery, meta)


def _group_by_id(samples: list[SyntheticSample]) -> dict[int, dict[str, list[SyntheticSample]]]:
    groups: dict[int, dict[str, list[SyntheticSample]]] = {}
    for s in samples:
        groups.setdefault(s.id, {VIS: [], IR: []})[s.modality].append(s)
    return groups


def sample_batch(split: DatasetSplit, spec: BatchSpec,
                 rng: np.random.Generator) -> list[SyntheticSample]:
    """Draw a PK batch: for each of P identities, K VIS then K IR samples.

    The returned list is identity-major, which downstream center
    computations rely on.
    """
    groups = _group_by_id(split.train)
    ids = sorted(groups)
    if len(ids) < spec.p:
        raise SamplingError(f"split has {len(ids)} identities, batch needs {spec.p}")
    chosen = rng.choice(np.asarray(ids), size=spec.p, replace=False)
    batch: list[SyntheticSample] = []
    for ident in chosen:
        per_mod = groups[int(ident)]
        for m in MODALITIES:
            pool = per_mod[m]
            if len(pool) < spec.k:
                raise SamplingError(
                    f"identity {ident} has {len(pool)} {m} images, batch needs {spec.k}")
            picks = rng.choice(len(pool), size=spec.k, replace=False)
            batch.extend(pool[int(i)] for i in picks)
    return batch


def batch_pairs(batch: list[SyntheticSample], spec: BatchSpec):
    """Collate a PK batch into paired arrays.

    Returns (vis, ir, labels): vis/ir are (P*K, H, W, C) with row i*K+j the
    j-th pair of the i-th identity; labels are the identity ids per pair.
    """
    vis_rows, ir_rows, labels = [], [], []
    per_id = 2 * spec.k
    for i in range(spec.p):
        block = batch[i * per_id:(i + 1) * per_id]
        vis_block = [s for s in block if s.modality == VIS]
        ir_block = [s for s in block if s.modality == IR]
        if len(vis_block) != spec.k or len(ir_block) != spec.k:
            raise SamplingError("batch does not have the PK structure")
        for j in range(spec.k):
            vis_rows.append(vis_block[j].image)
            ir_rows.append(ir_block[j].image)
            labels.append(vis_block[j].id)
    return np.stack(vis_rows), np.stack(ir_rows), np.asarray(labels, dtype=np.int64)


def stack_samples(samples: list[SyntheticSample]):
    """(images, ids, modality codes) arrays for an arbitrary sample list."""
    images = np.stack([s.image for s in samples])
    ids = np.asarray([s.id for s in samples], dtype=np.int64)
    mods = np.asarray([0 if s.modality == VIS else 1 for s in samples], dtype=np.int64)
    return images, ids, mods


# ---------------------------------------------------------------------------
# Split files: ASCII header lines (count, H, W, C, seed, then one id line and
# one modality-code line) followed by the little-endian float64 image payload.
# ---------------------------------------------------------------------------

def save_split_part(path, samples: list[SyntheticSample], seed: int) -> None:
    images, ids, mods = stack_samples(samples) if samples else (
        np.zeros((0, 0, 0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    n, h, w, c = images.shape if samples else (0, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(f"{n} {h} {w} {c}\n".encode("ascii"))
        fh.write(f"{seed}\n".encode("ascii"))
        fh.write((" ".join(str(int(i)) for i in ids) + "\n").encode("ascii"))
        fh.write((" ".join(str(int(m)) for m in mods) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())


def load_split_part(path) -> list[SyntheticSample]:
    with open(path, "rb") as fh:
        header = [fh.readline() for _ in range(4)]
        payload = fh.read()
    n, h, w, c = (int(v) for v in header[0].split())
    ids = [int(v) for v in header[2].split()]
    mods = [int(v) for v in header[3].split()]
    images = np.frombuffer(payload, dtype="<f8").reshape(n, h, w, c)
    return [SyntheticSample(ids[i], MODALITIES[mods[i]], images[i].astype(np.float64))
            for i in range(n)]
