"""Training loop: warm-up SGD schedule, per-batch tape, checkpointing.

One tape is opened per mini-batch and discarded after the momentum update;
gradients are zeroed between batches. Metrics are emitted once per epoch
(mean loss components over the epoch's batches plus the same-identity
cross-modal test distance), preceded by an epoch-0 row that records the
initial state before any update.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BatchSpec, DatasetSplit, batch_pairs, sample_batch
from .evaluator import cross_modal_distance, extract_inference_features
from .losses import joint_loss
from .model import BatchForward, Network
from .tensor import (NumericsError, Parameter, Tape, backward,
                     load_parameters, save_parameters, assign_parameters)

METRIC_COLUMNS = ("epoch", "lr", "ce", "tri", "mric_sl", "mric_mid",
                  "mric_vim", "total", "cross_modal_distance")


class TrainingDivergedError(RuntimeError):
    """The loss went non-finite; the message carries the offending batch."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batches_per_epoch: int = 20
    spec: BatchSpec = field(default_factory=BatchSpec)
    momentum: float = 0.9
    lr_divisor: float = 4.0
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        return cls(epochs=cfg["train.epochs"],
                   batches_per_epoch=cfg["train.batches_per_epoch"],
                   spec=BatchSpec(cfg["train.p"], cfg["train.k"]),
                   momentum=cfg["train.momentum"],
                   lr_divisor=cfg["train.lr_divisor"],
                   seed=cfg["train.seed"])


def lr_schedule(epoch: float, divisor: float = 1.0) -> float:
    """Warm-up then step decay; all knots scaled down by `divisor`.

    At divisor 1: linear 0.01 -> 0.1 over [0, 10), 0.1 on [10, 20),
    0.01 on [20, 50), 0.001 afterwards.
    """
    warm, mid, late = 10.0 / divisor, 20.0 / divisor, 50.0 / divisor
    if epoch < warm:
        return 0.01 + (0.1 - 0.01) * (epoch / warm)
    if epoch < mid:
        return 0.1
    if epoch < late:
        return 0.01
    return 0.001


def sgd_step(params: list[Parameter], lr: float, momentum: float = 0.9) -> None:
    """v <- momentum*v + g; p <- p - lr*v. Parameters without grads are kept."""
    for p in params:
        g = p.value.grad
        if g is None:
            continue
        p.momentum *= momentum
        p.momentum += g
        p.value.data = p.value.data - lr * p.momentum


def _label_mapper(split: DatasetSplit):
    ids = split.train_ids
    index = {ident: i for i, ident in enumerate(ids)}
    return index, len(ids)


def _loss_for_batch(net: Network, split_labels: dict, batch, spec: BatchSpec,
                    cfg: dict) -> tuple[BatchForward, "object"]:
    vis, ir, labels = batch_pairs(batch, spec)
    mapped = np.asarray([split_labels[int(l)] for l in labels])
    fwd = net.forward_pairs(vis, ir, mapped)
    breakdown = joint_loss(
        fwd.pooled, fwd.middles, fwd.inference, fwd.inference_labels,
        net.classifier, spec.k,
        use_mric=cfg["loss.mric"], use_sl=cfg["loss.mric_sl"],
        use_mid=cfg["loss.mric_mid"], use_vim=cfg["loss.mric_vim"],
        margin=cfg["loss.triplet_margin"])
    return fwd, breakdown


def _test_distance(net: Network, split: DatasetSplit) -> float:
    qf, qid, _ = extract_inference_features(net, split.query)
    gf, gid, _ = extract_inference_features(net, split.gallery)
    return cross_modal_distance(qf, qid, gf, gid)


def train(cfg: dict, split: DatasetSplit, out_dir=None):
    """Run the full loop; returns (network, metric rows).

    Deterministic for a given config and dataset: parameter init and the
    batch stream derive from train.seed. When `out_dir` is given, writes
    metrics.csv, checkpoint.params (+ .meta.json), and config.txt.
    """
    tc = TrainConfig.from_config(cfg)
    label_index, num_classes = _label_mapper(split)
    init_rng = np.random.default_rng(tc.seed)
    net = Network(cfg, init_rng, num_classes)
    batch_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 1]))
    probe_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2]))
    params = net.trainable_parameters()

    rows: list[dict] = []
    if tc.epochs > 0:
        probe = sample_batch(split, tc.spec, probe_rng)
        _, breakdown = _loss_for_batch(net, label_index, probe, tc.spec, cfg)
        stats = breakdown.as_floats()
        rows.append({"epoch": 0, "lr": lr_schedule(0, tc.lr_divisor), **stats,
                     "cross_modal_distance": _test_distance(net, split)})

    for epoch in range(tc.epochs):
        lr = lr_schedule(epoch, tc.lr_divisor)
        sums = {k: 0.0 for k in ("ce", "tri", "mric_sl", "mric_mid", "mric_vim", "total")}
        for b in range(tc.batches_per_epoch):
            batch = sample_batch(split, tc.spec, batch_rng)
            try:
                with Tape() as tape:
                    _, breakdown = _loss_for_batch(net, label_index, batch, tc.spec, cfg)
                backward(breakdown.total, tape)
            except NumericsError as exc:
                ids = sorted({s.id for s in batch})
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b} "
                    f"(stream seed {tc.seed}, batch identities {ids}): {exc}") from exc
            sgd_step(params, lr, tc.momentum)
            for p in params:
                p.zero_grad()
            for key, value in breakdown.as_floats().items():
                sums[key] += value
        stats = {k: v / tc.batches_per_epoch for k, v in sums.items()}
        rows.append({"epoch": epoch + 1, "lr": lr, **stats,
                     "cross_modal_distance": _test_distance(net, split)})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows)
        save_checkpoint(out / "checkpoint.params", net, cfg,
                        epoch=tc.epochs, rng_state=batch_rng.bit_generator.state)
    return net, rows


def write_metrics(path, rows: list[dict]) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[col]) if isinstance(row[col], float)
                              else str(row[col]) for col in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(path, net: Network, cfg: dict, epoch: int, rng_state=None) -> None:
    path = Path(path)
    save_parameters(path, net.all_parameters())
    meta = {"config": {k: cfg[k] for k in sorted(cfg)}, "epoch": epoch,
            "num_classes": net.num_classes, "rng_state": rng_state}
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild a Network from a checkpoint pair (params + meta sidecar)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".meta.json").read_text())
    cfg = meta["config"]
    net = Network(cfg, np.random.default_rng(0), meta["num_classes"])
    assign_parameters(net.all_parameters(), load_parameters(path))
    return net, meta
