"""Command-line entry point: gen-data, train, eval, gradcheck, ablate.

Every command resolves one configuration (defaults <- --config file <-
flags), writes it alongside its outputs, and is deterministic given that
resolved configuration. Exit codes: 0 success, 1 check/verification
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck as gradcheck_mod
from .config import ConfigError
from .data import generate_dataset, load_split_part, save_split_part
from .evaluator import evaluate, extract_inference_features, similarity_histogram
from .trainer import load_checkpoint, train, write_metrics


def _dataset_from_config(cfg: dict):
    return generate_dataset(
        seed=cfg["data.seed"], p_total=cfg["data.identities"],
        images_per_id=cfg["data.images_per_id"], noise_level=cfg["data.noise"],
        d_latent=cfg["data.latent"], height=cfg["data.height"],
        width=cfg["data.width"], channels=cfg["data.channels"],
        train_fraction=cfg["data.train_fraction"],
        query_modality=cfg["data.query_modality"],
        signature_scale=cfg["data.signature"])


def _apply_common_overrides(args, overrides: dict) -> None:
    mapping = {
        "seed": "train.seed", "data_seed": "data.seed",
        "identities": "data.identities", "epochs": "train.epochs",
        "hyperedges": "hsl.hyperedges", "lmbda": "cfl.lambda",
        "fusion": "cfl.fusion", "ranks": "eval.ranks", "noise": "data.noise",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_hsl", False):
        overrides["hsl.enabled"] = False
    if getattr(args, "no_cfl", False):
        overrides["cfl.enabled"] = False
    if getattr(args, "no_mric", False):
        overrides["loss.mric"] = False
    if getattr(args, "no_whitening", False):
        overrides["hsl.whitening"] = False


def _resolve(args) -> dict:
    overrides: dict = {}
    _apply_common_overrides(args, overrides)
    return config_mod.resolve(getattr(args, "config", None), overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, "data_out")
    split = _dataset_from_config(cfg)
    seed = cfg["data.seed"]
    save_split_part(out / "train.bin", split.train, seed)
    save_split_part(out / "query.bin", split.query, seed)
    save_split_part(out / "gallery.bin", split.gallery, seed)
    manifest = dict(split.meta)
    manifest["files"] = ["train.bin", "query.bin", "gallery.bin"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    config_mod.dump(cfg, out / "config.txt")
    print(f"wrote {out}/train.bin ({len(split.train)} samples), "
          f"query.bin ({len(split.query)}), gallery.bin ({len(split.gallery)}); "
          f"{manifest['n_train']} train / {manifest['n_test']} test identities")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, "train_out")
    split = _dataset_from_config(cfg)
    net, rows = train(cfg, split, out_dir=out)
    config_mod.dump(cfg, out / "config.txt")
    if rows:
        last = rows[-1]
        print(f"trained {cfg['train.epochs']} epochs; final total loss "
              f"{last['total']:.4f}, cross-modal distance {last['cross_modal_distance']:.4f}")
    else:
        print("epochs=0: wrote the initial checkpoint only")
        write_metrics(out / "metrics.csv", rows)
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, "eval_out")
    net, meta = load_checkpoint(args.checkpoint)
    data_cfg = dict(meta["config"])
    data_cfg["eval.ranks"] = cfg["eval.ranks"]
    split = _dataset_from_config(data_cfg)
    ranks = config_mod.parse_ranks(data_cfg)
    report = evaluate(net, split.query, split.gallery, ranks)
    (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=1))
    qf, qid, _ = extract_inference_features(net, split.query)
    gf, gid, _ = extract_inference_features(net, split.gallery)
    edges, intra, inter = similarity_histogram(qf, qid, gf, gid)
    lines = ["bin_left,bin_right,intra_count,inter_count"]
    for i in range(len(intra)):
        lines.append(f"{edges[i]!r},{edges[i + 1]!r},{intra[i]},{inter[i]}")
    (out / "similarity_histogram.csv").write_text("\n".join(lines) + "\n")
    config_mod.dump(data_cfg, out / "config.txt")
    cmc_text = " ".join(f"R{k}={v:.4f}" for k, v in zip(ranks, report.cmc))
    print(f"{cmc_text} mAP={report.map:.4f} "
          f"(query {report.num_query}, gallery {report.num_gallery}, "
          f"excluded {report.num_excluded_queries})")
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    try:
        results = gradcheck_mod.run(names)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    for r in results:
        print(r.line())
    exempt = [r.name for r in results if r.max_rel_err is None]
    if exempt:
        print("straight-through exempt ops: " + ", ".join(exempt))
    if all(r.passed for r in results):
        print(f"all {len(results)} checks passed")
        return 0
    failed = [r.name for r in results if not r.passed]
    print(f"FAILED: {', '.join(failed)}")
    return 1


ABLATION_LADDER = [
    ("baseline_sle", {"hsl.enabled": False, "cfl.enabled": False, "loss.mric": False}),
    ("hsl", {"cfl.enabled": False, "loss.mric": False}),
    ("cfl", {"hsl.enabled": False, "loss.mric": False}),
    ("hsl_cfl", {"loss.mric": False}),
    ("cfl_mric", {"hsl.enabled": False}),
    ("full", {}),
]


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, "ablate_out")
    split = _dataset_from_config(cfg)
    ranks = config_mod.parse_ranks(cfg)
    rows = []
    for name, patch in ABLATION_LADDER:
        run_cfg = dict(cfg)
        run_cfg.update(patch)
        net, _ = train(run_cfg, split, out_dir=out / name)
        config_mod.dump(run_cfg, out / name / "config.txt")
        report = evaluate(net, split.query, split.gallery, ranks)
        rows.append((name, report))
        print(f"{name:>12}: rank1={report.cmc[0]:.4f} mAP={report.map:.4f}")
    lines = ["configuration,rank1,map"]
    for name, report in rows:
        lines.append(f"{name},{report.cmc[0]!r},{report.map!r}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    config_mod.dump(cfg, out / "config.txt")
    print(f"ablation table in {out}/ablation.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperreid",
        description="synthetic cross-modality identity retrieval workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_train_flags=True):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="training seed (train.seed)")
        p.add_argument("--data-seed", dest="data_seed", type=int,
                       help="dataset seed (data.seed)")
        p.add_argument("--identities", type=int, help="total identity count")
        p.add_argument("--noise", type=float, help="render jitter scale")
        if with_train_flags:
            p.add_argument("--epochs", type=int)
            p.add_argument("--no-hsl", action="store_true",
                           help="disable hypergraph enhancement")
            p.add_argument("--no-cfl", action="store_true",
                           help="disable middle-feature synthesis")
            p.add_argument("--no-mric", action="store_true",
                           help="disable the identity-center contrastive loss")
            p.add_argument("--no-whitening", action="store_true",
                           help="bypass whitening inside the hypergraph stage")
            p.add_argument("--fusion", choices=["gat", "add", "concat"])
            p.add_argument("--hyperedges", type=int)
            p.add_argument("--lambda", dest="lmbda", type=float,
                           help="attention pruning coefficient")

    p_gen = sub.add_parser("gen-data", help="generate and dump a dataset")
    common(p_gen, with_train_flags=False)
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", help="train and checkpoint a model")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, with_train_flags=False)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--ranks", help="comma-separated CMC ranks")
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p_gc.add_argument("--op", help="run a single named check")
    p_gc.set_defaults(func=cmd_gradcheck)

    p_ab = sub.add_parser("ablate", help="train and evaluate the component ladder")
    common(p_ab)
    p_ab.add_argument("--ranks", help="comma-separated CMC ranks")
    p_ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
