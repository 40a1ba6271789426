"""Flat dotted-key configuration: defaults <- config file <- overrides.

The file format is `key = value` lines with `#` comments. Values are typed
by the default they replace. The fully resolved mapping is written next to
every run's outputs so the run can be reproduced exactly.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, malformed line, or ill-typed value."""


DEFAULTS: dict = {
    "data.seed": 0,
    "data.identities": 48,
    "data.images_per_id": 8,
    "data.noise": 0.75,
    "data.signature": 1.0,
    "data.latent": 16,
    "data.height": 16,
    "data.width": 8,
    "data.channels": 8,
    "data.train_fraction": 2.0 / 3.0,
    "data.query_modality": "ir",

    "sle.conv_blocks": 3,
    "sle.transformer_blocks": 2,
    "sle.heads": 4,
    "sle.channels": 16,
    "sle.grid_h": 8,
    "sle.grid_w": 4,
    "sle.ffn_mult": 2,

    "hsl.enabled": True,
    "hsl.whitening": True,
    "hsl.hyperedges": 16,
    "hsl.eps_cov": 1e-5,
    "hsl.eps_deg": 1e-6,

    "cfl.enabled": True,
    "cfl.lambda": 1.3,
    "cfl.fusion": "gat",
    "cfl.parts": 2,
    "cfl.gem_power": 3.0,

    "loss.mric": True,
    "loss.mric_sl": True,
    "loss.mric_mid": True,
    "loss.mric_vim": True,
    "loss.triplet_margin": 0.3,

    "train.epochs": 30,
    "train.batches_per_epoch": 20,
    "train.p": 8,
    "train.k": 4,
    "train.momentum": 0.9,
    "train.lr_divisor": 4.0,
    "train.seed": 0,

    "eval.ranks": "1,5,10,20",
}


def _coerce(key: str, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(str(raw).strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(str(raw).strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return str(raw).strip()


def parse_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        values[key] = raw
    return values


def resolve(file_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then override values; all keys validated."""
    cfg = dict(DEFAULTS)
    for source in (parse_file(file_path) if file_path else {}, overrides or {}):
        for key, raw in source.items():
            if raw is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _coerce(key, raw, DEFAULTS[key])
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["data.height"] != 2 * cfg["sle.grid_h"] or cfg["data.width"] != 2 * cfg["sle.grid_w"]:
        raise ConfigError("input height/width must be twice the feature grid (stride-2 stem)")
    if cfg["sle.channels"] % cfg["sle.heads"] != 0:
        raise ConfigError("sle.channels must be divisible by sle.heads")
    n = cfg["sle.grid_h"] * cfg["sle.grid_w"]
    if n % cfg["cfl.parts"] != 0:
        raise ConfigError("grid node count must divide into cfl.parts stripes")
    if cfg["cfl.fusion"] not in ("gat", "add", "concat"):
        raise ConfigError(f"cfl.fusion must be gat|add|concat, got {cfg['cfl.fusion']!r}")
    if cfg["data.query_modality"] not in ("vis", "ir"):
        raise ConfigError("data.query_modality must be vis or ir")
    if not 0.0 <= cfg["train.momentum"] < 1.0:
        raise ConfigError("train.momentum must be in [0, 1)")
    if cfg["train.epochs"] < 0:
        raise ConfigError("train.epochs must be >= 0")


def dump(cfg: dict, path) -> None:
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_ranks(cfg: dict) -> list[int]:
    try:
        ranks = [int(tok) for tok in str(cfg["eval.ranks"]).split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"eval.ranks: {cfg['eval.ranks']!r}") from exc
    if not ranks or any(r < 1 for r in ranks):
        raise ConfigError("eval.ranks needs positive integers")
    return ranks
