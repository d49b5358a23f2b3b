"""Line-oriented run configuration.

Files hold ``key = value`` lines grouped under ``[section]`` headers,
with ``#`` comments.  Every key must appear in the schema -- typos are
rejected with their line number -- and selection ratios must stay in
[0, 1).  Command-line ``--set section.key=value`` pairs are applied on
top of the file with the same validation.
"""

from __future__ import annotations

from .backbone import VARIANTS, BackboneConfig, make_config


class ConfigError(ValueError):
    pass


# key -> (type, default); None defaults mean "variant decides"
SCHEMA: dict[str, tuple[str, object]] = {
    "model.variant": ("str", "tiny"),
    "model.dense": ("bool", False),
    "model.ratios": ("floats", None),
    "model.n_state": ("int", None),
    "model.expand": ("int", None),
    "model.conv_width": ("int", None),
    "model.fpn_dim": ("int", None),
    "model.d_embed": ("int", None),
    "model.img_size": ("int", None),
    "model.noise_v": ("float", None),
    "model.noise_mode": ("str", None),
    "model.global_pos": ("str", None),
    "model.weighting": ("str", None),
    "model.scan_paths": ("str", None),
    "train.epochs": ("int", 30),
    "train.batch_size": ("int", 64),
    "train.lr": ("float", 2e-4),
    "train.pretrain_lr": ("float", 4e-4),
    "train.tau": ("float", 0.07),
    "train.ce_weight": ("float", 1.0),
    "train.per_region": ("bool", False),
    "data.size": ("int", 64),
    "data.num_classes": ("int", 5),
    "data.num_train": ("int", 1600),
    "data.num_test": ("int", 400),
    "data.num_pairs": ("int", 500),
    "data.max_targets": ("int", 4),
    "bench.resolutions": ("ints", [64, 128, 256, 512]),
    "bench.repeats": ("int", 5),
    "retrieve.bits": ("int", None),
    "retrieve.k": ("int", 20),
    "retrieve.mode": ("str", "hamming"),
}

RATIO_KEYS = {"model.ratios"}

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _parse_value(key: str, raw: str, where: str):
    kind = SCHEMA[key][0]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL[raw.lower()]
        if kind == "ints":
            return [int(v.strip()) for v in raw.split(",") if v.strip()]
        if kind == "floats":
            return [float(v.strip()) for v in raw.split(",") if v.strip()]
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: bad value for {key}: {e}") from None


def _check_ratios(key: str, value, where: str):
    if key not in RATIO_KEYS:
        return
    vals = value if isinstance(value, list) else [value]
    for v in vals:
        if not (0.0 <= v < 1.0):
            raise ConfigError(f"{where}: selection ratio must be in [0, 1), got {v}")


def defaults() -> dict:
    return {k: (list(v) if isinstance(v, list) else v)
            for k, (_, v) in SCHEMA.items()}


def parse_file(path: str, into: dict | None = None) -> dict:
    cfg = defaults() if into is None else into
    section = ""
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            where = f"{path}:{lineno}"
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if not line.endswith("]"):
                    raise ConfigError(f"{where}: unterminated section header")
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ConfigError(f"{where}: expected 'key = value'")
            name, raw_val = (s.strip() for s in line.split("=", 1))
            key = f"{section}.{name}" if section else name
            if key not in SCHEMA:
                raise ConfigError(f"{where}: unknown key {key!r}")
            value = _parse_value(key, raw_val, where)
            _check_ratios(key, value, where)
            cfg[key] = value
    return cfg


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """--set key=value pairs, validated like file lines."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set {pair!r}: expected key=value")
        key, raw_val = (s.strip() for s in pair.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"--set: unknown key {key!r}")
        value = _parse_value(key, raw_val, f"--set {key}")
        _check_ratios(key, value, f"--set {key}")
        cfg[key] = value
    return cfg


def load(path: str | None, overrides: list[str] | None = None) -> dict:
    cfg = defaults() if path is None else parse_file(path)
    return apply_overrides(cfg, overrides or [])


def backbone_config(cfg: dict) -> BackboneConfig:
    """Materialize the model section onto a variant's defaults."""
    variant = cfg["model.variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r} "
                          f"(expected one of {sorted(VARIANTS)})")
    overrides = {}
    for key, field in (("model.ratios", "ratios"), ("model.n_state", "n_state"),
                       ("model.expand", "expand"), ("model.conv_width", "conv_width"),
                       ("model.fpn_dim", "fpn_dim"), ("model.d_embed", "d_embed"),
                       ("model.img_size", "img_size"), ("model.noise_v", "noise_v"),
                       ("model.noise_mode", "noise_mode"),
                       ("model.global_pos", "global_pos"),
                       ("model.weighting", "weighting"),
                       ("model.scan_paths", "scan_paths")):
        if cfg.get(key) is not None:
            value = cfg[key]
            if field == "ratios":
                if len(value) != 4:
                    raise ConfigError(f"model.ratios needs 4 entries, got {len(value)}")
                value = tuple(value)
            overrides[field] = value
    bc = make_config(variant, **overrides)
    if cfg.get("model.dense"):
        bc = bc.dense()
    return bc
