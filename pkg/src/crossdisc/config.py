"""Flat ``key = value`` run configuration shared by every command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # paths
    data_dir: str = "data"
    out_dir: str = "run"
    # dataset generation
    n_train: int = 20
    n_test: int = 5
    min_objects: int = 2
    max_objects: int = 4
    height: int = 64
    width: int = 128
    depth_min: float = 5.0
    depth_max: float = 16.0
    row_step: int = 2
    lidar_top_row: int = 16
    point_dropout: float = 0.0
    night_scenes: float = 0.0  # fraction of training scenes rendered at night
    night_strength: float = 0.9
    night_motion: bool = False  # whether night scenes keep their motion masks
    # model
    num_slots: int = 5
    dim: int = 32
    enc_width: int = 32
    dec_width: int = 32
    mlp_hidden: int = 64
    slot_iters: int = 2
    # training
    seed: int = 0
    T: int = 5
    batch_size: int = 2
    burn_in_steps: int = 2000
    distill_steps: int = 2000
    lr: float = 4e-4
    keep_rate: float = 0.996
    drop_ratio: float = 0.2
    completion: bool = True
    conf_threshold: float = 0.7
    min_area: int = 16
    w_motion: float = 1.0
    w_mse: float = 1.0
    w_bg: float = 1.0
    w_dist: float = 1.0
    flip_2d: float = 0.5
    crop_2d: float = 0.3
    color_2d: float = 0.8
    dark_2d: float = 0.0
    jitter_3d: float = 0.4
    flip_3d: float = 0.0
    crop_3d: float = 0.0
    drop_3d: float = 0.0
    checkpoint_every: int = 0
    # inference / evaluation
    split: str = "test"
    modality: str = "both"
    min_pred_area: int = 8
    tau: float = 0.3
    bands: str = "0-10,10-30,30-70"

    def loss_weights(self) -> dict[str, float]:
        return {"motion": self.w_motion, "mse": self.w_mse, "bg": self.w_bg, "dist": self.w_dist}

    def band_list(self) -> list[tuple[float, float]]:
        return parse_bands(self.bands)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


def parse_bands(text: str) -> list[tuple[float, float]]:
    out = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        lo, sep, hi = chunk.partition("-")
        try:
            lo_f, hi_f = float(lo), float(hi)
        except ValueError:
            raise ConfigError(f"bad distance band {chunk!r}") from None
        if not sep or hi_f <= lo_f:
            raise ConfigError(f"bad distance band {chunk!r}")
        out.append((lo_f, hi_f))
    return out


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def apply_pairs(cfg: Config, pairs: list[str], origin: str = "override") -> Config:
    types = {f.name: f.type for f in fields(Config)}
    updates = {}
    for i, line in enumerate(pairs, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{i}: expected key = value, got {line.strip()!r}")
        if key not in types:
            raise ConfigError(f"{origin}:{i}: unknown key {key!r}")
        updates[key] = _coerce(key, types[key], value)
    return dataclasses.replace(cfg, **updates)


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply_pairs(cfg, p.read_text().splitlines(), str(p))
    if overrides:
        cfg = apply_pairs(cfg, overrides, "--set")
    return cfg


def dump_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
