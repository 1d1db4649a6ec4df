"""Run configuration: dataclasses with desk-scale defaults, flat dotted-key JSON."""

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    c: int = 96             # token width
    heads: int = 4
    enc_depth: int = 6
    dec_depth: int = 4
    g: int = 32             # patches per cloud
    s: int = 16             # points per patch (center + s-1 neighbors)
    t: int = 64             # codebook size
    n_points: int = 512     # points per cloud after sampling
    siamese: bool = True    # share decoder weights between the two branches


@dataclass
class PretrainConfig:
    steps: int = 500
    batch_size: int = 16
    mask_ratio: float = 0.65
    mask_kind: str = "random"   # random | block
    eta: float = 1.0            # point-loss weight in the total loss
    beta: float = 1.0           # smooth-l1 threshold
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup: int = 30
    lam_start: float = 0.996    # EMA momentum schedule (linear)
    lam_end: float = 1.0
    tau_start: float = 1.0      # Gumbel-softmax temperature schedule
    tau_end: float = 0.0625
    tau_schedule: str = "cosine"


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup: int = 20
    layers: tuple = (1, 3, 5)   # encoder hidden layers feeding HTA; -1 = last
    dropout: float = 0.2
    hidden: int = 256
    freeze_codebook: bool = False
    from_scratch: bool = False


@dataclass
class FewshotConfig:
    way: int = 2
    shot: int = 5
    query: int = 20
    runs: int = 10
    steps: int = 60
    # episodes carry too few samples for the mid-layer ensemble or the cool
    # default lr to help; last-layer features with a hotter lr transfer best
    lr: float = 1e-3
    layers: tuple = (-1,)


@dataclass
class DataConfig:
    families: tuple = ("sphere", "cube", "torus", "cylinder")
    per_class_train: int = 128
    per_class_test: int = 32
    points: int = 1024
    dir: str = ""               # when set, load .xyz + manifest.csv instead of generating


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)
    data: DataConfig = field(default_factory=DataConfig)


PAPER_SHAPE = {
    "model.c": 384, "model.heads": 6, "model.enc_depth": 12,
    "model.g": 64, "model.s": 32, "model.n_points": 1024, "model.t": 256,
}


def _sections(cfg):
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def to_flat(cfg):
    """RunConfig -> flat dict with dotted keys."""
    flat = {}
    for name, val in _sections(cfg).items():
        if dataclasses.is_dataclass(val):
            for f in dataclasses.fields(val):
                v = getattr(val, f.name)
                flat[f"{name}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        else:
            flat[name] = val
    return flat


def _coerce(key, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key '{key}': expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [x for x in value.replace(",", " ").split() if x]
        elem = type(default[0]) if default else str
        return tuple(elem(x) for x in value)
    return str(value)


def apply_flat(cfg, flat):
    """Apply dotted-key overrides in place; unknown keys are rejected."""
    known = to_flat(cfg)
    for key, value in flat.items():
        if key not in known:
            raise KeyError(f"unknown config key '{key}'")
        if "." in key:
            section, name = key.split(".", 1)
            target = getattr(cfg, section)
        else:
            target, name = cfg, key
        setattr(target, name, _coerce(key, getattr(target, name), value))
    return cfg


def load_config(path=None, overrides=None, preset=None):
    cfg = RunConfig()
    if preset == "paper":
        apply_flat(cfg, PAPER_SHAPE)
    if path:
        with open(path) as fh:
            apply_flat(cfg, json.load(fh))
    if overrides:
        apply_flat(cfg, overrides)
    return cfg


def dump_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_flat(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
