"""Pipeline configuration: one YAML tree, presets, and ``key=value`` overrides."""

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .dataio import SyntheticConfig
from .manifold import ManifoldTrainConfig
from .nets import AttentionModuleConfig, BackboneConfig, UNetConfig
from .saliency import ClassifierTrainConfig, ExtractConfig
from .segtrain import SegTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    synthetic: Optional[SyntheticConfig] = None
    synthetic_test_per_class: int = 20
    train_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    eval_masks: Optional[str] = None
    eval_split: str = "synthetic"
    data_root: Optional[str] = None
    image_size: Tuple[int, int] = (64, 64)  # (w, h)


@dataclass
class NetsSection:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionModuleConfig = field(default_factory=AttentionModuleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    normalize_embeddings: bool = True


@dataclass
class ManifoldSection:
    mode: str = "dcml"  # or "ml"
    train: ManifoldTrainConfig = field(default_factory=ManifoldTrainConfig)


@dataclass
class SegSection:
    train: SegTrainConfig = field(default_factory=SegTrainConfig)
    val_fraction: float = 0.1  # proxy pairs held out for best-epoch selection
    sources: List[str] = field(default_factory=lambda: ["attention", "gradcam"])


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    nets: NetsSection = field(default_factory=NetsSection)
    manifold: ManifoldSection = field(default_factory=ManifoldSection)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    seg: SegSection = field(default_factory=SegSection)
    output_dir: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    overlays: int = 8  # number of evaluation images rendered as panels

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


PRESETS: Dict[str, Dict[str, Any]] = {
    # full-scale ISIC 2018 settings
    "paper": {
        "data": {"synthetic": None, "image_size": [224, 224], "eval_split": "test"},
        "nets": {
            "backbone": {"preset": "paper_resnet50_3blocks"},
            "attention": {"filters": [128, 32, 1], "kernel": 3},
            "unet": {"init_filters": 32, "depth": 4, "num_classes": 2},
        },
        "manifold": {"mode": "dcml", "train": {
            "epochs": 300, "finetune_epochs": 50, "dim": 128, "batch_size": 32, "per_class": 8,
            "lr": 1e-4, "num_subspaces": 4, "recluster_every": 10,
            "margin": {"alpha": 0.2, "beta": 1.2},
        }},
        "classifier": {"epochs": 100, "batch_size": 32, "lr": 1e-4},
        "extract": {"threshold": 0.5},
        "seg": {"train": {"batch_size": 16, "num_classes": 2, "epochs": 100, "lr": 1e-4}},
    },
    # CPU desk scale: 64x64 synthetic shapes, tiny backbone
    "synthetic": {
        "data": {
            "synthetic": {"n_per_class": 50, "num_classes": 4, "image_size": 64, "seed": 0},
            "synthetic_test_per_class": 20,
            "image_size": [64, 64],
            "eval_split": "synthetic",
        },
        "nets": {
            "backbone": {"preset": "tiny"},
            "unet": {"init_filters": 8, "depth": 4, "num_classes": 2},
        },
        "manifold": {"mode": "dcml", "train": {
            "epochs": 40, "finetune_epochs": 10, "dim": 128, "batch_size": 16, "per_class": 8,
            "lr": 3e-4, "num_subspaces": 2, "recluster_every": 10,
        }},
        "classifier": {"epochs": 20, "batch_size": 16, "lr": 1e-3},
        "extract": {"threshold": 0.5},
        "seg": {"train": {"batch_size": 16, "epochs": 30, "lr": 1e-3}},
    },
}


def _merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_dataclass_type(tp):
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def _build(cls, data, where: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        key = f"{where}.{unknown[0]}" if where else unknown[0]
        raise ConfigError(f"unknown config key {key!r}")
    kwargs = {}
    for name, value in data.items():
        tp = _unwrap_optional(hints[name])
        path = f"{where}.{name}" if where else name
        if _is_dataclass_type(tp):
            kwargs[name] = _build(tp, value, path)
        elif typing.get_origin(tp) is tuple and value is not None:
            kwargs[name] = tuple(value)
        elif tp is float and isinstance(value, (str, int)) and not isinstance(value, bool):
            # YAML 1.1 reads "1e-4" as a string
            try:
                kwargs[name] = float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        elif tp is int and value is not None and not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    tree: Dict[str, Any] = {}
    node = tree
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return tree


def resolve(raw: Optional[dict] = None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """Preset (``preset:`` key) <- file contents <- overrides."""
    raw = dict(raw or {})
    preset = raw.pop("preset", None)
    tree: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        tree = copy.deepcopy(PRESETS[preset])
    tree = _merge(tree, raw)
    for item in overrides or []:
        upd = parse_override(item)
        if "preset" in upd:
            raise ConfigError("preset cannot be overridden with --set")
        tree = _merge(tree, upd)
    cfg = _build(PipelineConfig, tree, "")
    validate(cfg)
    return cfg


def load_config(path=None, overrides=None, preset=None) -> PipelineConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if preset is not None and "preset" not in raw:
        raw["preset"] = preset
    return resolve(raw, overrides)


def validate(cfg: PipelineConfig):
    d = cfg.data
    if d.synthetic is None and not d.train_manifest:
        raise ConfigError("data: set either data.synthetic or data.train_manifest")
    if d.synthetic is not None:
        d.image_size = (d.synthetic.image_size, d.synthetic.image_size)
    for key in ("train_manifest", "eval_manifest", "eval_masks"):
        p = getattr(d, key)
        if p and not Path(p).exists():
            raise ConfigError(f"data.{key}: path does not exist: {p}")
    if d.eval_split not in ("val", "test", "synthetic"):
        raise ConfigError(f"data.eval_split: unknown split {d.eval_split!r}")
    if len(d.image_size) != 2:
        raise ConfigError("data.image_size must be [w, h]")
    stride = cfg.nets.backbone.stride
    if any(s % stride for s in d.image_size):
        raise ConfigError(f"data.image_size {list(d.image_size)} is not divisible by backbone stride {stride}")
    k = 2 ** cfg.nets.unet.depth
    if any(s % k for s in d.image_size):
        raise ConfigError(f"data.image_size {list(d.image_size)} is not divisible by 2^unet.depth = {k}")
    if cfg.manifold.mode not in ("ml", "dcml"):
        raise ConfigError(f"manifold.mode must be 'ml' or 'dcml', got {cfg.manifold.mode!r}")
    if not 0 <= cfg.seg.val_fraction < 1:
        raise ConfigError("seg.val_fraction must lie in [0, 1)")
    bad = [s for s in cfg.seg.sources if s not in ("attention", "gradcam")]
    if bad:
        raise ConfigError(f"seg.sources: unknown source(s) {bad}")
