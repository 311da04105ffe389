"""Network builders: backbones, attention head, embedding net, classifier, U-Net."""

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

PRESETS = ("paper_resnet50_3blocks", "paper_resnet101_3blocks", "tiny")


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    preset: str = "tiny"
    pretrained_weights: Optional[str] = None
    tiny_channels: int = 64

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown backbone preset {self.preset!r}; choose from {PRESETS}")

    @property
    def stride(self) -> int:
        return 8 if self.preset == "tiny" else 16

    @property
    def channels(self) -> int:
        return self.tiny_channels if self.preset == "tiny" else 1024


@dataclass
class AttentionModuleConfig:
    filters: Tuple[int, ...] = (128, 32, 1)
    kernel: int = 3

    def __post_init__(self):
        self.filters = tuple(self.filters)
        if self.filters[-1] != 1:
            raise ValueError("attention module must end with a single filter")


@dataclass
class UNetConfig:
    init_filters: int = 32
    depth: int = 4
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("U-Net needs at least 2 output classes")


def _init_conv(m):
    if isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def _conv_bn_relu(cin, cout, kernel, stride=1):
    pad = (kernel - 1) // 2 if stride == 1 else 0
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Feature extractor mapping 3 x h x w images to c x h/stride x w/stride maps."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stride = cfg.stride
        self.channels = cfg.channels
        if cfg.preset == "tiny":
            # non-overlapping 2x2 patches keep each feature cell's receptive
            # field at 8x8 px, so attention stays local to the object
            c = cfg.tiny_channels
            self.body = nn.Sequential(
                _conv_bn_relu(3, c // 2, 2, 2),
                _conv_bn_relu(c // 2, c, 2, 2),
                _conv_bn_relu(c, c, 2, 2),
                _conv_bn_relu(c, c, 1),
            )
            self.body.apply(_init_conv)
        else:
            import torchvision

            make = (torchvision.models.resnet50 if cfg.preset == "paper_resnet50_3blocks"
                    else torchvision.models.resnet101)
            net = make(weights=None)
            if cfg.pretrained_weights:
                path = Path(cfg.pretrained_weights)
                if not path.is_file():
                    raise FileNotFoundError(f"pretrained weights not found: {path}")
                state = torch.load(path, map_location="cpu", weights_only=True)
                net.load_state_dict(state, strict=False)
            # stem + the first three residual stages: output stride 16
            self.body = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3
            )

    def check_input(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} indivisible by backbone stride {self.stride}")

    def forward(self, x):
        self.check_input(x)
        return self.body(x)


class AttentionModule(nn.Module):
    """Three 3x3 convs (ReLU between, sigmoid at the end) producing one map per image."""

    def __init__(self, in_channels: int, cfg: AttentionModuleConfig = None):
        super().__init__()
        cfg = cfg or AttentionModuleConfig()
        layers, cin = [], in_channels
        for i, cout in enumerate(cfg.filters):
            layers.append(nn.Conv2d(cin, cout, cfg.kernel, padding=cfg.kernel // 2))
            if i < len(cfg.filters) - 1:
                layers.append(nn.ReLU(inplace=True))
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.convs.apply(_init_conv)
        nn.init.zeros_(self.convs[-1].bias)

    @property
    def last_conv(self) -> nn.Conv2d:
        return self.convs[-1]

    def forward(self, f):
        """f: (N, c, m, n) -> (N, m, n) with values in (0, 1)."""
        a = torch.sigmoid(self.convs(f)).squeeze(1)
        # float rounding can land exactly on 0 or 1; keep the open interval
        fi = torch.finfo(a.dtype)
        a = a.clamp(fi.tiny, 1.0 - fi.eps / 2)
        if not torch.isfinite(a).all():
            raise DivergenceError("non-finite attention values")
        return a


def attentive_embed(f, a, dense: Optional[nn.Module] = None, normalize: bool = True):
    """GAP over a * f, then the dense projection and optional L2 normalization.

    f is (N, c, m, n), a is (N, m, n). With ``dense=None`` the pooled
    c-vector is returned.
    """
    if f.shape[0] != a.shape[0] or f.shape[-2:] != a.shape[-2:]:
        raise ShapeError(f"feature map {tuple(f.shape)} and attention {tuple(a.shape)} disagree")
    pooled = (a.unsqueeze(1) * f).mean(dim=(2, 3))
    if dense is None:
        return pooled
    e = dense(pooled)
    if normalize:
        e = F.normalize(e, dim=1, eps=1e-12)
    return e


class ManifoldNet(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig = None, attention_cfg: AttentionModuleConfig = None,
                 dim: int = 128, normalize_embeddings: bool = True):
        super().__init__()
        self.backbone = Backbone(backbone_cfg or BackboneConfig())
        self.attention = AttentionModule(self.backbone.channels, attention_cfg)
        self.dense = nn.Linear(self.backbone.channels, dim)
        self.dim = dim
        self.normalize_embeddings = normalize_embeddings

    def forward_all(self, x):
        f = self.backbone(x)
        a = self.attention(f)
        raw = attentive_embed(f, a, self.dense, normalize=False)
        e = F.normalize(raw, dim=1, eps=1e-12) if self.normalize_embeddings else raw
        return {"features": f, "attention": a, "raw": raw, "embedding": e}

    def forward(self, x):
        return self.forward_all(x)["embedding"]


class Classifier(nn.Module):
    """Backbone + GAP + linear head; the GradCAM baseline network."""

    def __init__(self, backbone_cfg: BackboneConfig = None, num_classes: int = 2):
        super().__init__()
        self.backbone = Backbone(backbone_cfg or BackboneConfig())
        self.head = nn.Linear(self.backbone.channels, num_classes)
        self.num_classes = num_classes

    def forward_all(self, x):
        f = self.backbone(x)
        return f, self.head(f.mean(dim=(2, 3)))

    def forward(self, x):
        return self.forward_all(x)[1]


class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(_conv_bn_relu(cin, cout, 3), _conv_bn_relu(cout, cout, 3))


class UNet(nn.Module):
    """Encoder/decoder with concatenated skips and bilinear upsampling; returns logits."""

    def __init__(self, cfg: UNetConfig = None, in_channels: int = 3):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        widths = [cfg.init_filters * 2 ** i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(_DoubleConv(cin, w))
            cin = w
        self.up = nn.ModuleList()
        for w_skip in reversed(widths[:-1]):
            self.up.append(_DoubleConv(cin + w_skip, w_skip))
            cin = w_skip
        self.out = nn.Conv2d(cin, cfg.num_classes, 1)
        self.apply(_init_conv)

    def forward(self, x):
        h, w = x.shape[-2:]
        k = 2 ** self.cfg.depth
        if h % k or w % k:
            raise ShapeError(f"input {h}x{w} indivisible by 2^depth = {k}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.out(x)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: nn.Module, meta: dict):
    """Parameters keyed by module path plus a JSON metadata block, in one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": json.dumps(meta, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return payload["state_dict"], json.loads(payload["meta"])


def build_from_meta(meta: dict) -> nn.Module:
    kind = meta["kind"]
    if kind == "manifold":
        return ManifoldNet(BackboneConfig(**meta["backbone"]), AttentionModuleConfig(**meta["attention"]),
                           meta["dim"], meta.get("normalize_embeddings", True))
    if kind == "classifier":
        return Classifier(BackboneConfig(**meta["backbone"]), meta["num_classes"])
    if kind == "unet":
        return UNet(UNetConfig(**meta["unet"]))
    raise ValueError(f"unknown model kind {kind!r}")


def model_meta(model: nn.Module, **extra) -> dict:
    if isinstance(model, ManifoldNet):
        meta = {"kind": "manifold", "backbone": asdict(model.backbone.cfg),
                "attention": {"filters": [m.out_channels for m in model.attention.convs
                                          if isinstance(m, nn.Conv2d)],
                              "kernel": model.attention.last_conv.kernel_size[0]},
                "dim": model.dim, "normalize_embeddings": model.normalize_embeddings}
    elif isinstance(model, Classifier):
        meta = {"kind": "classifier", "backbone": asdict(model.backbone.cfg),
                "num_classes": model.num_classes}
    elif isinstance(model, UNet):
        meta = {"kind": "unet", "unet": asdict(model.cfg)}
    else:
        raise TypeError(type(model))
    meta.update(extra)
    return meta


def load_model(path) -> Tuple[nn.Module, dict]:
    state, meta = load_checkpoint(path)
    model = build_from_meta(meta)
    model.load_state_dict(state)
    model.eval()
    return model, meta
