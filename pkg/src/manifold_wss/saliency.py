"""Pixel-level saliency: attention maps, GradCAM, thresholding, proxy-mask datasets."""

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import (DataError, DatasetManifest, load_image, write_jsonl, write_mask_png,
                     write_saliency_png)
from .nets import Classifier, DivergenceError, ManifoldNet

log = logging.getLogger(__name__)


@dataclass
class ExtractConfig:
    threshold: float = 0.5
    upsample: str = "bilinear"
    order: str = "upsample_then_threshold"  # or "threshold_then_upsample"
    gradcam_normalize: str = "max"  # or "none"
    target_class: str = "true_label"  # or "predicted"
    batch_size: int = 32

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold T={self.threshold} must lie in (0, 1)")
        if self.order not in ("upsample_then_threshold", "threshold_then_upsample"):
            raise ValueError(f"unknown order {self.order!r}")
        if self.gradcam_normalize not in ("max", "none"):
            raise ValueError(f"unknown gradcam_normalize {self.gradcam_normalize!r}")
        if self.target_class not in ("true_label", "predicted"):
            raise ValueError(f"unknown target_class {self.target_class!r}")


@dataclass
class SaliencyMapFull:
    image_id: str
    values: np.ndarray  # h x w in [0, 1]
    method: str
    source: str = ""


@dataclass
class ProxyMask:
    image_id: str
    mask: np.ndarray  # uint8 h x w in {0, 1}
    threshold: float


def _upsample(maps, size, mode="bilinear"):
    """(N, m, n) -> (N, h, w)."""
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(maps.unsqueeze(1), size=tuple(size), mode=mode, **kw).squeeze(1)


def _as_batch(x):
    x = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not torch.is_tensor(x) else x
    return x.unsqueeze(0) if x.dim() == 3 else x


@torch.inference_mode()
def attention_maps(model: ManifoldNet, images) -> torch.Tensor:
    """Raw m x n attention for a batch, forward pass only."""
    model.eval()
    return model.forward_all(_as_batch(images))["attention"]


@torch.inference_mode()
def extract_attention(model: ManifoldNet, images, cfg: ExtractConfig = None) -> np.ndarray:
    """Attention maps bilinearly upsampled to the input resolution, (N, h, w).

    With ``order='threshold_then_upsample'`` the coarse map is binarized
    first and upsampled with nearest-neighbour, which returns a {0, 1} map.
    """
    cfg = cfg or ExtractConfig()
    x = _as_batch(images)
    a = attention_maps(model, x)
    if cfg.order == "threshold_then_upsample":
        out = _upsample((a > cfg.threshold).float(), x.shape[-2:], "nearest")
    else:
        out = _upsample(a, x.shape[-2:], cfg.upsample)
    return out.double().numpy()


def gradcam_map(activations, gradients):
    """ReLU(sum_k w_k A^k) with w_k the spatial mean of dy/dA^k.

    activations, gradients: (N, c, m, n) or (c, m, n).
    """
    squeeze = activations.dim() == 3
    if squeeze:
        activations, gradients = activations.unsqueeze(0), gradients.unsqueeze(0)
    if not torch.isfinite(gradients).all():
        raise DivergenceError("non-finite gradients in GradCAM")
    w = gradients.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((w * activations).sum(dim=1))
    return cam[0] if squeeze else cam


def gradcam(classifier: Classifier, images, labels=None, cfg: ExtractConfig = None) -> np.ndarray:
    """GradCAM on the classifier's last feature map, upsampled to (N, h, w).

    ``labels`` are 1-based class labels; they are the target when
    ``cfg.target_class == 'true_label'``.
    """
    cfg = cfg or ExtractConfig()
    x = _as_batch(images)
    classifier.eval()
    with torch.enable_grad():
        feats, logits = classifier.forward_all(x)
        if cfg.target_class == "true_label":
            if labels is None:
                raise ValueError("true-label GradCAM needs labels")
            target = torch.as_tensor(np.asarray(labels) - 1, dtype=torch.long).reshape(-1)
        else:
            target = logits.argmax(dim=1)
        # samples are independent in eval mode, so one backward serves the batch
        score = logits.gather(1, target[:, None]).sum()
        (grads,) = torch.autograd.grad(score, feats)
    cam = gradcam_map(feats.detach(), grads)
    cam = _upsample(cam, x.shape[-2:], cfg.upsample)
    if cfg.gradcam_normalize == "max":
        peak = cam.amax(dim=(1, 2), keepdim=True)
        cam = torch.where(peak > 0, cam / torch.where(peak > 0, peak, 1.0), cam)
    return cam.double().numpy()


def threshold_map(values, threshold: float = 0.5) -> np.ndarray:
    """Strict binarization: 1 where value > T."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold T={threshold} must lie in (0, 1)")
    return (np.asarray(values) > threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# datasets


def _batches(manifest: DatasetManifest, size, target_size):
    for s in range(0, len(manifest), size):
        entries = manifest.entries[s:s + size]
        x = np.stack([load_image(e.path, target_size) for e in entries])
        yield entries, torch.from_numpy(x)


def compute_saliency(model, manifest: DatasetManifest, method: str, cfg: ExtractConfig = None,
                     target_size=None):
    """Yield SaliencyMapFull for every manifest entry, in manifest order."""
    cfg = cfg or ExtractConfig()
    for entries, x in _batches(manifest, cfg.batch_size, target_size):
        if method == "attention":
            maps = extract_attention(model, x, cfg)
        elif method == "gradcam":
            maps = gradcam(model, x, [e.label for e in entries], cfg)
        else:
            raise ValueError(f"unknown saliency method {method!r}")
        for e, m in zip(entries, maps):
            yield SaliencyMapFull(e.id, m, method)


def emit_proxy_dataset(model, manifest: DatasetManifest, cfg: ExtractConfig, out_dir,
                       method: str = "attention", target_size=None) -> Path:
    """Write saliency PNGs, proxy masks and a ``id,image,mask`` manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "saliency").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    paths = {e.id: e.path for e in manifest.entries}
    for sal in compute_saliency(model, manifest, method, cfg, target_size):
        v = sal.values
        if not (np.isfinite(v).all() and v.min() >= 0 and v.max() <= 1):
            raise DataError(f"{sal.image_id}: saliency outside [0, 1], aborting")
        write_saliency_png(out_dir / "saliency" / f"{sal.image_id}.png", v)
        mask_path = out_dir / "masks" / f"{sal.image_id}.png"
        write_mask_png(mask_path, threshold_map(v, cfg.threshold))
        rows.append((sal.image_id, paths[sal.image_id], mask_path))
    manifest_path = out_dir / "proxy_manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "image", "mask"])
        for sid, img, mask in rows:
            w.writerow([sid, os.path.relpath(img, out_dir), os.path.relpath(mask, out_dir)])
    if len(rows) != len(manifest):
        raise DataError("proxy dataset cardinality mismatch")
    return manifest_path


@dataclass
class ProxyEntry:
    id: str
    image: Path
    mask: Path


def load_proxy_manifest(path) -> List[ProxyEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"proxy manifest not found: {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "image", "mask"]:
            raise DataError(f"{path}: header must be 'id,image,mask'")
        for row in reader:
            out.append(ProxyEntry(row["id"], path.parent / row["image"], path.parent / row["mask"]))
    if not out:
        raise DataError(f"{path}: empty proxy manifest")
    return out


# ---------------------------------------------------------------------------
# classifier for the GradCAM baseline


@dataclass
class ClassifierTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0


def train_classifier(model: Classifier, images: torch.Tensor, labels, cfg: ClassifierTrainConfig,
                     out_dir=None):
    """Cross-entropy training on image-level labels; returns per-epoch records."""
    y = torch.as_tensor(np.asarray(labels) - 1, dtype=torch.long)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    records = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        total, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            logits = model(images[idx])
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        records.append({"epoch": epoch, "mean_loss": total / len(y), "train_accuracy": correct / len(y)})
    model.eval()
    if out_dir is not None:
        write_jsonl(Path(out_dir) / "train_log.jsonl", records)
    return records
