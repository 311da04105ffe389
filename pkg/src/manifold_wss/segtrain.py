"""U-Net training on proxy masks with pixel-wise cross-entropy."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import load_image, read_mask_png, write_jsonl, write_mask_png
from .metrics import dice
from .nets import DivergenceError, UNet

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class SegTrainConfig:
    batch_size: int = 16
    num_classes: int = 2
    epochs: int = 100
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.num_classes < 2:
            raise ValueError("P must be >= 2")


@dataclass
class SegPrediction:
    image_id: str
    probs: np.ndarray  # P x h x w, per-pixel simplex
    mask: np.ndarray  # uint8 h x w


def pixel_ce_loss(probs, target):
    """Mean over pixels of -log p(target class), with log clamped at 1e-12.

    probs: (P, h, w) or (N, P, h, w); target: (h, w) or (N, h, w) class ids.
    """
    probs = torch.as_tensor(probs)
    target = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target) else target).long()
    if probs.dim() == 3:
        probs, target = probs.unsqueeze(0), target.unsqueeze(0)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"probs {tuple(probs.shape)} and target {tuple(target.shape)} disagree")
    p = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -torch.log(p.clamp_min(LOG_EPS)).mean()


def probs_to_mask(probs) -> np.ndarray:
    """Argmax over classes; ties go to the highest (foreground) class."""
    probs = np.asarray(probs)
    flipped = probs[::-1]
    cls = probs.shape[0] - 1 - np.argmax(flipped, axis=0)
    return (cls != 0).astype(np.uint8)


def _unet_loss(model, x, y):
    # log-softmax path: the same quantity as pixel_ce_loss on softmax(logits)
    logits = model(x)
    logp = F.log_softmax(logits, dim=1).clamp_min(np.log(LOG_EPS))
    return F.nll_loss(logp, y)


@torch.no_grad()
def predict(model: UNet, images, ids=None) -> List[SegPrediction]:
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32)) if not torch.is_tensor(images) else images
    if x.dim() == 3:
        x = x.unsqueeze(0)
    probs = torch.softmax(model(x).double(), dim=1).numpy()
    ids = ids if ids is not None else [str(i) for i in range(len(probs))]
    return [SegPrediction(i, p, probs_to_mask(p)) for i, p in zip(ids, probs)]


def predict_batched(model, images, ids, batch_size=32) -> List[SegPrediction]:
    out = []
    for s in range(0, len(ids), batch_size):
        out += predict(model, images[s:s + batch_size], ids[s:s + batch_size])
    return out


@dataclass
class SegTrainResult:
    model: UNet
    log: List[dict]
    best_epoch: Optional[int] = None


def train_unet(model: UNet, images: torch.Tensor, masks: torch.Tensor, cfg: SegTrainConfig,
               val=None, out_dir=None) -> SegTrainResult:
    """Fixed-epoch Adam training on (image, proxy mask) pairs.

    ``val`` is an optional (images, masks) pair of proxy labels; when given,
    the weights with the best mean validation Dice are kept.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    if images.shape[-2:] != masks.shape[-2:]:
        raise ValueError("image and mask shapes disagree")
    masks = masks.long()
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    records, best, best_state, best_epoch = [], -1.0, None, None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(images))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            if len(idx) < 2 and len(order) > 1:  # batch norm needs more than one sample
                continue
            loss = _unet_loss(model, images[idx], masks[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite cross-entropy at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        rec = {"epoch": epoch, "mean_loss": total / len(images)}
        if val is not None:
            preds = predict_batched(model, val[0], [str(i) for i in range(len(val[0]))])
            rec["val_dice"] = float(np.mean([dice(p.mask, m) for p, m in zip(preds, val[1].numpy())]))
            if rec["val_dice"] > best:
                best, best_epoch = rec["val_dice"], epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        records.append(rec)
    if records and records[-1]["mean_loss"] > records[0]["mean_loss"]:
        log.warning("final U-Net loss %.4f exceeds the first epoch's %.4f",
                    records[-1]["mean_loss"], records[0]["mean_loss"])
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        write_jsonl(Path(out_dir) / "train_log.jsonl", records)
    return SegTrainResult(model, records, best_epoch)


def load_proxy_pairs(entries, target_size=None):
    """Stack images and proxy masks listed in a proxy manifest."""
    x = np.stack([load_image(e.image, target_size) for e in entries])
    y = np.stack([read_mask_png(e.mask) for e in entries])
    return torch.from_numpy(x), torch.from_numpy(y.astype(np.int64))


def write_predictions(preds: List[SegPrediction], out_dir) -> Path:
    """Masks as 8-bit PNGs plus an ``id,mask`` manifest."""
    out_dir = Path(out_dir)
    rows = []
    for p in preds:
        path = out_dir / "masks" / f"{p.image_id}.png"
        write_mask_png(path, p.mask)
        rows.append((p.image_id, f"masks/{p.image_id}.png"))
    manifest = out_dir / "predictions.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "mask"])
        w.writerows(rows)
    return manifest
