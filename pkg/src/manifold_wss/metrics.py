"""Dice scoring and method comparison tables."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np

SPLITS = ("val", "test", "synthetic")
STAGES = ("init_maps", "unet")


def _binary(m, name):
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} is not a binary mask")
        m = m.astype(bool)
    return m


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = _binary(a, "a"), _binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class DiceReport:
    method: str
    split: str
    stage: str
    per_image: Dict[str, float] = field(default_factory=dict)
    mean: float = 0.0
    notes: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DiceReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(predictions: Mapping[str, np.ndarray], ground_truth, method: str,
             split: str = "synthetic", stage: str = "init_maps", notes=None) -> DiceReport:
    """Per-image and mean Dice of ``predictions`` against an evaluation-only store.

    Ids are scored in sorted order so the mean is reproducible.
    """
    missing = [i for i in predictions if i not in ground_truth]
    if missing:
        raise KeyError(f"no ground truth for ids {missing[:5]}{'...' if len(missing) > 5 else ''}")
    per_image = {}
    for sid in sorted(predictions):
        gt = ground_truth[sid]
        pred = np.asarray(predictions[sid])
        if pred.shape != gt.shape:
            raise ValueError(f"{sid}: prediction {pred.shape} vs ground truth {gt.shape}")
        per_image[sid] = dice(pred, gt)
    if not per_image:
        raise ValueError("nothing to evaluate")
    mean = float(np.mean([per_image[k] for k in sorted(per_image)]))
    return DiceReport(method, split, stage, per_image, mean, dict(notes or {}))


def compare_table(reports: List[DiceReport]):
    """Methods x (init maps, U-Net) mean Dice in percent; returns (text, csv)."""
    if not reports:
        raise ValueError("no reports")
    splits = {r.split for r in reports}
    if len(splits) > 1:
        raise ValueError(f"reports mix splits: {sorted(splits)}")
    rows: Dict[str, Dict[str, str]] = {}
    for r in reports:
        rows.setdefault(r.method, {s: "-" for s in STAGES})[r.stage] = f"{100 * r.mean:.2f}"
    methods = sorted(rows)

    header = ["method", "init maps", "U-net"]
    body = [[m, rows[m]["init_maps"], rows[m]["unet"]] for m in methods]
    w0 = max(len(header[0]), *(len(b[0]) for b in body))
    lines = [f"split: {splits.pop()}",
             f"{header[0]:<{w0}} | {header[1]:>9} | {header[2]:>7}",
             "-" * (w0 + 22)]
    lines += [f"{m:<{w0}} | {a:>9} | {u:>7}" for m, a, u in body]
    text = "\n".join(lines)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return text, buf.getvalue()


# reference values from the ISIC 2018 experiments, Dice in percent
REFERENCE_TABLE = {
    "GradCAM (ResNet50)": {"val": (34.80, 41.12), "test": (34.00, 40.65)},
    "GradCAM (ResNet101)": {"val": (34.16, 39.03), "test": (33.68, 39.53)},
    "ML + Attention": {"val": (56.60, 58.10), "test": (56.96, 59.16)},
    "DCML + Attention": {"val": (60.79, 63.83), "test": (62.06, 66.12)},
    "Full-supervision": {"val": (None, 85.90), "test": (None, 86.15)},
}
