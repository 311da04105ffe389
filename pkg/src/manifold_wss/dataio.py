"""Dataset ingestion, synthetic data, balanced sampling and PNG mask I/O."""

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")
MAX_SYNTH_CLASSES = 8
MIN_SYNTH_SIZE = 32
DATA_ROOT_ENV = "MANIFOLD_WSS_DATA_ROOT"


class DataError(ValueError):
    pass


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # float32, 3 x h x w, values in [0, 1]
    label: int  # 1-based

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataError(f"{self.id}: expected 3 x h x w pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"{self.id}: non-finite pixel values")


@dataclass
class ManifestEntry:
    id: str
    path: Path
    label: int


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    num_classes: int
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [e.id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "DatasetManifest":
        return DatasetManifest(
            [self.entries[i] for i in indices], self.num_classes, split or self.split
        )

    def write(self, path, relative_to=None):
        """Write as ``id,path,label`` CSV; paths are made relative to ``relative_to``."""
        path = Path(path)
        base = Path(relative_to) if relative_to is not None else path.parent
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "path", "label"])
            for e in self.entries:
                w.writerow([e.id, os.path.relpath(e.path, base), e.label])


@dataclass
class GroundTruthMask:
    id: str
    mask: np.ndarray  # uint8 h x w with values in {0, 1}

    def __post_init__(self):
        if self.mask.ndim != 2:
            raise DataError(f"{self.id}: mask must be 2-D")
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError(f"{self.id}: mask values must be 0/1")


class GroundTruthStore:
    """Evaluation-only mapping id -> binary mask.

    Kept apart from manifests so that no training routine can reach the
    pixel-level annotation.
    """

    def __init__(self, masks: Dict[str, np.ndarray]):
        self._masks = dict(masks)

    @classmethod
    def from_dir(cls, mask_dir, ids: Optional[Sequence[str]] = None):
        mask_dir = Path(mask_dir)
        if ids is None:
            ids = sorted(p.stem for p in mask_dir.glob("*.png"))
        return cls({i: read_mask_png(mask_dir / f"{i}.png") for i in ids})

    def __contains__(self, key):
        return key in self._masks

    def __getitem__(self, key) -> np.ndarray:
        return self._masks[key]

    def __len__(self):
        return len(self._masks)

    def ids(self):
        return sorted(self._masks)


@dataclass
class BalancedBatchSpec:
    batch_size: int = 32
    per_class: int = 8

    def __post_init__(self):
        if self.per_class < 1 or self.batch_size % self.per_class:
            raise DataError(
                f"batch size {self.batch_size} is not a multiple of per_class {self.per_class}"
            )

    @property
    def classes_per_batch(self) -> int:
        return self.batch_size // self.per_class


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path, data_root=None, split: str = "train") -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    if data_root is None:
        data_root = os.environ.get(DATA_ROOT_ENV, path.parent)
    data_root = Path(data_root)

    entries, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "path", "label"]:
            raise DataError(f"{path}: header must be 'id,path,label'")
        for row in reader:
            sid = row["id"].strip()
            if sid in seen:
                raise DataError(f"{path}: duplicate id {sid!r}")
            seen.add(sid)
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise DataError(f"{path}: non-integer label {row['label']!r} for id {sid!r}")
            if label < 1:
                raise DataError(f"{path}: label {label} for id {sid!r} must be >= 1")
            img = data_root / row["path"].strip()
            if not img.is_file():
                raise DataError(f"{path}: unresolvable path {img}")
            entries.append(ManifestEntry(sid, img, label))
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return DatasetManifest(entries, max(e.label for e in entries), split)


def split_manifest(manifest: DatasetManifest, n_test: int, seed: int = 0):
    """Random train/test partition, e.g. 10,015 ISIC images -> 8,015 / 2,000."""
    if not 0 < n_test < len(manifest):
        raise DataError(f"cannot hold out {n_test} of {len(manifest)} entries")
    order = np.random.default_rng(seed).permutation(len(manifest))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return manifest.subset(train_idx, "train"), manifest.subset(test_idx, "test")


# ---------------------------------------------------------------------------
# images and masks


def load_image(path, target_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read an RGB image as a float32 3 x h x w array in [0, 1].

    ``target_size`` is (w, h). Resizing is antialiased bilinear and happens
    on the 8-bit image, before scaling.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if target_size is not None and tuple(im.size) != tuple(target_size):
                im = im.resize(tuple(target_size), Image.Resampling.BILINEAR, reducing_gap=None)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def load_sample(entry: ManifestEntry, target_size=None) -> ImageSample:
    return ImageSample(entry.id, load_image(entry.path, target_size), entry.label)


def load_images(manifest: DatasetManifest, target_size=None) -> np.ndarray:
    return np.stack([load_image(e.path, target_size) for e in manifest.entries])


def write_mask_png(path, mask: np.ndarray):
    """Binary mask -> 8-bit PNG with values {0, 255}."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataError("mask values must be 0/1")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255).save(path, optimize=False)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise DataError(f"{path}: mask PNG must contain only 0 and 255")
    return (arr == 255).astype(np.uint8)


def write_saliency_png(path, values: np.ndarray):
    """Saliency in [0, 1] -> 16-bit gray PNG storing round(v * 65535)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0 or values.max() > 1 or not np.isfinite(values).all()):
        raise DataError(f"{path}: saliency values outside [0, 1]")
    q = np.round(values * 65535).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, optimize=False)


def read_saliency_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_per_class: int = 50
    num_classes: int = 4
    image_size: int = 64
    seed: int = 0
    noise_std: float = 0.12
    # per-image low-frequency Gaussian field added to the background
    field_std: float = 0.0
    field_sigma: float = 6.0
    clutter: int = 0
    clutter_radius: Tuple[float, float] = (2.0, 4.0)
    min_cover: float = 0.06
    max_cover: float = 0.25


_SHAPES = ("disk", "square", "triangle", "cross", "diamond", "ring", "hbar", "ellipse")

# (r, g, b) base tint, stripe angle (deg), stripe period (px)
_TEXTURES = (
    ((0.85, 0.25, 0.20), 0.0, 4.0),
    ((0.20, 0.70, 0.30), 90.0, 5.0),
    ((0.25, 0.35, 0.90), 45.0, 4.0),
    ((0.90, 0.80, 0.20), 135.0, 6.0),
    ((0.75, 0.30, 0.80), 30.0, 3.0),
    ((0.20, 0.80, 0.80), 120.0, 5.0),
    ((0.95, 0.55, 0.15), 60.0, 4.0),
    ((0.55, 0.55, 0.55), 150.0, 3.5),
)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "square":
        m = (np.abs(dy) <= r * 0.89) & (np.abs(dx) <= r * 0.89)
    elif kind == "triangle":
        # upward isosceles triangle inscribed in the circle of radius r*1.2
        rr = r * 1.25
        top, bottom = -rr, rr * 0.5
        half_w = (dy - top) / (bottom - top) * rr * 0.95
        m = (dy >= top) & (dy <= bottom) & (np.abs(dx) <= half_w)
    elif kind == "cross":
        a, b = r * 1.05, r * 0.42
        m = ((np.abs(dy) <= a) & (np.abs(dx) <= b)) | ((np.abs(dy) <= b) & (np.abs(dx) <= a))
    elif kind == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r * 1.25
    elif kind == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= (r * 1.1) ** 2) & (d2 >= (r * 0.55) ** 2)
    elif kind == "hbar":
        m = (np.abs(dy) <= r * 0.55) & (np.abs(dx) <= r * 1.3)
    elif kind == "ellipse":
        m = (dy / (r * 0.7)) ** 2 + (dx / (r * 1.3)) ** 2 <= 1.0
    else:  # pragma: no cover
        raise DataError(f"unknown shape {kind}")
    return m


def _extent(kind: str) -> float:
    """Half-extent of each shape in units of r, used to keep it inside the frame."""
    return {"triangle": 1.25, "diamond": 1.25, "hbar": 1.3, "ellipse": 1.3}.get(kind, 1.1)


# shape area divided by the area of the disk of radius r
_AREA = {
    "disk": 1.0,
    "square": 4 * 0.89 ** 2 / np.pi,
    "triangle": 0.75 * 1.9 * 1.25 ** 2 / np.pi,
    "cross": (4 * 1.05 * 0.42 * 2 - 4 * 0.42 ** 2) / np.pi,
    "diamond": 2 * 1.25 ** 2 / np.pi,
    "ring": 1.1 ** 2 - 0.55 ** 2,
    "hbar": 4 * 0.55 * 1.3 / np.pi,
    "ellipse": 0.7 * 1.3,
}


def render_synthetic(cfg: SyntheticConfig):
    """Yield (id, uint8 h x w x 3 image, uint8 mask, label) purely from ``cfg``."""
    if not 2 <= cfg.num_classes <= MAX_SYNTH_CLASSES:
        raise DataError(f"unsupported C={cfg.num_classes}: synthetic data supports 2..{MAX_SYNTH_CLASSES}")
    if cfg.image_size < MIN_SYNTH_SIZE:
        raise DataError(f"image_size {cfg.image_size} too small to place shape (min {MIN_SYNTH_SIZE})")
    if cfg.n_per_class < 1:
        raise DataError("n_per_class must be positive")

    size = cfg.image_size
    rng = np.random.default_rng(cfg.seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def texture(c):
        tint, angle, period = _TEXTURES[c]
        theta = np.deg2rad(angle)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(
            2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase
        )
        t = np.asarray(tint)[None, None, :] * (0.6 + 0.4 * stripes[..., None])
        return t + rng.normal(0.0, cfg.noise_std * 0.5, size=t.shape)

    out = []
    for c in range(cfg.num_classes):
        kind = _SHAPES[c]
        for k in range(cfg.n_per_class):
            cover = rng.uniform(cfg.min_cover, cfg.max_cover)
            r = np.sqrt(cover * size * size / (np.pi * _AREA[kind]))
            margin = _extent(kind) * r + 1
            cy, cx = rng.uniform(margin, size - margin, size=2)
            mask = _shape_mask(kind, size, cy, cx, r)

            img = rng.normal(0.5, cfg.noise_std, size=(size, size, 3))
            if cfg.field_std > 0:
                lf = gaussian_filter(rng.normal(size=(size, size, 1)),
                                     sigma=(cfg.field_sigma, cfg.field_sigma, 0), mode="wrap")
                img = img + cfg.field_std * lf / lf.std()
            # class-agnostic clutter: small blobs wearing any class's texture
            for _ in range(cfg.clutter):
                rc = rng.uniform(*cfg.clutter_radius)
                py, px = rng.uniform(0, size, size=2)
                blob = (yy - py) ** 2 + (xx - px) ** 2 <= rc ** 2
                img = np.where(blob[..., None], texture(int(rng.integers(cfg.num_classes))), img)
            img = np.where(mask[..., None], texture(c), img)
            img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
            out.append((f"c{c + 1}_{k:04d}", img, mask.astype(np.uint8), c + 1))
    return out


def generate_synthetic(cfg: SyntheticConfig, out_dir, split: str = "train"):
    """Render the synthetic set to ``out_dir``.

    Layout: ``images/<id>.png``, ``gt_masks/<id>.png``, ``manifest.csv``.
    Returns the manifest and the ground-truth masks (evaluation only).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries, masks = [], []
    for sid, img, mask, label in render_synthetic(cfg):
        p = out_dir / "images" / f"{sid}.png"
        Image.fromarray(img).save(p, optimize=False)
        write_mask_png(out_dir / "gt_masks" / f"{sid}.png", mask)
        entries.append(ManifestEntry(sid, p, label))
        masks.append(GroundTruthMask(sid, mask))
    manifest = DatasetManifest(entries, cfg.num_classes, split)
    manifest.write(out_dir / "manifest.csv")
    return manifest, masks


# ---------------------------------------------------------------------------
# balanced batches


class BalancedBatchSampler:
    """Draws batches of ``classes_per_batch`` distinct classes x ``per_class`` samples.

    Classes are chosen uniformly without replacement, samples within a class
    uniformly without replacement. Owns its generator; not thread-safe.
    """

    def __init__(self, labels, spec: BalancedBatchSpec, seed=None, rng=None):
        self.labels = np.asarray(labels)
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.by_class = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }
        self.classes = sorted(self.by_class)
        self.eligible = [c for c in self.classes if len(self.by_class[c]) >= spec.per_class]

    def can_sample(self) -> bool:
        return len(self.eligible) >= self.spec.classes_per_batch

    def check(self):
        if self.spec.classes_per_batch > len(self.classes):
            raise DataError(
                f"batch needs {self.spec.classes_per_batch} classes but only "
                f"{len(self.classes)} are present"
            )
        short = [c for c in self.classes if len(self.by_class[c]) < self.spec.per_class]
        if short:
            raise DataError(
                f"classes {short} have fewer than {self.spec.per_class} samples"
            )

    def sample(self, pool=None) -> np.ndarray:
        """Return indices into ``labels`` (optionally restricted to ``pool``)."""
        if pool is None:
            by_class, classes = self.by_class, self.eligible
            if not self.can_sample():
                self.check()
        else:
            sub = self.labels[pool]
            by_class = {int(c): pool[sub == c] for c in np.unique(sub)}
            classes = sorted(c for c, v in by_class.items() if len(v) >= self.spec.per_class)
            if len(classes) < self.spec.classes_per_batch:
                raise DataError("pool cannot supply a balanced batch")
        chosen = self.rng.choice(classes, size=self.spec.classes_per_batch, replace=False)
        idx = [
            self.rng.choice(by_class[int(c)], size=self.spec.per_class, replace=False)
            for c in chosen
        ]
        return np.concatenate(idx)

    def __len__(self):
        return max(1, len(self.labels) // self.spec.batch_size)


def sample_balanced_batch(manifest: DatasetManifest, spec: BalancedBatchSpec, rng,
                          target_size=None) -> List[ImageSample]:
    sampler = BalancedBatchSampler(manifest.labels, spec, rng=rng)
    sampler.check()
    return [load_sample(manifest.entries[i], target_size) for i in sampler.sample()]


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
