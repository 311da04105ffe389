"""Command-line pipeline: one config, one subcommand per stage.

Layout under ``output_dir``::

    synth-gen/{train,eval}/          images, gt_masks, manifest.csv
    train-manifold/model.pt          plus train_log.jsonl, partitions/
    extract-attention/{train,eval}/  saliency/, masks/, proxy_manifest.csv
    train-classifier/model.pt
    gradcam/{train,eval}/
    train-seg/<source>/              model.pt, train_log.jsonl, eval/predictions.csv
    evaluate/<source>_<stage>.json
    report/table.{txt,csv}
    overlays/<source>/<id>.png

Every stage also writes ``config.json``, the fully resolved configuration;
``manifold-wss <stage> --config <dir>/config.json`` re-runs it.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

from . import nets
from .config import ConfigError, PipelineConfig, load_config
from .dataio import (DataError, GroundTruthStore, generate_synthetic, load_images, load_manifest,
                     read_mask_png, read_saliency_png)
from .manifold import train_dcml
from .metrics import DiceReport, compare_table, evaluate
from .nets import Classifier, DivergenceError, ManifoldNet, UNet, load_model, model_meta, save_checkpoint
from .saliency import emit_proxy_dataset, load_proxy_manifest, train_classifier
from .segtrain import load_proxy_pairs, predict_batched, train_unet, write_predictions

log = logging.getLogger("manifold_wss")

STAGES = ("synth-gen", "train-manifold", "extract-attention", "train-classifier", "gradcam",
          "train-seg", "evaluate", "report", "overlays")
SOURCES = ("attention", "gradcam")
SOURCE_STAGE = {"attention": "extract-attention", "gradcam": "gradcam"}


class MissingCheckpoint(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# overlays


def _heat(values):
    import matplotlib

    rgba = matplotlib.colormaps["jet"](np.clip(values, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def _rgb(image):
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return img


def emit_overlays(images: Mapping[str, np.ndarray], saliency: Mapping[str, np.ndarray],
                  masks: Mapping[str, np.ndarray], out_dir):
    """One PNG per id: input | heatmapped saliency | binary mask, side by side."""
    if not (set(images) == set(saliency) == set(masks)):
        raise ValueError("image, saliency and mask ids do not match")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid in sorted(images):
        img, sal, m = _rgb(images[sid]), np.asarray(saliency[sid]), np.asarray(masks[sid])
        if sal.shape != img.shape[:2] or m.shape != img.shape[:2]:
            raise ValueError(f"{sid}: panel inputs differ in size")
        mask_rgb = np.repeat((m > 0).astype(np.uint8)[..., None] * 255, 3, axis=2)
        panel = np.concatenate([img, _heat(sal), mask_rgb], axis=1)
        p = out_dir / f"{sid}.png"
        Image.fromarray(panel).save(p, optimize=False)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# stages


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)

    def stage_dir(self, stage):
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True))
        return d

    def seed(self, stage):
        return self.cfg.seed + STAGES.index(stage)

    def _seed_torch(self, stage):
        torch.manual_seed(self.seed(stage))
        torch.use_deterministic_algorithms(self.cfg.deterministic)

    @staticmethod
    def _need(path, hint):
        path = Path(path)
        if not path.exists():
            raise MissingCheckpoint(f"missing checkpoint: {path} (run `manifold-wss {hint}` first)")
        return path

    # data ------------------------------------------------------------------

    def _manifest(self, which):
        d = self.cfg.data
        if d.synthetic is not None:
            path = self._need(self.root / "synth-gen" / which / "manifest.csv", "synth-gen")
            return load_manifest(path, split="train" if which == "train" else "test")
        path = d.train_manifest if which == "train" else d.eval_manifest
        if not path:
            raise ConfigError(f"data.{which}_manifest is not set")
        split = "train" if which == "train" else ("test" if d.eval_split == "synthetic" else d.eval_split)
        return load_manifest(path, data_root=d.data_root, split=split)

    def _ground_truth(self, ids):
        d = self.cfg.data
        if d.synthetic is not None:
            mask_dir = self.root / "synth-gen" / "eval" / "gt_masks"
        elif d.eval_masks:
            mask_dir = Path(d.eval_masks)
        else:
            raise ConfigError("data.eval_masks is required for evaluation")
        return GroundTruthStore.from_dir(mask_dir, ids)

    def _images(self, manifest):
        return torch.from_numpy(load_images(manifest, tuple(self.cfg.data.image_size)))

    # stages ----------------------------------------------------------------

    def synth_gen(self):
        syn = self.cfg.data.synthetic
        if syn is None:
            raise ConfigError("synth-gen needs data.synthetic")
        out = self.stage_dir("synth-gen")
        train, _ = generate_synthetic(syn, out / "train", "train")
        test_cfg = dataclasses.replace(syn, n_per_class=self.cfg.data.synthetic_test_per_class,
                                       seed=syn.seed + 1)
        evalset, _ = generate_synthetic(test_cfg, out / "eval", "test")
        log.info("synth-gen: %d train / %d eval images", len(train), len(evalset))

    def train_manifold(self):
        cfg = self.cfg
        out = self.stage_dir("train-manifold")
        manifest = self._manifest("train")
        self._seed_torch("train-manifold")
        model = ManifoldNet(cfg.nets.backbone, cfg.nets.attention, cfg.manifold.train.dim,
                            cfg.nets.normalize_embeddings)
        tcfg = dataclasses.replace(cfg.manifold.train, seed=self.seed("train-manifold"))
        res = train_dcml(model, self._images(manifest), manifest.labels, tcfg, out_dir=out,
                         subspaces=cfg.manifold.mode == "dcml")
        save_checkpoint(out / "model.pt", res.model,
                        model_meta(res.model, mode=cfg.manifold.mode, num_classes=manifest.num_classes,
                                   seed=tcfg.seed, epoch=len(res.log)))
        last = res.log[-1] if res.log else {}
        log.info("train-manifold (%s): final loss %.4f", cfg.manifold.mode, last.get("mean_loss", float("nan")))

    def train_classifier(self):
        cfg = self.cfg
        out = self.stage_dir("train-classifier")
        manifest = self._manifest("train")
        self._seed_torch("train-classifier")
        model = Classifier(cfg.nets.backbone, manifest.num_classes)
        ccfg = dataclasses.replace(cfg.classifier, seed=self.seed("train-classifier"))
        recs = train_classifier(model, self._images(manifest), manifest.labels, ccfg, out)
        save_checkpoint(out / "model.pt", model, model_meta(model, seed=ccfg.seed, epoch=len(recs)))
        if recs:
            log.info("train-classifier: train accuracy %.3f", recs[-1]["train_accuracy"])

    def _emit(self, stage, method, ckpt_stage):
        out = self.stage_dir(stage)
        model, _ = load_model(self._need(self.root / ckpt_stage / "model.pt", ckpt_stage))
        self._seed_torch(stage)
        size = tuple(self.cfg.data.image_size)
        for which in ("train", "eval"):
            manifest = self._manifest(which)
            emit_proxy_dataset(model, manifest, self.cfg.extract, out / which, method, size)
        log.info("%s: proxies written to %s", stage, out)

    def extract_attention(self):
        self._emit("extract-attention", "attention", "train-manifold")

    def gradcam(self):
        self._emit("gradcam", "gradcam", "train-classifier")

    def train_seg(self, sources=None):
        cfg = self.cfg
        out = self.stage_dir("train-seg")
        size = tuple(cfg.data.image_size)
        for source in sources or cfg.seg.sources:
            proxy_root = self.root / SOURCE_STAGE[source]
            entries = load_proxy_manifest(
                self._need(proxy_root / "train" / "proxy_manifest.csv", SOURCE_STAGE[source]))
            x, y = load_proxy_pairs(entries, size)
            rng = np.random.default_rng(self.seed("train-seg"))
            order = rng.permutation(len(entries))
            n_val = int(round(cfg.seg.val_fraction * len(entries)))
            val = (x[order[:n_val]], y[order[:n_val]]) if n_val else None
            tr = order[n_val:]
            self._seed_torch("train-seg")
            model = UNet(cfg.nets.unet)
            scfg = dataclasses.replace(cfg.seg.train, seed=self.seed("train-seg"))
            sdir = out / source
            sdir.mkdir(parents=True, exist_ok=True)
            res = train_unet(model, x[tr], y[tr], scfg, val=val, out_dir=sdir)
            save_checkpoint(sdir / "model.pt", res.model, model_meta(res.model, source=source, seed=scfg.seed,
                                                                      epoch=len(res.log), best_epoch=res.best_epoch))
            evalset = self._manifest("eval")
            preds = predict_batched(res.model, self._images(evalset), evalset.ids, cfg.seg.train.batch_size)
            write_predictions(preds, sdir / "eval")
            log.info("train-seg (%s): best epoch %s", source, res.best_epoch)

    def _method_name(self, source):
        if source == "attention":
            _, meta = nets.load_checkpoint(self._need(self.root / "train-manifold" / "model.pt",
                                                      "train-manifold"))
            return ("DCML" if meta.get("mode") == "dcml" else "ML") + " + Attention"
        _, meta = nets.load_checkpoint(self._need(self.root / "train-classifier" / "model.pt",
                                                  "train-classifier"))
        preset = meta["backbone"]["preset"]
        label = {"paper_resnet50_3blocks": "ResNet50", "paper_resnet101_3blocks": "ResNet101"}.get(preset, preset)
        return f"GradCAM ({label})"

    def _read_masks(self, manifest_path, column="mask"):
        import csv

        with open(manifest_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return {r["id"]: read_mask_png(manifest_path.parent / r[column]) for r in rows}

    def evaluate(self):
        cfg = self.cfg
        out = self.stage_dir("evaluate")
        split = cfg.data.eval_split
        notes = {"extract": dataclasses.asdict(cfg.extract)}
        written = 0
        for source in SOURCES:
            name = None
            init = self.root / SOURCE_STAGE[source] / "eval" / "proxy_manifest.csv"
            unet = self.root / "train-seg" / source / "eval" / "predictions.csv"
            for stage, path in (("init_maps", init), ("unet", unet)):
                if not path.is_file():
                    continue
                name = name or self._method_name(source)
                preds = self._read_masks(path)
                report = evaluate(preds, self._ground_truth(sorted(preds)), name, split, stage, notes)
                report.save(out / f"{source}_{stage}.json")
                log.info("evaluate: %s %s mean Dice %.4f", name, stage, report.mean)
                written += 1
        if not written:
            raise MissingCheckpoint("missing checkpoint: no proxy or U-Net predictions to evaluate")

    def report(self):
        out = self.stage_dir("report")
        paths = sorted(p for p in (self.root / "evaluate").glob("*_*.json") if p.name != "config.json")
        if not paths:
            raise MissingCheckpoint("missing checkpoint: no Dice reports (run `manifold-wss evaluate` first)")
        text, table = compare_table([DiceReport.load(p) for p in paths])
        (out / "table.txt").write_text(text + "\n")
        (out / "table.csv").write_text(table)
        print(text)

    def overlays(self):
        out = self.stage_dir("overlays")
        n = self.cfg.overlays
        evalset = self._manifest("eval")
        ids = evalset.ids[:n] if n > 0 else []
        images = load_images(evalset.subset(range(len(ids))), tuple(self.cfg.data.image_size))
        for source in SOURCES:
            root = self.root / SOURCE_STAGE[source] / "eval"
            if not (root / "proxy_manifest.csv").is_file():
                continue
            emit_overlays(dict(zip(ids, images)),
                          {i: read_saliency_png(root / "saliency" / f"{i}.png") for i in ids},
                          {i: read_mask_png(root / "masks" / f"{i}.png") for i in ids},
                          out / source)

    def run(self, stage, **kw):
        fn = getattr(self, stage.replace("-", "_"))
        return fn(**kw)

    def pipeline(self):
        for stage in STAGES:
            if stage == "synth-gen" and self.cfg.data.synthetic is None:
                continue
            log.info("== %s", stage)
            self.run(stage)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="manifold-wss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="YAML or JSON config file")
        sp.add_argument("--preset", choices=("paper", "synthetic"),
                        help="preset used when the config file names none")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. manifold.train.epochs=10")
        return sp

    add("synth-gen", "render the synthetic shapes dataset")
    add("train-manifold", "train the attention embedding").add_argument(
        "--mode", choices=("ml", "dcml"), help="overrides manifold.mode")
    add("extract-attention", "write attention saliency and proxy masks")
    add("train-classifier", "train the GradCAM baseline classifier")
    add("gradcam", "write GradCAM saliency and proxy masks")
    add("train-seg", "train U-Nets on proxy masks").add_argument(
        "--source", choices=SOURCES, action="append", help="proxy source(s); default seg.sources")
    add("evaluate", "score proxies and U-Net predictions against ground truth")
    add("report", "tabulate Dice reports")
    add("overlays", "render input | saliency | mask panels")
    add("pipeline", "run every stage in order")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "mode", None):
            overrides.append(f"manifold.mode={args.mode}")
        preset = args.preset or (None if args.config else "synthetic")
        cfg = load_config(args.config, overrides, preset=preset)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    pipe = Pipeline(cfg)
    try:
        if args.command == "pipeline":
            pipe.pipeline()
        elif args.command == "train-seg":
            pipe.train_seg(args.source)
        else:
            pipe.run(args.command)
    except (ConfigError, DataError, nets.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MissingCheckpoint, DivergenceError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
