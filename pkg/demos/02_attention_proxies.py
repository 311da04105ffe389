# Train the attention embedding on synthetic shapes and look at its proxy masks.
# Takes about a minute on one CPU core.

import sys
from pathlib import Path

import numpy as np
import torch

from manifold_wss.cli import emit_overlays
from manifold_wss.dataio import SyntheticConfig, render_synthetic
from manifold_wss.manifold import ManifoldTrainConfig, train_dcml
from manifold_wss.metrics import dice
from manifold_wss.nets import BackboneConfig, ManifoldNet
from manifold_wss.saliency import extract_attention, threshold_map

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

def load(cfg):
    rows = list(render_synthetic(cfg))
    x = np.stack([img.transpose(2, 0, 1) for _, img, _, _ in rows]).astype(np.float32) / 255
    return [r[0] for r in rows], torch.from_numpy(x), np.array([r[3] for r in rows]), np.stack([r[2] for r in rows])

ids, x, y, _ = load(SyntheticConfig(n_per_class=50, num_classes=4, seed=0))
test_ids, tx, ty, tmask = load(SyntheticConfig(n_per_class=10, num_classes=4, seed=1))
print("train", x.shape, "test", tx.shape)

torch.manual_seed(0)
net = ManifoldNet(BackboneConfig("tiny"), dim=128)
cfg = ManifoldTrainConfig(epochs=40, finetune_epochs=10, batch_size=16, per_class=8, lr=3e-4,
                          num_subspaces=2, recluster_every=10)
res = train_dcml(net, x, y, cfg)
for rec in res.log[::5]:
    print(rec["epoch"], rec["phase"], round(rec["mean_loss"], 4), "recluster" if rec["recluster"] else "")

# attention needs only a forward pass
sal = extract_attention(net, tx)
masks = threshold_map(sal, 0.5)
scores = [dice(m, g) for m, g in zip(masks, tmask)]
print("proxy Dice on held-out images: %.3f" % np.mean(scores))
print("attention inside / outside the shape: %.3f / %.3f" % (sal[tmask == 1].mean(), sal[tmask == 0].mean()))

paths = emit_overlays(dict(zip(test_ids[:6], tx[:6].numpy())), dict(zip(test_ids[:6], sal[:6])),
                      dict(zip(test_ids[:6], masks[:6])), out / "overlays")
print("wrote", len(paths), "panels to", out / "overlays")
