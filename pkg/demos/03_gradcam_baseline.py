# GradCAM on a plain classifier, same data and threshold as the attention proxies.

import numpy as np
import torch

from manifold_wss.dataio import SyntheticConfig, render_synthetic
from manifold_wss.metrics import dice
from manifold_wss.nets import BackboneConfig, Classifier
from manifold_wss.saliency import ClassifierTrainConfig, ExtractConfig, gradcam, gradcam_map, threshold_map, train_classifier

# the weighted sum by hand first
acts = torch.tensor([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [0.0, 0.0]]])
grads = torch.stack([torch.ones(2, 2), -torch.ones(2, 2)])
print("1*A1 - 1*A2, rectified:", gradcam_map(acts, grads).tolist())

def load(cfg):
    rows = list(render_synthetic(cfg))
    x = np.stack([img.transpose(2, 0, 1) for _, img, _, _ in rows]).astype(np.float32) / 255
    return torch.from_numpy(x), np.array([r[3] for r in rows]), np.stack([r[2] for r in rows])

x, y, _ = load(SyntheticConfig(n_per_class=50, num_classes=4, seed=0))
tx, ty, tmask = load(SyntheticConfig(n_per_class=10, num_classes=4, seed=1))

torch.manual_seed(0)
clf = Classifier(BackboneConfig("tiny"), 4)
recs = train_classifier(clf, x, y, ClassifierTrainConfig(epochs=20, batch_size=16, lr=1e-3))
print("train accuracy:", recs[-1]["train_accuracy"])

for target in ("true_label", "predicted"):
    cam = gradcam(clf, tx, ty, ExtractConfig(target_class=target))
    score = np.mean([dice(m, g) for m, g in zip(threshold_map(cam, 0.5), tmask)])
    print(f"GradCAM ({target}) proxy Dice: {score:.3f}")

# without max-normalization the raw scale is arbitrary, so T=0.5 means little
raw = gradcam(clf, tx, ty, ExtractConfig(gradcam_normalize="none"))
print("raw GradCAM range: %.3g .. %.3g" % (raw.min(), raw.max()))
