# Margin loss on a handful of 2-D points, then the pair bookkeeping for a balanced batch.

import numpy as np
import torch

from manifold_wss.manifold import MarginConfig, batch_margin_loss, build_pairs, margin_loss, pair_losses

cfg = MarginConfig()  # alpha=0.2, beta=1.2
print("alpha, beta:", cfg.alpha, cfg.beta)

a = torch.tensor([0.0, 0.0])
for d in (0.0, 0.5, 1.0, 1.2, 1.4, 2.0):
    b = torch.tensor([d, 0.0])
    print(f"d={d:.1f}  same class: {margin_loss(a, b, +1).item():.3f}  "
          f"different class: {margin_loss(a, b, -1).item():.3f}")
# similar pairs stop contributing once d <= beta - alpha = 1.0,
# dissimilar pairs once d >= beta + alpha = 1.4

# a 32-sample batch: 4 classes x 8 samples
labels = np.repeat([1, 2, 3, 4], 8)
pairs = build_pairs(labels)
print("pairs:", len(pairs), "positives:", sum(p.mu == 1 for p in pairs))

emb = torch.nn.functional.normalize(torch.randn(32, 128), dim=1)
losses = pair_losses(emb, pairs)
print("active pairs:", int((losses > 0).sum()), "of", len(pairs))
print("batch loss (mean over active):", batch_margin_loss(emb, pairs).item())

# random unit vectors in 128-D sit about sqrt(2) apart, so negatives are
# nearly inactive while every positive pair is active
d = torch.cdist(emb, emb)
same = torch.from_numpy(labels[:, None] == labels[None])
print("mean distance same/different:", d[same & ~torch.eye(32, dtype=bool)].mean().item(),
      d[~same].mean().item())
