"""Independent reference implementations used as test oracles.

Plain Python / numpy loops, written without reference to the package code.
"""

import math

import numpy as np


def margin_loss_scalar(xi, xj, mu, alpha=0.2, beta=1.2):
    d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(xi, xj)))
    return max(0.0, alpha + mu * (d - beta))


def batch_loss_scalar(emb, pairs, alpha=0.2, beta=1.2):
    losses = [margin_loss_scalar(emb[i], emb[j], mu, alpha, beta) for i, j, mu in pairs]
    active = [v for v in losses if v > 0]
    return sum(active) / len(active) if active else 0.0


def all_pairs_loop(labels):
    out = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            out.append((i, j, 1 if labels[i] == labels[j] else -1))
    return out


def threshold_loop(values, t):
    h, w = values.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            if values[y, x] > t:
                out[y, x] = 1
    return out


def dice_sets(a, b):
    sa = {tuple(p) for p in np.argwhere(np.asarray(a) > 0)}
    sb = {tuple(p) for p in np.argwhere(np.asarray(b) > 0)}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def pixel_ce_loop(probs, target, eps=1e-12):
    """probs: (P, h, w); target: (h, w)."""
    _, h, w = probs.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            total -= math.log(max(float(probs[target[y, x], y, x]), eps))
    return total / (h * w)


def gradcam_loop(acts, grads):
    """acts, grads: (c, m, n) numpy."""
    c, m, n = acts.shape
    out = np.zeros((m, n))
    for k in range(c):
        wk = grads[k].mean()
        out += wk * acts[k]
    return np.maximum(out, 0.0)


def gap_loop(f):
    """Per-channel spatial mean of (c, m, n)."""
    return np.array([f[k].sum() / (f.shape[1] * f.shape[2]) for k in range(f.shape[0])])


def central_diff(fn, x, eps=1e-5):
    """Numerical gradient of a scalar fn at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = fn(x)
        x[idx] = old - eps
        lo = fn(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


# values computed by hand, frozen before any package code ran against them
FROZEN = {
    # [0.2 + (0 - 1.2)]+ , [0.2 - (0 - 1.2)]+ , [0.2 + (1.2 - 1.2)]+
    "margin_identical_pos": 0.0,
    "margin_identical_neg": 1.4,
    "margin_at_beta_pos": 0.2,
    "mean_active_0_05_15": 1.0,
    "pairs_32_4x8": (496, 112),
    "ce_uniform_p2": math.log(2.0),
    "ce_single_pixel_fg_01": -math.log(0.1),
    "gradcam_hand": [[1.0, 0.0], [0.0, 0.0]],
    "gap_1357": 4.0,
    "dice_4_4_2": 0.5,
    "mean_dice_1_05": 0.75,
    "schedule_300_50": (250, 251),
}
