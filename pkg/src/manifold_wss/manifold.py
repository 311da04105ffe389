"""Margin-loss metric learning and the divide-and-conquer (subspace) trainer."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import BalancedBatchSampler, BalancedBatchSpec, DataError, write_jsonl
from .nets import DivergenceError, ManifoldNet

log = logging.getLogger(__name__)

PAIR_STRATEGIES = ("all_pairs", "distance_weighted_negatives")


@dataclass
class MarginConfig:
    alpha: float = 0.2
    beta: float = 1.2
    pair_strategy: str = "all_pairs"
    # distance-weighted sampling knobs
    dw_cutoff: float = 0.5
    dw_nonzero_loss_cutoff: float = 1.4

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.beta > self.alpha:
            raise ValueError("beta must exceed alpha")
        if self.pair_strategy not in PAIR_STRATEGIES:
            raise ValueError(f"unknown pair strategy {self.pair_strategy!r}")


class PairLabel(NamedTuple):
    i: int
    j: int
    mu: int  # +1 same class, -1 different


@dataclass
class ManifoldTrainConfig:
    epochs: int = 300
    finetune_epochs: int = 50
    dim: int = 128
    batch_size: int = 32
    per_class: int = 8
    lr: float = 1e-4
    num_subspaces: int = 4
    recluster_every: int = 10
    batches_per_epoch: Optional[int] = None  # default: N // batch_size
    seed: int = 0
    margin: MarginConfig = field(default_factory=MarginConfig)

    def __post_init__(self):
        if isinstance(self.margin, dict):
            self.margin = MarginConfig(**self.margin)
        if self.epochs > 0 and not self.finetune_epochs < self.epochs:
            raise ValueError("finetune_epochs must be smaller than epochs")
        if self.dim % self.num_subspaces:
            raise ValueError(f"d={self.dim} is not divisible by K={self.num_subspaces}")
        BalancedBatchSpec(self.batch_size, self.per_class)

    @property
    def spec(self) -> BalancedBatchSpec:
        return BalancedBatchSpec(self.batch_size, self.per_class)

    @property
    def learner_epochs(self) -> int:
        return self.epochs - self.finetune_epochs


# ---------------------------------------------------------------------------
# loss


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def margin_loss(e_i, e_j, mu: int, cfg: MarginConfig = None):
    """[alpha + mu * (||e_i - e_j|| - beta)]_+ for one pair."""
    cfg = cfg or MarginConfig()
    e_i, e_j = _as_tensor(e_i), _as_tensor(e_j)
    if e_i.shape != e_j.shape:
        raise ValueError("embeddings must have the same length")
    if not (torch.isfinite(e_i).all() and torch.isfinite(e_j).all()):
        raise DivergenceError("non-finite embedding in margin loss")
    d = torch.linalg.vector_norm(e_i - e_j)
    return torch.clamp(cfg.alpha + mu * (d - cfg.beta), min=0.0)


def _pair_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 3 and not isinstance(pairs[0], (int, np.integer)):
        return pairs
    arr = np.asarray([tuple(p) for p in pairs], dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def pair_losses(embeddings, pairs, cfg: MarginConfig = None):
    """Per-pair hinge values as a 1-D tensor (differentiable)."""
    cfg = cfg or MarginConfig()
    ii, jj, mu = _pair_arrays(pairs)
    ii, jj = torch.as_tensor(ii), torch.as_tensor(jj)
    mu = torch.as_tensor(mu, dtype=embeddings.dtype)
    d = torch.linalg.vector_norm(embeddings[ii] - embeddings[jj], dim=1)
    return torch.clamp(cfg.alpha + mu * (d - cfg.beta), min=0.0)


def batch_margin_loss(embeddings, pairs, cfg: MarginConfig = None):
    """Mean margin loss over the pairs whose loss is strictly positive (0 if none)."""
    losses = pair_losses(embeddings, pairs, cfg)
    if losses.numel() == 0:
        raise ValueError("empty pair list")
    active = losses > 0
    if not active.any():
        return embeddings.sum() * 0.0
    return losses[active].mean()


def build_pairs(labels, strategy: str = "all_pairs", embeddings=None, rng=None,
                cfg: MarginConfig = None) -> List[PairLabel]:
    """Pairs (i < j for all_pairs) with mu = +1 iff labels match.

    ``distance_weighted_negatives`` keeps every positive pair and draws one
    negative per anchor (Wu et al. 2017). For unit vectors in R^n the
    pairwise distance density is q(d) ~ d^(n-2) (1 - d^2/4)^((n-3)/2); a
    negative at distance d is drawn with weight 1/q(d), with d clipped below
    at ``dw_cutoff`` and weight zeroed where d >= ``dw_nonzero_loss_cutoff``
    (those pairs would have zero loss anyway).
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("need at least 2 samples to build pairs")
    if strategy == "all_pairs":
        return [PairLabel(i, j, 1 if labels[i] == labels[j] else -1)
                for i in range(n) for j in range(i + 1, n)]
    if strategy != "distance_weighted_negatives":
        raise ValueError(f"unknown pair strategy {strategy!r}")
    if embeddings is None:
        raise ValueError("distance-weighted sampling needs embeddings")
    cfg = cfg or MarginConfig()
    rng = rng if rng is not None else np.random.default_rng()
    emb = embeddings.detach().double().cpu().numpy() if torch.is_tensor(embeddings) else np.asarray(embeddings, float)
    dim = emb.shape[1]
    dist = np.sqrt(np.maximum(((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1), 0.0))
    dist = np.maximum(dist, cfg.dw_cutoff)
    log_w = (2.0 - dim) * np.log(dist) - ((dim - 3) / 2.0) * np.log(np.maximum(1.0 - 0.25 * dist ** 2, 1e-8))

    pairs = [PairLabel(i, j, 1) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]]
    for i in range(n):
        neg = np.flatnonzero(labels != labels[i])
        if neg.size == 0:
            continue
        lw = log_w[i, neg]
        w = np.exp(lw - lw.max()) * (dist[i, neg] < cfg.dw_nonzero_loss_cutoff)
        if w.sum() <= 0:
            w = np.ones_like(w)
        j = int(rng.choice(neg, p=w / w.sum()))
        pairs.append(PairLabel(i, j, -1))
    return pairs


# ---------------------------------------------------------------------------
# subspaces


def split_dims(d: int, k: int):
    """Contiguous equal slices [0, d/k), [d/k, 2d/k), ..."""
    if k < 1 or d % k:
        raise ValueError(f"K={k} does not divide d={d}")
    step = d // k
    return [(i * step, (i + 1) * step) for i in range(k)]


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(1))
    return x[centers].copy()


def _fill_empty(x, assign, centers):
    """Move the farthest point into each empty cluster (in cluster order)."""
    k = len(centers)
    for c in range(k):
        if np.any(assign == c):
            continue
        d2 = ((x - centers[assign]) ** 2).sum(1)
        counts = np.bincount(assign, minlength=k)
        # never steal the only member of another cluster
        d2[counts[assign] <= 1] = -1.0
        far = int(np.argmax(d2))
        assign[far] = c
        centers[c] = x[far]
    return assign


def cluster_embeddings(embeddings, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns 0-based cluster ids, none empty."""
    x = np.asarray(embeddings.detach().cpu().numpy() if torch.is_tensor(embeddings) else embeddings,
                   dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"K={k} exceeds number of samples N={n}")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    assign = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        new = _fill_empty(x, new, centers)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centers[c] = x[assign == c].mean(0)
    return assign.astype(np.int64)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ManifoldNet
    log: List[dict]
    partitions: List[dict]
    batches: List[List[int]]
    holdout_loss_initial: Optional[float] = None
    holdout_loss_final: Optional[float] = None


@torch.no_grad()
def embed_all(model, images, chunk: int = 64):
    was = model.training
    model.eval()
    out = torch.cat([model(images[i:i + chunk]) for i in range(0, len(images), chunk)])
    model.train(was)
    return out


@torch.no_grad()
def _holdout_loss(model, images, labels, cfg: ManifoldTrainConfig):
    emb = embed_all(model, images)
    pairs = build_pairs(labels, "all_pairs")
    return float(batch_margin_loss(emb, pairs, cfg.margin))


def _loss_on(model, x, labels, dims, cfg, pair_rng):
    out = model.forward_all(x)
    if dims is None:
        emb = out["embedding"]
    else:
        emb = out["raw"][:, dims[0]:dims[1]]
        if model.normalize_embeddings:
            emb = F.normalize(emb, dim=1, eps=1e-12)
    pairs = build_pairs(labels, cfg.margin.pair_strategy, embeddings=emb, rng=pair_rng, cfg=cfg.margin)
    losses = pair_losses(emb, pairs, cfg.margin)
    active = losses > 0
    loss = losses[active].mean() if active.any() else emb.sum() * 0.0
    return loss, float(active.float().mean())


def train_dcml(model: ManifoldNet, images: torch.Tensor, labels: Sequence[int],
               cfg: ManifoldTrainConfig, out_dir=None, holdout=None,
               subspaces: bool = True) -> TrainResult:
    """Divide-and-conquer metric learning.

    Learner phase (first ``epochs - finetune_epochs`` epochs): batches are
    drawn from one data cluster at a time, round-robin, and the loss only
    sees that cluster's slice of the embedding. Clusters are recomputed
    from full embeddings every ``recluster_every`` epochs. Full phase: plain
    balanced batches and the loss on the whole embedding.

    With ``subspaces=False`` (or K=1) this is standard metric learning.
    ``holdout`` is an optional (images, labels) pair scored before and after.
    """
    labels = np.asarray(labels)
    k = cfg.num_subspaces if subspaces else 1
    slices = split_dims(cfg.dim, k)
    out_dir = Path(out_dir) if out_dir is not None else None

    batch_rng = np.random.default_rng(cfg.seed)
    pair_rng = np.random.default_rng(cfg.seed + 1)
    sampler = BalancedBatchSampler(labels, cfg.spec, rng=batch_rng)
    sampler.check()
    n_batches = cfg.batches_per_epoch or len(sampler)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    result = TrainResult(model, [], [], [])
    if holdout is not None:
        result.holdout_loss_initial = _holdout_loss(model, holdout[0], holdout[1], cfg)

    def recluster(epoch):
        if k == 1:
            assign = np.zeros(len(labels), dtype=np.int64)
        else:
            assign = cluster_embeddings(embed_all(model, images), k, seed=cfg.seed + epoch)
        snap = {"epoch": epoch, "K": k, "dim_slices": [list(s) for s in slices],
                "cluster_sizes": np.bincount(assign, minlength=k).tolist()}
        result.partitions.append(snap)
        if out_dir is not None and k > 1:
            p = out_dir / "partitions" / f"epoch_{epoch:04d}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(snap, sort_keys=True))
        return assign

    assign = recluster(0) if cfg.learner_epochs > 0 and k > 1 else np.zeros(len(labels), np.int64)
    pools = [np.flatnonzero(assign == c) for c in range(k)]
    step = 0
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        learner = subspaces and epoch <= cfg.learner_epochs
        losses, fractions, fallbacks = [], [], 0
        for _ in range(n_batches):
            cluster = step % k
            dims = slices[cluster] if learner and k > 1 else None
            if learner and k > 1:
                try:
                    idx = sampler.sample(pools[cluster])
                except DataError:
                    fallbacks += 1
                    idx = sampler.sample()
            else:
                idx = sampler.sample()
            step += 1
            result.batches.append(idx.tolist())
            loss, frac = _loss_on(model, images[idx], labels[idx], dims, cfg, pair_rng)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite margin loss at epoch {epoch}, batch {step}: {loss.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            fractions.append(frac)
        if fallbacks:
            log.info("epoch %d: %d batches fell back to the full dataset", epoch, fallbacks)
        reclustered = learner and k > 1 and epoch % cfg.recluster_every == 0 and epoch < cfg.learner_epochs
        if reclustered:
            assign = recluster(epoch)
            pools = [np.flatnonzero(assign == c) for c in range(k)]
        result.log.append({
            "epoch": epoch,
            "phase": "learner" if learner else "full",
            "mean_loss": float(np.mean(losses)),
            "active_pair_fraction": float(np.mean(fractions)),
            "recluster": bool(reclustered),
            "fallback_batches": fallbacks,
        })
    model.eval()
    if holdout is not None:
        result.holdout_loss_final = _holdout_loss(model, holdout[0], holdout[1], cfg)
    if out_dir is not None:
        write_jsonl(out_dir / "train_log.jsonl", result.log)
    return result


def train_ml(model, images, labels, cfg: ManifoldTrainConfig, out_dir=None, holdout=None) -> TrainResult:
    """Standard metric learning: every batch is balanced over the full set, full embedding."""
    return train_dcml(model, images, labels, cfg, out_dir=out_dir, holdout=holdout, subspaces=False)
