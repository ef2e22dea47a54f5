"""Analysis battery: masking robustness, PGD, effective RF, similarity stats.

Every probe is read-only over a trained (or random) network snapshot and
deterministic given its rng. Results come back as plain dicts so callers can
serialize them however they like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_MASK_FRACTIONS = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_ERF_THRESHOLDS = (0.05, 0.32)


# ---------------------------------------------------------------------------
# internal masking
# ---------------------------------------------------------------------------

def masked_pool(grid_rows, keep, zero_fill=False):
    """Pool an (n_cells, C) grid over the kept cells.

    ``keep`` is a boolean vector; the default renormalizes by survivor count
    (mean of survivors), ``zero_fill`` divides by the full cell count instead.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (grid_rows.shape[0],):
        raise ValueError("keep mask must have one entry per cell")
    if not keep.any():
        raise ValueError("at least one cell must survive")
    total = grid_rows.shape[0] if zero_fill else keep.sum()
    return grid_rows[keep].sum(axis=0) / total


def _local_grids(nets, images, batch=64):
    grids = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            out = nets.backbone(Tensor(images[i : i + batch]), mode="eval")
            grids.append(out.local.data.copy())
    return np.concatenate(grids, axis=0)


def masking_robustness(nets, probe, images, labels, fractions=DEFAULT_MASK_FRACTIONS,
                       rng=None, zero_fill=False):
    """Probe accuracy after discarding random grid cells before pooling.

    Returns per-fraction accuracies, their average, and the clean accuracy.
    """
    fractions = tuple(sorted(fractions))
    if any(not 0.0 <= f < 1.0 for f in fractions):
        raise ValueError("masking fractions must lie in [0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = np.asarray(labels)
    grids = _local_grids(nets, images)
    n_im, c = grids.shape[:2]
    cells = grids.shape[2] * grids.shape[3]
    rows = grids.transpose(0, 2, 3, 1).reshape(n_im, cells, c)

    def accuracy(pooled):
        pred = probe.predict(Tensor(pooled.astype(np.float32)))
        return float((pred == labels).mean())

    clean = accuracy(rows.mean(axis=1))
    per_fraction = {}
    for frac in fractions:
        drop = min(cells - 1, int(round(frac * cells)))
        pooled = np.empty((n_im, c), dtype=rows.dtype)
        for i in range(n_im):
            keep = np.ones(cells, dtype=bool)
            keep[rng.choice(cells, size=drop, replace=False)] = False
            pooled[i] = masked_pool(rows[i], keep, zero_fill=zero_fill)
        per_fraction[frac] = accuracy(pooled)
    return {
        "clean": clean,
        "per_fraction": per_fraction,
        "average": float(np.mean(list(per_fraction.values()))) if per_fraction else clean,
    }


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------

@dataclass
class AttackSpec:
    epsilon: float
    gamma: float
    iterations: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.gamma > self.epsilon:
            raise ValueError("gamma must not exceed epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


def default_attack_grid():
    """The published evaluation grid of (epsilon, gamma, iterations) specs."""
    specs = []
    for eps in (0.003, 0.01, 0.03, 0.1):
        for div in (40, 10):
            for iters in (1, 5):
                specs.append(AttackSpec(epsilon=eps, gamma=eps / div, iterations=iters))
    return specs


def pgd_attack(logits_fn, images, labels, spec: AttackSpec, batch=32):
    """Sign-step l-inf PGD against a differentiable ``logits_fn``.

    ``logits_fn`` maps an NCHW image Tensor to class logits. Returns the
    adversarial accuracy plus the worst observed perturbation norm.
    """
    labels = np.asarray(labels)
    images = np.asarray(images, dtype=np.float32)
    correct = 0
    worst_delta = 0.0
    for b in range(0, len(images), batch):
        x0 = images[b : b + batch]
        y = labels[b : b + batch]
        x = x0.copy()
        for _ in range(spec.iterations):
            xt = Tensor(x, requires_grad=True)
            with T.tape():
                logits = logits_fn(xt)
                onehot = np.zeros(logits.data.shape, dtype=np.float32)
                onehot[np.arange(len(y)), y] = 1.0
                logp = T.log_softmax(logits)
                loss = T.mul(T.tensor_mean(T.tensor_sum(T.mul(logp, Tensor(onehot)), axis=1)), -1.0)
                T.backward(loss)
            if spec.epsilon > 0.0:
                x = x + spec.gamma * np.sign(xt.grad.data)
                x = np.clip(x, x0 - spec.epsilon, x0 + spec.epsilon)
                x = np.clip(x, 0.0, 1.0).astype(np.float32)
        delta = np.abs(x - x0).max() if len(x0) else 0.0
        worst_delta = max(worst_delta, float(delta))
        assert worst_delta <= spec.epsilon + 1e-6
        with T.no_grad():
            pred = np.argmax(logits_fn(Tensor(x)).data, axis=1)
        correct += int((pred == y).sum())
    return {
        "accuracy": correct / len(images),
        "max_perturbation": worst_delta,
        "epsilon": spec.epsilon,
        "gamma": spec.gamma,
        "iterations": spec.iterations,
    }


def probe_logits_fn(nets, probe, eval_layer="patch"):
    """Differentiable image -> logits map through backbone and probe."""

    def fn(x):
        out = nets.backbone(x, mode="eval")
        feats = out.global_pooled if eval_layer == "patch" else out.global_
        return probe.logits(feats)

    return fn


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------

def erf_stats(nets, images, positions=None, thresholds=DEFAULT_ERF_THRESHOLDS, stride2=False):
    """Saliency-support statistics of local representations.

    For each image and probed grid cell, backpropagate the summed cell
    activation, reduce |gradient| over channels by max, normalize by the map
    maximum and count pixels above each threshold. Returns the square roots
    of the counts, shaped (threshold -> list over image x position).
    """
    thresholds = tuple(sorted(thresholds))
    images = np.asarray(images, dtype=np.float32)
    with T.no_grad():
        probe_out = nets.backbone(Tensor(images[:1]), mode="eval")
    side = probe_out.local.data.shape[2]
    if positions is None:
        step = 2 if stride2 else max(1, side // 2)
        coords = list(range(0, side, step))
        positions = [(r, c) for r in coords for c in coords]
    if not positions:
        raise ValueError("at least one probe position is required")
    for r, c in positions:
        if not (0 <= r < side and 0 <= c < side):
            raise ValueError(f"position {(r, c)} outside the {side}x{side} grid")

    sqrt_counts = {t: [] for t in thresholds}
    for img in images:
        for r, c in positions:
            x = Tensor(img[None], requires_grad=True)
            with T.tape():
                out = nets.backbone(x, mode="eval")
                mask = np.zeros_like(out.local.data)
                mask[0, :, r, c] = 1.0
                T.backward(T.tensor_sum(T.mul(out.local, Tensor(mask))))
            sal = np.abs(x.grad.data[0]).max(axis=0)
            peak = sal.max()
            if peak > 0:
                sal = sal / peak
            for t in thresholds:
                sqrt_counts[t].append(float(np.sqrt((sal > t).sum())))
    return {
        "thresholds": thresholds,
        "sqrt_counts": sqrt_counts,
        "mean": {t: float(np.mean(v)) for t, v in sqrt_counts.items()},
    }


# ---------------------------------------------------------------------------
# similarity correlation
# ---------------------------------------------------------------------------

def _normalized_rows(mat, eps=1e-12):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, eps)


def intra_image_similarity(grid):
    """Mean cosine over distinct cell pairs of one (C, n, n) grid."""
    c = grid.shape[0]
    rows = grid.reshape(c, -1).T
    cells = rows.shape[0]
    if cells < 2:
        raise ValueError("intra-image similarity needs at least 2 cells")
    unit = _normalized_rows(rows)
    m = unit.sum(axis=0)
    total = float(m @ m)  # sum over all ordered pairs incl. self
    return (total - cells) / (cells * (cells - 1))


def similarity_correlation(nets, images, pairs=None, rng=None, max_pairs=500):
    """Global-vs-local similarity coupling across image pairs.

    For each pair: the cosine of pooled globals and the mean cosine over all
    cross-image cell pairs. Returns their Pearson correlation, the scatter
    data, and the mean intra-image cell-pair cosine. A degenerate variance
    yields ``pearson: None``.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) < 2:
        raise ValueError("similarity correlation needs at least 2 images")
    rng = rng if rng is not None else np.random.default_rng(0)
    grids = _local_grids(nets, images)
    n_im, c = grids.shape[:2]
    rows = grids.transpose(0, 2, 3, 1).reshape(n_im, -1, c)
    unit_mean = np.stack([_normalized_rows(r).mean(axis=0) for r in rows])
    globals_ = _normalized_rows(rows.mean(axis=1))

    if pairs is None:
        pairs = [tuple(rng.choice(n_im, size=2, replace=False)) for _ in range(max_pairs)]
    global_sims, local_sims = [], []
    for a, b in pairs:
        global_sims.append(float(globals_[a] @ globals_[b]))
        local_sims.append(float(unit_mean[a] @ unit_mean[b]))
    global_sims = np.array(global_sims)
    local_sims = np.array(local_sims)

    gs, ls = global_sims - global_sims.mean(), local_sims - local_sims.mean()
    denom = np.sqrt((gs * gs).sum() * (ls * ls).sum())
    pearson = float((gs * ls).sum() / denom) if denom > 1e-12 else None

    intra = float(np.mean([intra_image_similarity(g) for g in grids]))
    return {
        "pearson": pearson,
        "mean_intra_image_similarity": intra,
        "global_sims": global_sims.tolist(),
        "local_sims": local_sims.tolist(),
    }


# ---------------------------------------------------------------------------
# minimum image portion
# ---------------------------------------------------------------------------

def total_min_portion(rf_side, image, c_min):
    """Smallest image fraction feeding a co-occurrence pair: min(1, RF^2/area) * c_min."""
    ix, iy = image
    if rf_side <= 0 or ix <= 0 or iy <= 0:
        raise ValueError("dimensions must be positive")
    if not 0.0 < c_min <= 1.0:
        raise ValueError("c_min must lie in (0, 1]")
    return min(1.0, (rf_side * rf_side) / (ix * iy)) * c_min
