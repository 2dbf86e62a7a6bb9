"""Triplet ratio loss, pairwise loss, softmax loss and their weighted sum.

Loss functions take stacked (T, d) anchor/positive/negative arrays and
return the scalar loss with the gradient for each input. Kinks (the hinge
and zero-length distances) get subgradient 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyTripletSet, NoValidTriplet, ShapeMismatch
from .numerics import functional as F

STRATEGIES = ("all-valid", "random-k", "semi-hard")


@dataclass(frozen=True)
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


@dataclass
class LossReport:
    l_t: float
    l_p: float
    l_s: float
    joint: float
    triplets: int
    active_triplets: int

    def record(self, step: int) -> str:
        return json.dumps({"step": step, "l_t": self.l_t, "l_p": self.l_p, "l_s": self.l_s,
                           "joint": self.joint, "active_triplets": self.active_triplets})


def stack_triplets(triplets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    triplets = list(triplets)
    if not triplets:
        raise EmptyTripletSet("no triplets")
    return (np.stack([t.anchor for t in triplets]),
            np.stack([t.positive for t in triplets]),
            np.stack([t.negative for t in triplets]))


def _as_float(x):
    arr = np.asarray(x)
    return arr if arr.dtype.kind == "f" else arr.astype(np.float64)


def _check(*arrays):
    if arrays[0].ndim != 2 or arrays[0].shape[0] == 0:
        raise EmptyTripletSet("no triplets")
    for a in arrays[1:]:
        if a.shape != arrays[0].shape:
            raise ShapeMismatch(f"triplet members differ in shape: {a.shape} vs {arrays[0].shape}")


def _scale(reduction: str, count: int) -> float:
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / count
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def _unit(diff, dist):
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)


def triplet_ratio_terms(anchor, positive, negative, margin: float) -> np.ndarray:
    d_ap = np.linalg.norm(anchor - positive, axis=-1)
    d_an = np.linalg.norm(anchor - negative, axis=-1)
    return np.maximum(0.0, 1.0 - d_an / (d_ap + margin))


def triplet_ratio_loss(anchor, positive, negative, margin: float, reduction: str = "sum"):
    """sum_T max(0, 1 - |a - n| / (|a - p| + m)) with unsquared Euclidean distances.

    Returns ``(loss, (d_anchor, d_positive, d_negative), active_count)``.
    """
    anchor, positive, negative = _as_float(anchor), _as_float(positive), _as_float(negative)
    _check(anchor, positive, negative)
    if not margin > 0:
        raise ValueError("margin must be positive")
    scale = _scale(reduction, anchor.shape[0])
    diff_p = anchor - positive
    diff_n = anchor - negative
    d_ap = np.linalg.norm(diff_p, axis=-1)
    d_an = np.linalg.norm(diff_n, axis=-1)
    denom = d_ap + margin
    terms = 1.0 - d_an / denom
    active = terms > 0
    loss = float(np.where(active, terms, 0.0).sum() * scale)
    # d term / d d_an = -1/denom ; d term / d d_ap = d_an / denom^2
    c_n = np.where(active, -1.0 / denom, 0.0) * scale
    c_p = np.where(active, d_an / denom ** 2, 0.0) * scale
    u_p = _unit(diff_p, d_ap)
    u_n = _unit(diff_n, d_an)
    g_pos_dist = c_p[:, None] * u_p
    g_neg_dist = c_n[:, None] * u_n
    return loss, (g_pos_dist + g_neg_dist, -g_pos_dist, -g_neg_dist), int(active.sum())


def pairwise_loss(anchor, positive, reduction: str = "sum"):
    """sum_T |a - p|^2. Returns ``(loss, (d_anchor, d_positive))``."""
    anchor, positive = _as_float(anchor), _as_float(positive)
    _check(anchor, positive)
    scale = _scale(reduction, anchor.shape[0])
    diff = anchor - positive
    loss = float((diff * diff).sum() * scale)
    g = 2.0 * scale * diff
    return loss, (g, -g)


def joint_loss(embeddings, logits, labels, triplet_idx, weights=(1.0, 1.0, 1.0),
               margin: float = 0.1, reduction: str = "sum"):
    """Weighted sum w_t * L_t + w_p * L_p + w_s * L_s over one batch.

    ``triplet_idx`` is an int array (T, 3) of (anchor, positive, negative)
    rows into ``embeddings``. Returns ``(LossReport, d_embeddings, d_logits)``.
    """
    w_t, w_p, w_s = (float(w) for w in weights)
    embeddings = np.asarray(embeddings)
    triplet_idx = np.asarray(triplet_idx, dtype=np.int64).reshape(-1, 3)
    d_emb = np.zeros_like(embeddings)
    l_t = l_p = 0.0
    active = 0
    if w_t or w_p:
        if triplet_idx.shape[0] == 0:
            raise EmptyTripletSet("triplet terms are weighted but no triplets were mined")
        a, p, n = (embeddings[triplet_idx[:, k]] for k in range(3))
        l_t, (ga, gp, gn), active = triplet_ratio_loss(a, p, n, margin, reduction)
        l_p, (pa, pp) = pairwise_loss(a, p, reduction)
        for col, g in ((0, w_t * ga + w_p * pa), (1, w_t * gp + w_p * pp), (2, w_t * gn)):
            np.add.at(d_emb, triplet_idx[:, col], g)
    l_s, d_logits = F.softmax_cross_entropy(np.asarray(logits), labels)
    d_logits = w_s * d_logits
    joint = w_t * l_t + w_p * l_p + w_s * l_s
    report = LossReport(l_t, l_p, l_s, joint, int(triplet_idx.shape[0]), active)
    return report, d_emb, d_logits


def _pairwise_distances(x):
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    return np.sqrt(d2)


def mine_triplet_indices(embeddings, labels, strategy: str = "random-k", seed: int = 0,
                         k: int = 1, margin: float = 0.1) -> np.ndarray:
    """Index triplets (anchor, positive, negative) drawn from one batch.

    ``all-valid`` enumerates every valid triplet; ``random-k`` draws k
    (positive, negative) pairs per anchor; ``semi-hard`` takes, for every
    anchor-positive pair, the closest negative that is farther than the
    positive yet still inside the active region of the ratio loss, falling
    back to the hardest negative.
    """
    labels = np.asarray(labels)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown mining strategy {strategy!r}")
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    neg_mask = ~same
    anchors = [a for a in range(n) if pos_mask[a].any() and neg_mask[a].any()]
    if not anchors:
        raise NoValidTriplet("need at least two classes and a class with two samples")
    rows = []
    if strategy == "all-valid":
        for a in anchors:
            for p in np.flatnonzero(pos_mask[a]):
                for q in np.flatnonzero(neg_mask[a]):
                    rows.append((a, p, q))
    elif strategy == "random-k":
        rng = np.random.default_rng(seed)
        for a in anchors:
            pos = np.flatnonzero(pos_mask[a])
            neg = np.flatnonzero(neg_mask[a])
            for _ in range(k):
                rows.append((a, pos[rng.integers(len(pos))], neg[rng.integers(len(neg))]))
    else:
        dist = _pairwise_distances(np.asarray(embeddings, dtype=np.float64))
        for a in anchors:
            neg = np.flatnonzero(neg_mask[a])
            for p in np.flatnonzero(pos_mask[a]):
                d_ap = dist[a, p]
                d_neg = dist[a, neg]
                window = (d_neg > d_ap) & (d_neg < d_ap + margin)
                pool = neg[window] if window.any() else neg
                rows.append((a, p, pool[np.argmin(dist[a, pool])]))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def mine_triplets(embeddings, labels, strategy: str = "random-k", seed: int = 0,
                  k: int = 1, margin: float = 0.1) -> list[Triplet]:
    embeddings = np.asarray(embeddings)
    idx = mine_triplet_indices(embeddings, labels, strategy, seed, k, margin)
    return [Triplet(embeddings[a], embeddings[p], embeddings[q]) for a, p, q in idx]
