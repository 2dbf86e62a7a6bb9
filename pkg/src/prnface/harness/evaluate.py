"""Verification and identification metrics over squared-L2 embedding distances.

A pair (or probe) is accepted at threshold t when its distance is strictly
below t. Sweeps run over every distinct score plus +inf, so the "accept
nothing" and "accept everything" operating points are always available.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateLabelSet, EmptyGallery, ShapeMismatch

FAR_POINTS = (1e-5, 1e-4, 1e-3, 1e-2)
FPIR_POINTS = (0.01, 0.1)
RANKS = (1, 5, 10)


@dataclass
class EvalReport:
    tar_at_far: dict = field(default_factory=dict)
    tpir_at_fpir: dict = field(default_factory=dict)
    rank_n: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport({**self.tar_at_far, **other.tar_at_far}, {**self.tpir_at_fpir, **other.tpir_at_fpir},
                          {**self.rank_n, **other.rank_n}, {**self.thresholds, **other.thresholds})

    def check_invariants(self) -> bool:
        rates = [*self.tar_at_far.values(), *self.tpir_at_fpir.values(), *self.rank_n.values()]
        in_range = all(0.0 <= r <= 1.0 for r in rates)
        tar = [self.tar_at_far[k] for k in sorted(self.tar_at_far)]
        ranks = [self.rank_n[k] for k in sorted(self.rank_n)]
        monotone = all(a <= b for a, b in zip(tar, tar[1:])) and all(a <= b for a, b in zip(ranks, ranks[1:]))
        return in_range and monotone

    def lines(self) -> list[str]:
        """One ``metric, operating_point, value`` record per line."""
        out = [f"tar_at_far, {k:g}, {v!r}" for k, v in sorted(self.tar_at_far.items())]
        out += [f"tpir_at_fpir, {k:g}, {v!r}" for k, v in sorted(self.tpir_at_fpir.items())]
        out += [f"rank_n, {k}, {v!r}" for k, v in sorted(self.rank_n.items())]
        out += [f"threshold_{name}, {k:g}, {v!r}" for (name, k), v in sorted(self.thresholds.items())]
        return out


def squared_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise squared distance of equal-shape (n, d) arrays."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.einsum("nd,nd->n", diff, diff)


def distance_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    p = np.asarray(probes, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    diff = p[:, None, :] - g[None, :, :]
    return np.einsum("pgd,pgd->pg", diff, diff)


def _rate_curve(accepted_scores: np.ndarray, total: int, thresholds: np.ndarray) -> np.ndarray:
    """Fraction of ``total`` items whose score is < t, for each threshold t."""
    if total == 0:
        return np.zeros(len(thresholds))
    return np.searchsorted(np.sort(accepted_scores), thresholds, side="left") / total


def _best_under(hit: np.ndarray, false: np.ndarray, thresholds: np.ndarray, limit: float):
    ok = false <= limit
    k = int(np.argmax(np.where(ok, hit, -1.0)))
    return float(hit[k]), float(thresholds[k])


def verification_rates(scores, same, far_points=FAR_POINTS) -> EvalReport:
    """TAR at each FAR point from pair distances and same/different flags."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.shape != same.shape or scores.ndim != 1:
        raise ShapeMismatch("scores and same flags must be equal-length vectors")
    n_same, n_diff = int(same.sum()), int((~same).sum())
    if n_same == 0 or n_diff == 0:
        raise DegenerateLabelSet("verification needs at least one same and one different pair")
    thresholds = np.append(np.unique(scores), np.inf)
    tar = _rate_curve(scores[same], n_same, thresholds)
    far = _rate_curve(scores[~same], n_diff, thresholds)
    report = EvalReport()
    for f in far_points:
        report.tar_at_far[f], report.thresholds[("tar_at_far", f)] = _best_under(tar, far, thresholds, f)
    return report


def verify_pairs(emb_a, emb_b, same, far_points=FAR_POINTS) -> EvalReport:
    """Verification over pairs given as two aligned (P, d) embedding arrays."""
    emb_a, emb_b = np.asarray(emb_a), np.asarray(emb_b)
    if emb_a.shape != emb_b.shape or emb_a.ndim != 2:
        raise ShapeMismatch(f"pair embeddings must be equal (P, d) arrays: {emb_a.shape}, {emb_b.shape}")
    return verification_rates(squared_l2(emb_a, emb_b), same, far_points)


def all_pairs(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every i < j pair over a labelled set: (first, second, same)."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    return i, j, labels[i] == labels[j]


def identification_rates(dist, gallery_labels, probe_labels, ranks=RANKS, fpir_points=FPIR_POINTS) -> EvalReport:
    """Rank-N over mated probes and open-set TPIR at each FPIR from a (probes, gallery) distance matrix.

    Nearest neighbours are ordered by distance with ties going to the lower
    gallery index. A mated probe counts at threshold t when its nearest
    gallery entry has the right label and lies strictly closer than t; a
    non-mated probe is a false positive when its nearest distance is below t.
    With no non-mated probes FPIR is 0 at every threshold.
    """
    dist = np.asarray(dist, dtype=np.float64)
    g_labels, p_labels = np.asarray(gallery_labels), np.asarray(probe_labels)
    if dist.ndim != 2 or dist.shape[1] == 0:
        raise EmptyGallery("gallery is empty")
    if dist.shape != (len(p_labels), len(g_labels)):
        raise ShapeMismatch(f"distance matrix {dist.shape} vs {len(p_labels)} probes, {len(g_labels)} gallery")
    mated = np.isin(p_labels, g_labels)
    if not mated.any():
        raise DegenerateLabelSet("no probe has a mate in the gallery")
    order = np.argsort(dist, axis=1, kind="stable")
    ranked = g_labels[order]
    report = EvalReport()
    for n in ranks:
        hits = (ranked[:, :n] == p_labels[:, None]).any(axis=1)
        report.rank_n[n] = float(hits[mated].mean())
    nearest = dist[np.arange(len(p_labels)), order[:, 0]]
    correct = mated & (ranked[:, 0] == p_labels)
    thresholds = np.append(np.unique(nearest), np.inf)
    tpir = _rate_curve(nearest[correct], int(mated.sum()), thresholds)
    fpir = _rate_curve(nearest[~mated], int((~mated).sum()), thresholds)
    for f in fpir_points:
        report.tpir_at_fpir[f], report.thresholds[("tpir_at_fpir", f)] = _best_under(tpir, fpir, thresholds, f)
    return report


def identify(gallery, gallery_labels, probes, probe_labels, ranks=RANKS, fpir_points=FPIR_POINTS) -> EvalReport:
    gallery, probes = np.asarray(gallery), np.asarray(probes)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    if probes.ndim != 2 or probes.shape[1] != gallery.shape[1]:
        raise ShapeMismatch(f"probe embeddings {probes.shape} vs gallery {gallery.shape}")
    return identification_rates(distance_matrix(probes, gallery), gallery_labels, probe_labels, ranks, fpir_points)


def mean_templates(embeddings, labels) -> tuple[np.ndarray, np.ndarray]:
    """One mean-pooled template per label, labels ascending."""
    embeddings, labels = np.asarray(embeddings), np.asarray(labels)
    classes = np.unique(labels)
    return np.stack([embeddings[labels == c].mean(axis=0) for c in classes]), classes
