"""Pairwise relational network over per-landmark local features.

A shared relation MLP ``g`` maps every landmark pair (f_i || f_j, optionally
|| s_id) to a relation vector, the relations are summed in ascending pair
order, and a second MLP ``f`` turns the sum into the relational feature.
The identity state s_id comes from an LSTM run over the landmark sequence.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (EmptyRelationList, MissingRelationalFeature, ShapeMismatch,
                     TooFewLandmarks)
from .geometry import LocalFeatureSet
from .numerics import tensor as T
from .numerics.layers import LSTM, MLP, DenseBlock, Linear, Module
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class RelationConfig:
    g_layers: tuple[int, ...] = (32, 32, 32)
    f_layers: tuple[int, ...] = (32, 32, 32)
    lstm_hidden: int = 32
    lstm_layers: int = 1
    sid_width: int = 16
    embed_dim: int = 48
    margin: float = 0.1
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    variant: str = "C"
    n_landmarks: int = 68

    def __post_init__(self):
        for key in ("g_layers", "f_layers", "loss_weights"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        widths = [*self.g_layers, *self.f_layers, self.lstm_hidden, self.lstm_layers,
                  self.sid_width, self.embed_dim]
        if not self.g_layers or not self.f_layers or min(widths) < 1:
            raise ValueError("all relation widths must be >= 1")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ValueError("loss_weights must be three non-negative numbers, not all zero")
        if self.variant not in ("A", "B", "C"):
            raise ValueError(f"variant must be A, B or C, got {self.variant!r}")
        if self.n_landmarks < 2:
            raise TooFewLandmarks("need at least two landmarks")

    @property
    def conditioned(self) -> bool:
        return self.variant == "C"


PAPER_RELATION = RelationConfig(
    g_layers=(1000, 1000, 1000), f_layers=(1000, 1000, 1000),
    lstm_hidden=2048, sid_width=256, embed_dim=1024,
)


@dataclass(frozen=True)
class FeaturePair:
    i: int
    j: int
    value: np.ndarray


@dataclass(frozen=True)
class IdentityState:
    vector: np.ndarray
    provenance: str = ""


def enumerate_pairs(n: int) -> list[tuple[int, int]]:
    if n < 2:
        raise TooFewLandmarks(f"need at least 2 landmarks, got {n}")
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


@dataclass(frozen=True)
class PairIndex:
    first: np.ndarray
    second: np.ndarray
    incidence: tuple[np.ndarray, np.ndarray]


@functools.lru_cache(maxsize=8)
def _pair_index(n: int, dtype_str: str) -> PairIndex:
    pairs = np.array(enumerate_pairs(n), dtype=np.int64)
    first, second = pairs[:, 0], pairs[:, 1]
    eye = np.eye(n, dtype=dtype_str)
    return PairIndex(first, second, (eye[first], eye[second]))


def pair_index(n: int, dtype=np.float64) -> PairIndex:
    return _pair_index(n, np.dtype(dtype).str)


def make_pair(feats: LocalFeatureSet, i: int, j: int, sid: IdentityState | None = None) -> FeaturePair:
    if not i < j:
        raise ValueError("pair indices must satisfy i < j")
    parts = [feats.features[i], feats.features[j]]
    if sid is not None:
        parts.append(np.asarray(sid.vector))
    return FeaturePair(i, j, np.concatenate(parts))


def aggregate(relations) -> np.ndarray:
    """Sum relation vectors in ascending (i, j) order, whatever order they arrive in.

    ``relations`` is a mapping or a sequence of ``((i, j), vector)`` items.
    """
    items = list(relations.items() if isinstance(relations, Mapping) else relations)
    if not items:
        raise EmptyRelationList("no relations to aggregate")
    items.sort(key=lambda kv: tuple(kv[0]))
    stacked = np.stack([np.asarray(v) for _, v in items])
    if stacked.ndim != 2:
        raise ShapeMismatch("relations must be equal-length vectors")
    total = stacked[0].copy()
    for row in stacked[1:]:
        total += row
    return total


class RelationMLP(MLP):
    """The shared relation network; its first layer runs on pairs directly."""

    def pairs(self, feats: Tensor, sid: Tensor | None = None) -> Tensor:
        idx = pair_index(feats.shape[1], feats.dtype)
        first = self.layers[0]
        h = T.pair_affine(feats, first.linear.w, first.linear.b,
                          idx.first, idx.second, idx.incidence, sid)
        h = T.relu(first.bn(h))
        for layer in self.layers[1:]:
            h = layer(h)
        return h


class PRN(Module):
    def __init__(self, feat_dim: int, cfg: RelationConfig, rng: np.random.Generator, conditioned: bool):
        super().__init__()
        self.feat_dim = feat_dim
        self.sid_width = cfg.sid_width if conditioned else 0
        self.g = RelationMLP(2 * feat_dim + self.sid_width, cfg.g_layers, rng)
        self.f = MLP(cfg.g_layers[-1], cfg.f_layers, rng)

    @property
    def out_width(self) -> int:
        return self.f.out_width

    def relations(self, feats: Tensor, sid: Tensor | None = None) -> Tensor:
        """(B, N, C) local features -> (B, P, R) relations in ascending pair order."""
        if feats.data.ndim != 3 or feats.shape[2] != self.feat_dim:
            raise ShapeMismatch(f"expected (B, N, {self.feat_dim}) features, got {feats.shape}")
        if (sid is None) != (self.sid_width == 0):
            raise ShapeMismatch("identity state must be given exactly when the PRN is conditioned")
        if sid is not None and sid.shape != (feats.shape[0], self.sid_width):
            raise ShapeMismatch(f"identity state {sid.shape} != ({feats.shape[0]}, {self.sid_width})")
        return self.g.pairs(feats, sid)

    def __call__(self, feats: Tensor, sid: Tensor | None = None) -> Tensor:
        return self.f(T.sum_axis(self.relations(feats, sid), 1))


def relation_forward(pair: FeaturePair, g: MLP) -> np.ndarray:
    """Relation vector of one pair; batch norm uses running statistics."""
    width = g.layers[0].linear.w.shape[0]
    if pair.value.shape != (width,):
        raise ShapeMismatch(f"pair input {pair.value.shape} does not match relation input width {width}")
    was_training = g.training
    g.eval()
    try:
        out = g(Tensor(pair.value[None].astype(g.layers[0].linear.w.dtype)))
    finally:
        g.train(was_training)
    return out.data[0]


def _single(prn: PRN, feats: LocalFeatureSet, sid) -> np.ndarray:
    was_training = prn.training
    prn.eval()
    try:
        dtype = prn.f.layers[0].linear.w.dtype
        x = Tensor(feats.features[None].astype(dtype))
        s = None if sid is None else Tensor(np.asarray(sid.vector, dtype=dtype)[None])
        return prn(x, s).data[0]
    finally:
        prn.train(was_training)


def prn_forward(feats: LocalFeatureSet, prn: PRN) -> np.ndarray:
    return _single(prn, feats, None)


def prn_plus_forward(feats: LocalFeatureSet, sid: IdentityState, prn: PRN) -> np.ndarray:
    if np.shape(sid.vector) != (prn.sid_width,):
        raise ShapeMismatch(f"identity state length {np.shape(sid.vector)} != {prn.sid_width}")
    return _single(prn, feats, sid)


class IdentityEncoder(Module):
    """LSTM over the landmark sequence, then FC(sid_width) and FC(num_classes)."""

    def __init__(self, feat_dim: int, cfg: RelationConfig, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.lstm = LSTM(feat_dim, cfg.lstm_hidden, rng, cfg.lstm_layers)
        self.state = DenseBlock(cfg.lstm_hidden, cfg.sid_width, rng)
        self.classifier = Linear(cfg.sid_width, num_classes, rng)

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        sid = self.state(self.lstm(feats))
        return sid, self.classifier(sid)


def identity_state(feats: LocalFeatureSet, encoder: IdentityEncoder,
                   provenance: str = "") -> tuple[IdentityState, np.ndarray]:
    was_training = encoder.training
    encoder.eval()
    try:
        dtype = encoder.classifier.w.dtype
        sid, logits = encoder(Tensor(feats.features[None].astype(dtype)))
    finally:
        encoder.train(was_training)
    return IdentityState(sid.data[0], provenance), logits.data[0]


class Fusion(Module):
    """concat(f_g, relational) -> affine -> BN -> ReLU."""

    def __init__(self, global_dim: int, relational_dim: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.block = DenseBlock(global_dim + relational_dim, embed_dim, rng)

    def __call__(self, f_g: Tensor, relational: Tensor) -> Tensor:
        return self.block(T.concat([f_g, relational], axis=-1))


def fuse_model(variant: str, f_g: Tensor, relational: Tensor | None = None,
               fusion: Fusion | None = None) -> Tensor:
    """Embedding for model A (f_g itself), B or C (fused with the relational feature)."""
    if variant == "A":
        return f_g
    if variant not in ("B", "C"):
        raise ValueError(f"unknown variant {variant!r}")
    if relational is None or fusion is None:
        raise MissingRelationalFeature(f"variant {variant} needs a relational feature and a fusion layer")
    return fusion(f_g, relational)


def shared_relation_parameters(prn: PRN) -> list[str]:
    return [name for name, _ in prn.g.named_parameters("g.")]


def stack_features(sets: Iterable[LocalFeatureSet] | Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([s.features if isinstance(s, LocalFeatureSet) else np.asarray(s) for s in sets])
