"""Residual bottleneck CNN producing the feature map, the global feature and class logits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.layers import BatchNorm, Conv2d, Linear, Module
from .numerics.tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    """Stem conv -> 3x3/2 max pool -> residual stages -> global average pool -> FC.

    ``stages`` holds (block count, bottleneck width) per stage; a block's
    output has ``width * expansion`` channels. The first stage keeps the
    pooled resolution, every later stage halves it (ceil mode).
    """

    input_size: int = 56
    stem_filters: int = 16
    stages: tuple[tuple[int, int], ...] = ((1, 16), (1, 32), (1, 64))
    expansion: int = 1
    num_classes: int = 16
    stem_kernel: int = 5
    pool_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(b), int(w)) for b, w in self.stages))
        counts = [self.input_size, self.stem_filters, self.expansion, self.num_classes,
                  self.stem_kernel, self.pool_kernel, len(self.stages)]
        if min(counts) < 1 or any(min(s) < 1 for s in self.stages):
            raise ValueError("all backbone counts must be >= 1")

    def spatial_plan(self) -> list[int]:
        """Resolution after the stem, the pool and every stage."""
        size = self.input_size
        plan = [size]
        size = F.same_padding(size, self.pool_kernel, 2)[0]
        plan.append(size)
        for k in range(1, len(self.stages)):
            size = F.same_padding(size, 3, 2)[0]
            plan.append(size)
        return plan

    @property
    def fmap_size(self) -> int:
        return self.spatial_plan()[-1]

    @property
    def fmap_channels(self) -> int:
        return self.stages[-1][1] * self.expansion


PAPER_FULL = BackboneConfig(
    input_size=140, stem_filters=64,
    stages=((3, 64), (4, 128), (23, 256), (3, 512)),
    expansion=4, num_classes=8630,
)
DESK_SMALL = BackboneConfig()
PRESETS = {"paper-full": PAPER_FULL, "desk-small": DESK_SMALL}


class Bottleneck(Module):
    """1x1 -> 3x3 (strided) -> 1x1 with BN+ReLU, plus a projected skip when shapes change."""

    def __init__(self, c_in: int, width: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(c_in, width, 1, 1, rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, stride, rng)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv2d(width, c_out, 1, 1, rng)
        self.bn3 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride, rng)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = T.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(T.add(out, skip))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = Conv2d(3, cfg.stem_filters, cfg.stem_kernel, 1, rng)
        self.stem_bn = BatchNorm(cfg.stem_filters)
        blocks = []
        c_in = cfg.stem_filters
        for s, (count, width) in enumerate(cfg.stages):
            c_out = width * cfg.expansion
            for k in range(count):
                stride = 2 if (s > 0 and k == 0) else 1
                blocks.append(Bottleneck(c_in, width, c_out, stride, rng))
                c_in = c_out
        self.blocks = blocks
        self.head = Linear(cfg.fmap_channels, cfg.num_classes, rng)

    def features(self, images: Tensor) -> Tensor:
        s = self.cfg.input_size
        if images.data.ndim != 4 or images.shape[1:] != (s, s, 3):
            raise ShapeMismatch(f"expected images (B, {s}, {s}, 3), got {images.shape}")
        x = T.relu(self.stem_bn(self.stem(images)))
        x = T.max_pool(x, self.cfg.pool_kernel, 2)
        for block in self.blocks:
            x = block(x)
        return x

    def __call__(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (feature map (B, G, G, C), global feature (B, C), logits (B, K))."""
        fmap = self.features(images)
        f_g = T.spatial_mean(fmap)
        return fmap, f_g, self.head(f_g)


@dataclass(frozen=True)
class GlobalFeature:
    vector: np.ndarray
    source: str


def backbone_forward(model: Backbone, image: np.ndarray, source: str = "backbone"):
    """Single-image inference: (fmap (G, G, C), GlobalFeature, logits (K,))."""
    image = np.asarray(image, dtype=model.head.w.dtype)
    fmap, f_g, logits = model(Tensor(image[None]))
    return fmap.data[0], GlobalFeature(f_g.data[0], source), logits.data[0]


def freeze(model: Module) -> Module:
    """Mark every parameter frozen and switch batch norm to running statistics."""
    return model.freeze()
