"""Model A / B / C assembled from the backbone, identity encoder, PRN and fusion layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import MissingPrerequisite
from .geometry import RoiSpec, landmark_cells, window_offsets
from .numerics import tensor as T
from .numerics.layers import Linear, Module
from .numerics.tensor import Tensor
from .prn import PRN, Fusion, IdentityEncoder, RelationConfig, fuse_model


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    region_fmap: int = 1

    @property
    def roi(self) -> RoiSpec:
        return RoiSpec(input_size=self.backbone.input_size, fmap_size=self.backbone.fmap_size,
                       region_fmap=self.region_fmap)

    @property
    def variant(self) -> str:
        return self.relation.variant


class PRNFaceModel(Module):
    """Parameters are grouped by prefix: ``backbone``, ``encoder``, ``prn``,
    ``prn_head``, ``fusion`` and ``head``. Model A only has the backbone."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bcfg, rcfg = cfg.backbone, cfg.relation
        channels = bcfg.fmap_channels
        self.backbone = Backbone(bcfg, rng)
        self.encoder = self.prn = self.prn_head = self.fusion = self.head = None
        if rcfg.variant in ("B", "C"):
            if rcfg.conditioned:
                self.encoder = IdentityEncoder(channels, rcfg, bcfg.num_classes, rng)
            self.prn = PRN(channels, rcfg, rng, conditioned=rcfg.conditioned)
            self.prn_head = Linear(self.prn.out_width, bcfg.num_classes, rng)
            self.fusion = Fusion(channels, self.prn.out_width, rcfg.embed_dim, rng)
            self.head = Linear(rcfg.embed_dim, bcfg.num_classes, rng)
        self.name_parameters()

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def component(self, name: str) -> Module:
        part = getattr(self, name, None)
        if part is None:
            raise MissingPrerequisite(f"variant {self.variant} has no {name!r} component")
        return part

    def cells(self, landmarks: np.ndarray) -> np.ndarray:
        return landmark_cells(landmarks, self.cfg.roi)

    def local_features(self, fmap: Tensor, landmarks: np.ndarray) -> Tensor:
        offsets = None if self.cfg.region_fmap == 1 else window_offsets(self.cfg.region_fmap)
        return T.gather_cells(fmap, self.cells(landmarks), offsets)

    def backbone_outputs(self, images: Tensor, landmarks: np.ndarray):
        """(local features (B, N, C), f_g (B, C), backbone logits (B, K))."""
        fmap, f_g, logits = self.backbone(images)
        return self.local_features(fmap, landmarks), f_g, logits

    def relational(self, local: Tensor) -> Tensor:
        sid = None
        if self.cfg.relation.conditioned:
            sid, _ = self.component("encoder")(local)
        return self.component("prn")(local, sid)

    def embed_from(self, local: Tensor, f_g: Tensor) -> Tensor:
        if self.variant == "A":
            return fuse_model("A", f_g)
        return fuse_model(self.variant, f_g, self.relational(local), self.fusion)

    def __call__(self, images: Tensor, landmarks: np.ndarray) -> tuple[Tensor, Tensor]:
        """Full forward: (embedding, logits) for the configured variant."""
        local, f_g, logits = self.backbone_outputs(images, landmarks)
        if self.variant == "A":
            return f_g, logits
        emb = self.embed_from(local, f_g)
        return emb, self.head(emb)
