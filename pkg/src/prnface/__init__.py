"""Pairwise relational face embeddings on a small numpy autograd stack."""
from . import geometry, losses, numerics, prn
from .backbone import DESK_SMALL, PAPER_FULL, Backbone, BackboneConfig
from .errors import *  # noqa: F401,F403
from .model import ModelConfig, PRNFaceModel
from .prn import PAPER_RELATION, RelationConfig

__version__ = "0.1.0"
