"""Checkpoint I/O for whole models and batched inference over dataset splits."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidConfig, MissingPrerequisite, ShapeMismatch
from ..model import PRNFaceModel
from ..numerics import checkpoint
from ..numerics.tensor import Tensor
from .config import RunConfig, load_config

STAGES = ("backbone", "encoder", "prn", "fusion")
STAGE_RECORD = "meta.stages_done"


def sidecar_path(ckpt) -> Path:
    return Path(f"{ckpt}.cfg")


def build_model(cfg: RunConfig) -> PRNFaceModel:
    model = PRNFaceModel(cfg.model, seed=cfg.train.seed)
    model.astype(np.dtype(cfg.train.dtype))
    model.stages_done = set()
    return model


def save_model(model: PRNFaceModel, cfg: RunConfig, path) -> None:
    """Binary checkpoint plus a ``.cfg`` sidecar holding the run configuration."""
    state = dict(model.state_dict())
    state[STAGE_RECORD] = np.array([float(s in model.stages_done) for s in STAGES])
    checkpoint.save(path, state)
    sidecar_path(path).write_text(cfg.to_text())


def load_state(model: PRNFaceModel, path) -> None:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"checkpoint {path} does not exist")
    state = checkpoint.load(path)
    flags = state.pop(STAGE_RECORD, np.zeros(len(STAGES)))
    try:
        model.load_state_dict(state, strict=True)
    except (KeyError, ShapeMismatch) as exc:
        raise InvalidConfig(f"checkpoint {path} does not match the model: {exc}") from exc
    dtype = next(iter(model.parameters())).dtype
    model.astype(dtype)
    model.stages_done = {s for s, f in zip(STAGES, flags) if f}


def load_model(path, cfg: RunConfig | None = None) -> tuple[PRNFaceModel, RunConfig]:
    if cfg is None:
        side = sidecar_path(path)
        if not side.exists():
            raise MissingPrerequisite(f"no configuration sidecar {side} next to the checkpoint")
        cfg = load_config(side)
    model = build_model(cfg)
    load_state(model, path)
    return model, cfg


@dataclass
class Outputs:
    """Per-sample outputs of every component that ran (eval mode)."""
    local: np.ndarray
    f_g: np.ndarray
    backbone_logits: np.ndarray
    sid: np.ndarray | None = None
    sid_logits: np.ndarray | None = None
    relational: np.ndarray | None = None
    relational_logits: np.ndarray | None = None
    embedding: np.ndarray | None = None
    logits: np.ndarray | None = None


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def run_outputs(model: PRNFaceModel, images: np.ndarray, landmarks: np.ndarray,
                through: str = "fusion", batch: int = 64) -> Outputs:
    """Run the model in eval mode up to and including stage ``through``."""
    was = {id(m): m.training for m in model.modules()}
    model.eval()
    dtype = next(iter(model.parameters())).dtype
    last = STAGES.index(through)
    cond = model.cfg.relation.conditioned
    pieces: dict[str, list] = {}

    def put(key, value):
        pieces.setdefault(key, []).append(value.data)

    try:
        for sl in _chunks(len(images), batch):
            local, f_g, logits = model.backbone_outputs(Tensor(images[sl].astype(dtype)), landmarks[sl])
            put("local", local), put("f_g", f_g), put("backbone_logits", logits)
            if last < 1 or model.variant == "A":
                continue
            sid = None
            if cond:
                sid, sid_logits = model.component("encoder")(local)
                put("sid", sid), put("sid_logits", sid_logits)
            if last < 2:
                continue
            rel = model.component("prn")(local, sid)
            put("relational", rel), put("relational_logits", model.prn_head(rel))
            if last < 3:
                continue
            emb = model.fusion(f_g, rel)
            put("embedding", emb), put("logits", model.head(emb))
    finally:
        for m in model.modules():
            m.training = was[id(m)]
    return Outputs(**{k: np.concatenate(v) for k, v in pieces.items()})


def embeddings_and_logits(model: PRNFaceModel, images, landmarks, batch: int = 64):
    """Final embedding and logits of the configured variant."""
    out = run_outputs(model, images, landmarks, "fusion", batch)
    if model.variant == "A":
        return out.f_g, out.backbone_logits
    return out.embedding, out.logits


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))
