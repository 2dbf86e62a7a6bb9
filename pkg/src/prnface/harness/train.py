"""Staged SGD training: backbone, identity encoder, relation network, fusion.

Each stage trains its own components with every other component frozen
(eval-mode batch norm, no gradient). Inputs that only depend on frozen
components are computed once per stage rather than once per step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from ..errors import DivergedLoss, MissingPrerequisite, NonFiniteValue
from ..losses import LossReport, joint_loss, mine_triplet_indices
from ..model import PRNFaceModel
from ..numerics import tensor as T
from ..numerics.optim import sgd_step
from ..numerics.tensor import Tensor
from .config import RunConfig
from .data import Dataset
from .pipeline import STAGES, accuracy, run_outputs

TRAINABLE = {
    "backbone": ("backbone",),
    "encoder": ("encoder",),
    "prn": ("prn", "prn_head"),
    "fusion": ("fusion", "head"),
}


def prerequisites(stage: str, variant: str) -> tuple[str, ...]:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    cond = ("encoder",) if variant == "C" else ()
    return {"backbone": (), "encoder": ("backbone",), "prn": ("backbone", *cond),
            "fusion": ("backbone", *cond, "prn")}[stage]


@dataclass
class TrainResult:
    stage: str
    steps: list[LossReport] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else float("nan")


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def pk_batches(labels: np.ndarray, batch_size: int, per_id: int, rng: np.random.Generator):
    """P identities x K samples per batch, as many batches as a plain epoch has."""
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    p = max(2, min(len(classes), batch_size // per_id))
    for _ in range(math.ceil(len(labels) / batch_size)):
        ids = rng.choice(classes, size=p, replace=False)
        yield np.concatenate([rng.choice(members[c], size=per_id, replace=len(members[c]) < per_id)
                              for c in ids])


def _prepare(model: PRNFaceModel, stage: str):
    for pre in prerequisites(stage, model.variant):
        if pre not in model.stages_done:
            raise MissingPrerequisite(f"stage {stage!r} needs a trained {pre!r} stage first")
    for name in TRAINABLE[stage]:
        model.component(name)
    model.freeze()
    for name in TRAINABLE[stage]:
        model.component(name).unfreeze()


def _stage_functions(model: PRNFaceModel, stage: str, data: Dataset, dtype):
    """(forward(split_arrays, idx) -> (embedding, logits), train arrays, val arrays)."""
    splits = {}
    if stage == "backbone":
        for name in ("train", "val"):
            s = getattr(data, name)
            splits[name] = {"images": s.images(dtype), "landmarks": s.landmarks}

        def forward(arr, idx):
            _, f_g, logits = model.backbone(Tensor(arr["images"][idx]))
            return f_g, logits

        return forward, splits["train"], splits["val"]

    for name in ("train", "val"):
        s = getattr(data, name)
        out = run_outputs(model, s.images(dtype), s.landmarks, through=prerequisites(stage, model.variant)[-1])
        splits[name] = out
    cond = model.cfg.relation.conditioned

    if stage == "encoder":
        def forward(arr, idx):
            return model.encoder(Tensor(arr.local[idx]))
    elif stage == "prn":
        def forward(arr, idx):
            sid = Tensor(arr.sid[idx]) if cond else None
            rel = model.prn(Tensor(arr.local[idx]), sid)
            return rel, model.prn_head(rel)
    else:
        def forward(arr, idx):
            emb = model.fusion(Tensor(arr.f_g[idx]), Tensor(arr.relational[idx]))
            return emb, model.head(emb)

    return forward, splits["train"], splits["val"]


def _evaluate(model, stage, forward, arrays, labels, batch: int = 64) -> float:
    trainable = [model.component(n) for n in TRAINABLE[stage]]
    for m in trainable:
        m.eval()
    try:
        logits = np.concatenate([forward(arrays, np.arange(s, min(len(labels), s + batch)))[1].data
                                 for s in range(0, len(labels), batch)])
    finally:
        for m in trainable:
            m.train()
    return accuracy(logits, labels)


def train_stage(model: PRNFaceModel, stage: str, data: Dataset, cfg: RunConfig,
                log: TextIO | Callable[[str], None] | None = None) -> TrainResult:
    """Train one stage in place and mark it done on the model.

    Backbone and encoder stages use the softmax loss alone; the relation
    and fusion stages use the configured weighted joint loss with triplets
    mined from P x K batches.
    """
    tc, mc = cfg.train, cfg.mining
    dtype = np.dtype(tc.dtype)
    if not hasattr(model, "stages_done"):
        model.stages_done = set()
    _prepare(model, stage)
    model.astype(dtype)
    forward, train_arr, val_arr = _stage_functions(model, stage, data, dtype)
    labels, val_labels = data.train.labels, data.val.labels
    weights = cfg.model.relation.loss_weights if stage in ("prn", "fusion") else (0.0, 0.0, 1.0)
    use_triplets = bool(weights[0] or weights[1])
    params = [p for name in TRAINABLE[stage] for p in model.component(name).parameters()]
    rng = np.random.default_rng([tc.seed, STAGES.index(stage)])
    emit = (log.write if hasattr(log, "write") else log) if log is not None else None
    result = TrainResult(stage)
    step = 0
    for epoch in range(tc.epochs_for(stage)):
        batches = (pk_batches(labels, tc.batch_size, tc.samples_per_id, rng) if use_triplets
                   else shuffled_batches(len(labels), tc.batch_size, rng))
        losses = []
        for idx in batches:
            try:
                emb, logits = forward(train_arr, idx)
                triplets = (mine_triplet_indices(emb.data, labels[idx], mc.strategy, mc.seed + step,
                                                 mc.k, cfg.model.relation.margin)
                            if use_triplets else np.zeros((0, 3), dtype=np.int64))
                report, d_emb, d_logits = joint_loss(emb.data, logits.data, labels[idx], triplets, weights,
                                                     cfg.model.relation.margin, tc.reduction)
                if not math.isfinite(report.joint):
                    raise DivergedLoss(f"non-finite loss at step {step}")
                model.zero_grad()
                T.external_loss([emb, logits], report.joint,
                                [d_emb if use_triplets else None, d_logits]).backward()
            except NonFiniteValue as exc:
                raise DivergedLoss(f"non-finite value at step {step}: {exc}") from exc
            sgd_step(params, tc.learning_rate)
            result.steps.append(report)
            losses.append(report.joint)
            if emit is not None:
                emit(report.record(step) + "\n")
            step += 1
        result.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if tc.eval_every and (epoch + 1) % tc.eval_every == 0:
            result.val_accuracy.append(_evaluate(model, stage, forward, val_arr, val_labels))
    model.zero_grad()
    model.eval()
    model.stages_done.add(stage)
    return result


def train_all(model: PRNFaceModel, data: Dataset, cfg: RunConfig, log=None) -> dict[str, TrainResult]:
    """Every stage the model's variant has, in order."""
    stages = ["backbone"] if model.variant == "A" else [s for s in STAGES
                                                        if s != "encoder" or model.variant == "C"]
    return {s: train_stage(model, s, data, cfg, log) for s in stages}
