"""Seeded comparison of the global-only, relational and fused models.

Per seed one backbone is trained and shared: model A classifies with it
directly, models B and C each train their relation network (plain and
identity-conditioned) and fusion layer on top of the frozen backbone.
Accuracy is validation classification accuracy of each model's own head.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import MissingPrerequisite
from .config import RunConfig
from .data import Dataset
from .pipeline import accuracy, build_model, run_outputs
from .train import TrainResult, train_stage

VARIANTS = ("A", "B", "C", "PRN", "PRN+")

# Full-scale reference accuracies (percent), kept for the report footer only.
REFERENCE = {
    "LFW": {"A": 99.6, "B": 99.65, "C": 99.76},
    "YTF": {"A": 95.1, "B": 95.7, "C": 96.3},
    "relational only": {"PRN": 94.2, "PRN+": 96.7},
}


@dataclass
class TrendReport:
    seeds: list[int]
    accuracy: dict[str, list[float]]
    min_wins: int = 3
    tolerance: float = 0.01
    backbone_epoch_loss: list = field(default_factory=list)   # per seed, softmax loss per epoch
    checks: dict[str, bool] = field(init=False)

    def __post_init__(self):
        missing = [v for v in VARIANTS if v not in self.accuracy]
        if missing:
            raise MissingPrerequisite(f"no accuracies for variant(s) {missing}")
        acc = {k: np.asarray(v, dtype=np.float64) for k, v in self.accuracy.items()}
        if any(len(v) != len(self.seeds) for v in acc.values()):
            raise ValueError("one accuracy per seed is needed for every variant")
        self.checks = {
            "PRN+ >= PRN": int((acc["PRN+"] >= acc["PRN"]).sum()) >= self.min_wins,
            "median(C) >= median(A) - 1pp":
                statistics.median(acc["C"]) >= statistics.median(acc["A"]) - self.tolerance,
            "C >= B": int((acc["C"] >= acc["B"]).sum()) >= self.min_wins,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def median_backbone_loss(self, epochs: int = 5) -> list[float]:
        """Median over seeds of the backbone's mean training loss in each of the first epochs."""
        return [statistics.median(run[e] for run in self.backbone_epoch_loss) for e in range(epochs)]

    def wins(self, better: str, worse: str) -> int:
        return int((np.asarray(self.accuracy[better]) >= np.asarray(self.accuracy[worse])).sum())

    def lines(self) -> list[str]:
        out = ["variant, " + ", ".join(f"seed {s}" for s in self.seeds) + ", median"]
        for v in VARIANTS:
            vals = self.accuracy[v]
            out.append(f"{v}, " + ", ".join(f"{a:.4f}" for a in vals) + f", {statistics.median(vals):.4f}")
        out.append(f"PRN+ >= PRN in {self.wins('PRN+', 'PRN')}/{len(self.seeds)} seeds")
        out.append(f"C >= B in {self.wins('C', 'B')}/{len(self.seeds)} seeds")
        out += [f"{name}: {'PASS' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        for bench, ref in REFERENCE.items():
            out.append(f"reference {bench}: " + ", ".join(f"{k} {v}" for k, v in ref.items()))
        return out


def _with_variant(cfg: RunConfig, variant: str, seed: int) -> RunConfig:
    model = replace(cfg.model, relation=replace(cfg.model.relation, variant=variant))
    return replace(cfg, model=model, train=replace(cfg.train, seed=seed))


def train_backbone(data: Dataset, cfg: RunConfig, seed: int) -> tuple[dict, TrainResult]:
    """Backbone weights for one seed; every variant built with that seed starts from the same ones."""
    model = build_model(_with_variant(cfg, "A", seed))
    result = train_stage(model, "backbone", data, _with_variant(cfg, "A", seed))
    return model.backbone.state_dict(), result


def variant_accuracies(data: Dataset, cfg: RunConfig, seed: int, backbone_state: dict) -> dict[str, float]:
    """Validation accuracy of A, B, C, PRN and PRN+ on top of one trained backbone."""
    images, landmarks, labels = data.val.images(np.dtype(cfg.train.dtype)), data.val.landmarks, data.val.labels
    out = {}
    for variant in ("C", "B"):
        vcfg = _with_variant(cfg, variant, seed)
        model = build_model(vcfg)
        model.backbone.load_state_dict(backbone_state)
        model.stages_done.add("backbone")
        stages = ("encoder", "prn", "fusion") if variant == "C" else ("prn", "fusion")
        for stage in stages:
            train_stage(model, stage, data, vcfg)
        res = run_outputs(model, images, landmarks, "fusion")
        out["A"] = accuracy(res.backbone_logits, labels)
        out[variant] = accuracy(res.logits, labels)
        out["PRN+" if variant == "C" else "PRN"] = accuracy(res.relational_logits, labels)
    return out


def trend_check(data: Dataset, seeds, cfg: RunConfig | None = None, progress=None,
                backbones: dict | None = None) -> TrendReport:
    """Train and compare every variant per seed.

    ``backbones`` maps seed -> (backbone state, backbone TrainResult) for
    seeds whose backbone is already trained.
    """
    cfg = RunConfig() if cfg is None else cfg
    seeds = list(seeds)
    backbones = dict(backbones or {})
    table: dict[str, list[float]] = {v: [] for v in VARIANTS}
    losses = []
    for seed in seeds:
        if seed not in backbones:
            backbones[seed] = train_backbone(data, cfg, seed)
        state, result = backbones[seed]
        losses.append(list(result.epoch_loss))
        accs = variant_accuracies(data, cfg, seed, state)
        for v in VARIANTS:
            table[v].append(accs[v])
        if progress is not None:
            progress(seed, accs)
    return TrendReport(seeds, table, backbone_epoch_loss=losses)
