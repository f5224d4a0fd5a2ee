"""Single-drop ablation sweep: the full model against each toggle removed."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import mean_iou
from .model import TOGGLES, ModelConfig, ablate, build
from .seeding import derive_seed
from .training import ClassWeights, class_weights_from_frequency, evaluate, train

log = logging.getLogger(__name__)

# Table-5 column order
TOGGLE_ORDER = ("AbM5", "AfN1", "AfN2", "DbN")
VARIANTS = ("full", "AbM5", "DbN", "AfN1", "AfN2")


@dataclass
class AblationRow:
    variant: str
    config: ModelConfig
    mious: list[float]

    @property
    def miou(self) -> float:
        return float(np.mean(self.mious))


def run_ablation(
    base: ModelConfig,
    train_set: Sequence,
    val_set: Sequence,
    seeds: Sequence[int],
    root_seed: int = 0,
    class_weighting: str = "inverse",
    **train_kwargs,
) -> list[AblationRow]:
    """Train every variant once per seed with identical data, schedule and per-layer init.

    ``train_kwargs`` go straight to :func:`sernet.training.train`.
    """
    if class_weighting == "uniform":
        weights = ClassWeights.uniform(base.num_classes)
    else:
        weights = class_weights_from_frequency((s.labels for s in train_set), base.num_classes, method=class_weighting)
    rows = []
    for variant in VARIANTS:
        cfg = base if variant == "full" else ablate(base, variant)
        mious = []
        for s in seeds:
            run_seed = derive_seed(root_seed, f"ablate{s}")
            model = build(dataclasses.replace(cfg, seed=derive_seed(run_seed, "model")))
            train(model, train_set, seed=derive_seed(run_seed, "train"), class_weights=weights, **train_kwargs)
            mious.append(mean_iou(evaluate(model, val_set)))
            log.info("ablation %s seed %d: val mIoU %.4f", variant, s, mious[-1])
        rows.append(AblationRow(variant, cfg, mious))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    """``variant,AbM5,AfN1,AfN2,DbN,miou,delta`` with delta relative to the full model."""
    full = next(r for r in rows if r.variant == "full").miou
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", *TOGGLE_ORDER, "miou", "delta"])
    for r in rows:
        flags = [int(getattr(r.config, TOGGLES[t])) for t in TOGGLE_ORDER]
        w.writerow([r.variant, *flags, f"{r.miou:.6f}", f"{r.miou - full:.6f}"])
    return buf.getvalue()


def per_seed_csv(rows: Sequence[AblationRow], seeds: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "miou"])
    for r in rows:
        for s, v in zip(seeds, r.mious):
            w.writerow([r.variant, s, f"{v:.6f}"])
    return buf.getvalue()
