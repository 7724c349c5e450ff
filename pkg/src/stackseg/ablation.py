"""Component ablation: train and score all eight on/off combinations."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, SegmentationModel
from .train import TrainConfig, Trainer, evaluate
from .volume import VolumeStack

COMPONENTS = ("use_enhancer", "use_memory", "use_bidirectional")

# baseline first, full model last
FLAG_COMBINATIONS: list[tuple[bool, bool, bool]] = [
    tuple(bool(b) for b in bits) for bits in itertools.product((False, True), repeat=3)
]


@dataclass
class AblationRow:
    enhancer: bool
    memory: bool
    bidirectional: bool
    dice: list[float]
    miou: list[float]
    symdiff: list[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self.miou))

    @property
    def mean_symdiff(self) -> float:
        return float(np.mean(self.symdiff))

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return (self.enhancer, self.memory, self.bidirectional)


def split_holdout(stack: VolumeStack, fraction: float = 0.2) -> tuple[VolumeStack, VolumeStack]:
    """Leading slices for training, trailing ``fraction`` of z held out."""
    n_hold = max(1, int(round(stack.depth * fraction)))
    if n_hold >= stack.depth:
        raise ValueError(f"stack of depth {stack.depth} is too shallow to hold out {fraction:.0%}")
    cut = stack.depth - n_hold
    return stack.subset(0, cut), stack.subset(cut, stack.depth)


def train_variant(model_cfg: ModelConfig, flags: Sequence[bool], train_cfg: TrainConfig,
                  volumes: Sequence[VolumeStack], steps: int, seed: int) -> SegmentationModel:
    cfg = dataclasses.replace(model_cfg, seed=seed, **dict(zip(COMPONENTS, flags)))
    model = SegmentationModel(cfg)
    Trainer(model, volumes, dataclasses.replace(train_cfg, seed=seed)).fit(steps)
    return model


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, train_volumes: Sequence[VolumeStack],
                 eval_volumes: Sequence[VolumeStack], steps: int, seeds: Sequence[int] = (0, 1, 2),
                 combinations: Sequence[tuple[bool, bool, bool]] = FLAG_COMBINATIONS,
                 progress: Callable[[str], None] | None = None) -> list[AblationRow]:
    """One row per flag combination, every row trained with the same seeds and budget."""
    rows = []
    for flags in combinations:
        dice, miou, symdiff = [], [], []
        for seed in seeds:
            model = train_variant(model_cfg, flags, train_cfg, train_volumes, steps, seed)
            scores = [evaluate(model, v) for v in eval_volumes]
            dice.append(float(np.mean([s["dice"] for s in scores])))
            miou.append(float(np.mean([s["miou"] for s in scores])))
            symdiff.append(float(np.mean([s["symdiff"] for s in scores])))
            if progress is not None:
                progress(f"flags={flags} seed={seed} dice={dice[-1]:.4f} miou={miou[-1]:.4f}")
        rows.append(AblationRow(*flags, dice, miou, symdiff))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    """CSV with check marks per component, mirroring a component-ablation table."""
    lines = ["enhancer,memory,bidirectional,dice,miou,symdiff"]
    for r in rows:
        marks = ["x" if f else "-" for f in r.flags]
        lines.append(",".join(marks + [f"{100 * r.mean_dice:.2f}", f"{100 * r.mean_miou:.2f}",
                                       f"{r.mean_symdiff:.5f}"]))
    return "\n".join(lines) + "\n"
