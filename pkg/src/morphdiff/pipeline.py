"""Desk-scale end-to-end runner shared by the ``ablate`` command and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import UNet, load_model
from .conditioning import DepthWeights, Tuner, load_tuner
from .enhancement import EnhanceConfig, enhance
from .metrics import cnr, snr
from .phantom import DatasetSplit, PhantomCase, generate_cases
from .training import desk_config, train_stage

CONDITIONS = ("none", "optimal", "fusion")


def desk_split(n_train: int = 200, n_test: int = 50, size: int = 32, seed: int = 1) -> DatasetSplit:
    """Easy cases for training, hard cases (distinct seed stream) held out for testing."""
    train = generate_cases(n_train, seed, "easy", size)
    test = generate_cases(n_test, seed + 1, "hard", size)
    return DatasetSplit(train, test)


def train_all(split: DatasetSplit, out_dir, stage_overrides: Optional[dict] = None, **common) -> dict:
    """Run stages 1-3 with the desk preset; ``stage_overrides`` maps stage -> extra settings."""
    stage_overrides = stage_overrides or {}
    results = {}
    for stage in (1, 2, 3):
        cfg = desk_config(stage, out_dir=str(out_dir), **{**common, **stage_overrides.get(stage, {})})
        results[stage] = train_stage(cfg, split)
    return results


@dataclass
class Checkpoints:
    diffusion: UNet
    extractor: UNet
    tuner: Tuner

    @classmethod
    def load(cls, out_dir, use_ema: bool = True) -> "Checkpoints":
        out = Path(out_dir)
        suffix = "_ema" if use_ema else ""
        return cls(load_model(out / f"diffusion{suffix}.npz", "diffusion"),
                   load_model(out / "extractor.npz", "extractor"),
                   load_tuner(out / f"tuner{suffix}.npz"))


def condition_config(condition: str, case: PhantomCase, base: EnhanceConfig) -> EnhanceConfig:
    if condition == "none":
        return replace(base, conditioning="none")
    if condition == "optimal":
        return replace(base, depth_weights=tuple(DepthWeights.one_hot(case.optimal_index)), conditioning="fusion")
    if condition == "fusion":
        return replace(base, conditioning="fusion")
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


def evaluate(cases: Sequence[PhantomCase], ckpts: Checkpoints, base: EnhanceConfig,
             conditions: Sequence[str] = CONDITIONS) -> dict:
    """Per-case SNR/CNR of the degraded optimal-depth input and each condition's output."""
    table = {
        "case_id": [c.case_id for c in cases],
        "input": {"snr_db": np.array([snr(c.optimal_image, c.mask) for c in cases]),
                  "cnr_db": np.array([cnr(c.optimal_image, c.mask) for c in cases])},
    }
    for cond in conditions:
        s, k = [], []
        for c in cases:
            img = enhance(c.stack, ckpts.diffusion, ckpts.extractor, ckpts.tuner,
                          condition_config(cond, c, base), case_id=c.case_id)
            s.append(snr(img, c.mask))
            k.append(cnr(img, c.mask))
        table[cond] = {"snr_db": np.array(s), "cnr_db": np.array(k)}
    return table


def summarise(table: dict) -> dict:
    """Mean SNR/CNR per condition plus the fraction of cases improved over the input."""
    inp = table["input"]
    out = {"input": {m: float(np.mean(v)) for m, v in inp.items()}}
    for cond, vals in table.items():
        if cond in ("input", "case_id"):
            continue
        out[cond] = {}
        for m, v in vals.items():
            out[cond][m] = float(np.mean(v))
            out[cond][f"{m}_improved_fraction"] = float(np.mean(v > inp[m]))
    return out
