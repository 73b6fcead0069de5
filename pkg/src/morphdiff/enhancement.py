"""Deterministic conditioned sampling: depth stack in, enhanced image out."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .backbone import UNet, module_digest
from .conditioning import NUM_DEPTHS, DEFAULT_DEPTH_WEIGHTS, SKIP_MODES, DepthWeights, FusedConditions, Tuner, extract_conditions
from .diffusion import NoiseSchedule, ddim_step, make_cosine_schedule, make_timestep_subsequence
from .metrics import QualityReport, case_metrics

log = logging.getLogger(__name__)


class EnhancementError(RuntimeError):
    pass


class IncompatibleModelsError(EnhancementError):
    """Checkpoints (or inputs) that cannot be used together."""


@dataclass
class EnhanceConfig:
    n_steps: int = 50
    seed: int = 0
    depth_weights: tuple = DEFAULT_DEPTH_WEIGHTS
    use_ema: bool = True
    skip_mode: Optional[str] = None  # None: as recorded in the tuner checkpoint
    clamp: tuple = (0.0, 1.0)
    conditioning: str = "fusion"  # fusion | none

    def __post_init__(self):
        self.depth_weights = tuple(DepthWeights(self.depth_weights))
        if self.skip_mode is not None and self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.conditioning not in ("fusion", "none"):
            raise ValueError(f"conditioning must be 'fusion' or 'none', got {self.conditioning!r}")


def case_seed(seed: int, case_id: str) -> int:
    """Per-case seed from the global seed and the case id, independent of batch order."""
    digest = hashlib.sha256(f"{int(seed)}:{case_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def initial_noise(shape, seed: int) -> torch.Tensor:
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


def resolve_skip_mode(cfg: EnhanceConfig, tuner: Optional[Tuner]) -> str:
    if cfg.skip_mode is not None:
        return cfg.skip_mode
    return (tuner.meta.get("skip_mode") if tuner is not None else None) or "replace"


def check_compatible(diffusion: UNet, extractor: Optional[UNet], tuner: Optional[Tuner]):
    if diffusion.role != "diffusion":
        raise IncompatibleModelsError("first model must be a diffusion-role checkpoint")
    if extractor is not None:
        if extractor.role != "extractor":
            raise IncompatibleModelsError("extractor checkpoint has the wrong role")
        if extractor.config.skip_shapes() != diffusion.config.skip_shapes():
            raise IncompatibleModelsError(
                f"extractor skip shapes {extractor.config.skip_shapes()} do not match "
                f"diffusion skip shapes {diffusion.config.skip_shapes()}"
            )
    if tuner is not None and list(tuner.config.channels) != [c for c, _, _ in diffusion.config.skip_shapes()]:
        raise IncompatibleModelsError("tuner channels do not match the diffusion backbone")
    if tuner is not None:
        for key, model in (("diffusion_digest", diffusion), ("extractor_digest", extractor)):
            want = tuner.meta.get(key)
            if want and model is not None and module_digest(model) != want:
                raise IncompatibleModelsError(f"tuner was trained against a different {key.split('_')[0]} checkpoint")


@torch.no_grad()
def sample(diffusion: UNet, x_T: torch.Tensor, sched: NoiseSchedule, n_steps: int,
           conditions: Optional[FusedConditions] = None, tuner: Optional[Tuner] = None,
           skip_mode: str = "replace", clamp=(0.0, 1.0), progress=None) -> torch.Tensor:
    """Run deterministic DDIM from ``x_T`` along a uniform subsequence, then clamp."""
    x = x_T
    steps = make_timestep_subsequence(sched.T, n_steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat, _ = diffusion(x, t, conditions=conditions, tuner=tuner, skip_mode=skip_mode)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
        if not torch.isfinite(x).all():
            raise EnhancementError(f"non-finite values after DDIM step t={t} -> {t_prev}")
        if progress is not None:
            progress(t, x)
    return x.clamp(*clamp)


def enhance(stack, diffusion: UNet, extractor: Optional[UNet], tuner: Optional[Tuner],
            cfg: EnhanceConfig, sched: Optional[NoiseSchedule] = None, case_id: str = "") -> np.ndarray:
    """Enhanced ``(H, W)`` image in [0, 1] for one ``(D, H, W)`` depth stack.

    The extractor runs once per depth; the fused conditions are reused at
    every sampling step.  With ``cfg.conditioning == "none"`` the plain
    diffusion prior is sampled.
    """
    stack = torch.as_tensor(np.asarray(stack), dtype=torch.float32)
    if stack.dim() != 3 or stack.shape[0] != NUM_DEPTHS:
        raise EnhancementError(f"expected a ({NUM_DEPTHS}, H, W) depth stack, got {tuple(stack.shape)}")
    sched = sched or make_cosine_schedule(1000)
    conditioned = cfg.conditioning == "fusion"
    if conditioned and (extractor is None or tuner is None):
        raise EnhancementError("fusion conditioning needs an extractor and a tuner")
    check_compatible(diffusion, extractor if conditioned else None, tuner if conditioned else None)
    size = diffusion.config.image_size
    if tuple(stack.shape[1:]) != (size, size):
        raise IncompatibleModelsError(f"stack images {tuple(stack.shape[1:])} do not match model size {size}")
    conditions = extract_conditions(extractor, stack, cfg.depth_weights) if conditioned else None
    seed = case_seed(cfg.seed, case_id) if case_id else cfg.seed
    x_T = initial_noise((1, 1, size, size), seed)
    out = sample(diffusion, x_T, sched, cfg.n_steps, conditions, tuner if conditioned else None,
                 resolve_skip_mode(cfg, tuner), cfg.clamp)
    return out[0, 0].numpy().astype(np.float64)


def save_png(path, img: np.ndarray):
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.array(im.convert("L")).astype(np.float64) / 255.0


@dataclass
class CaseInput:
    case_id: str
    stack: np.ndarray
    mask: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    optimal_index: Optional[int] = None


def enhance_batch(cases: Sequence[CaseInput], diffusion: UNet, extractor: Optional[UNet], tuner: Optional[Tuner],
                  cfg: EnhanceConfig, out_dir=None, sched: Optional[NoiseSchedule] = None,
                  checkpoint_digests: Optional[dict] = None):
    """Enhance every case; failures are recorded in the report instead of aborting.

    Returns ``(images by case id, QualityReport)``.  With ``out_dir`` each
    case gets ``<id>.png`` and ``<id>.json``, plus ``report.json/.tsv``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    digests = checkpoint_digests
    if digests is None:
        digests = {"diffusion": module_digest(diffusion)}
        if extractor is not None:
            digests["extractor"] = module_digest(extractor)
        if tuner is not None:
            digests["tuner"] = module_digest(tuner)
    report = QualityReport()
    images = {}
    for case in cases:
        try:
            img = enhance(case.stack, diffusion, extractor, tuner, cfg, sched, case_id=case.case_id)
        except Exception as exc:  # per-case isolation
            log.warning("case %s failed: %s", case.case_id, exc)
            report.errors[case.case_id] = f"{type(exc).__name__}: {exc}"
            continue
        images[case.case_id] = img
        metrics = case_metrics(img, case.mask, case.reference) if case.mask is not None else {}
        report.add(case.case_id, metrics)
        if out is not None:
            save_png(out / f"{case.case_id}.png", img)
            sidecar = {
                "case_id": case.case_id,
                "seed": case_seed(cfg.seed, case.case_id),
                "global_seed": cfg.seed,
                "n_steps": cfg.n_steps,
                "conditioning": cfg.conditioning,
                "skip_mode": resolve_skip_mode(cfg, tuner),
                "depth_weights": list(cfg.depth_weights),
                "checkpoint_digests": digests,
                "metrics": metrics,
            }
            (out / f"{case.case_id}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    if out is not None:
        report.write(out / "report")
    return images, report
