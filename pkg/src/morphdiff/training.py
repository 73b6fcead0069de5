"""Three-stage training: diffusion prior, segmentation extractor, tuner.

Stage 1 fits the noise predictor on artifact-free optimal images.  Stage 2
fits the extractor (same U-Net, no timestep input, four output classes) on
the same images and their masks.  Stage 3 freezes both and optimises only
the tuner on full depth stacks, with the optimal image as the target.
"""
from __future__ import annotations

import ast
import configparser
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, CheckpointError, UNet, load_model, module_digest, save_model
from .conditioning import (
    DEFAULT_DEPTH_WEIGHTS,
    DepthWeights,
    FusedConditions,
    Tuner,
    extract_conditions,
    load_tuner,
    save_tuner,
)
from .diffusion import NoiseSchedule, make_cosine_schedule, predict_x0
from .phantom import DatasetSplit

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    1: {"epochs": 2000, "learning_rate": 1e-3},
    2: {"epochs": 200, "learning_rate": 1e-4},
    3: {"epochs": 1000, "learning_rate": 1e-3},
}


class TrainingError(RuntimeError):
    pass


class FrozenParameterError(AssertionError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    batch_size: int = 8
    ema_decay: float = 0.999
    grad_clip_norm: float = 1.0
    seed: int = 0
    T: int = 1000
    s: float = 0.008
    depth_weights: tuple = DEFAULT_DEPTH_WEIGHTS
    skip_mode: str = "replace"
    # architecture
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 2, 4)
    num_res_blocks: int = 2
    attention: bool = True
    prediction: str = "v"
    tuner_reduction: int = 4
    tuner_activation: str = "gelu"
    # data handling
    flip: bool = True
    speckle_augment: float = 0.0  # max extra speckle on extractor/condition inputs
    # paths
    data_dir: str = ""
    out_dir: str = "runs"
    diffusion_ckpt: str = ""  # stage 3 inputs; default to out_dir files
    extractor_ckpt: str = ""
    resume: str = ""

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        d = STAGE_DEFAULTS[self.stage]
        if self.epochs is None:
            self.epochs = d["epochs"]
        if self.learning_rate is None:
            self.learning_rate = d["learning_rate"]
        self.depth_weights = tuple(DepthWeights(self.depth_weights))
        self.channel_multipliers = tuple(self.channel_multipliers)
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    def backbone_config(self, image_size: int, role: str) -> BackboneConfig:
        return BackboneConfig(
            image_size=image_size,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            out_channels=1 if role == "diffusion" else 4,
            use_timestep_embedding=role == "diffusion",
            num_res_blocks=self.num_res_blocks,
            attention=self.attention,
            prediction=self.prediction,
            schedule_T=self.T,
            schedule_s=self.s,
        )

    def schedule(self) -> NoiseSchedule:
        return make_cosine_schedule(self.T, self.s)


# Small settings for CPU runs on 32-64 px phantoms.
DESK_PRESET = {
    "common": {"base_channels": 16, "channel_multipliers": (1, 2, 2, 4), "num_res_blocks": 1,
               "batch_size": 16, "T": 1000, "seed": 0, "skip_mode": "residual"},
    1: {"epochs": 150, "learning_rate": 1e-3},
    2: {"epochs": 40, "learning_rate": 1e-3, "speckle_augment": 0.45},
    3: {"epochs": 200, "learning_rate": 3e-3, "speckle_augment": 0.3},
}


def desk_config(stage: int, **overrides) -> TrainConfig:
    kw = dict(DESK_PRESET["common"])
    kw.update(DESK_PRESET[stage])
    kw.update(overrides)
    return TrainConfig(stage=stage, **kw)


def _parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.strip().lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        return raw.strip()


def load_config_file(path, stage: int) -> dict:
    """Read ``key = value`` settings from ``[common]`` and ``[stage<N>]`` sections.

    A ``preset = desk`` entry in ``[common]`` starts from the desk preset.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name for f in fields(TrainConfig)}
    out: dict = {}
    for section in ("common", f"stage{stage}"):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key == "preset":
                if raw.strip() != "desk":
                    raise ValueError(f"unknown preset {raw!r}")
                out.update(DESK_PRESET["common"])
                out.update(DESK_PRESET[stage])
                continue
            if key not in known:
                raise ValueError(f"{path}: unknown setting {key!r} in [{section}]")
            out[key] = _parse_value(raw)
    out.pop("stage", None)
    return out


# -- losses and optimiser helpers -------------------------------------------
def _alpha(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    ab = torch.tensor(sched.alpha_bar, dtype=like.dtype)[torch.as_tensor(t).long()]
    return ab.reshape(-1, *([1] * (like.dim() - 1))) if ab.dim() else ab


def stage1_loss(x0, eps, eps_hat, t, sched: NoiseSchedule):
    """Noise MSE plus clean-image reconstruction MSE (unweighted sum, pixel means).

    ``t`` may be an integer or a per-sample tensor matching the batch axis.
    """
    if not (x0.shape == eps.shape == eps_hat.shape):
        raise ValueError(f"stage1_loss shape mismatch {tuple(x0.shape)}, {tuple(eps.shape)}, {tuple(eps_hat.shape)}")
    if isinstance(t, (int, np.integer)):
        x_t = math.sqrt(sched.alpha_bar[t]) * x0 + math.sqrt(1 - sched.alpha_bar[t]) * eps
        x0_hat = predict_x0(x_t, eps_hat, int(t), sched)
    else:
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > sched.T):
            raise ValueError("stage1_loss needs timesteps in 1..T")
        ab = _alpha(sched, t, x0)
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        x0_hat = (x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    return torch.mean((eps - eps_hat) ** 2) + torch.mean((x0 - x0_hat) ** 2)


def stage2_loss(logits, y):
    """Pixel-mean cross-entropy; ``logits`` ``(4, H, W)`` or ``(B, 4, H, W)``."""
    y = torch.as_tensor(y).long()
    if logits.dim() == 3:
        logits, y = logits[None], y[None]
    if logits.shape[0] != y.shape[0] or logits.shape[2:] != y.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(y.shape)} misaligned")
    if torch.any(y < 0) or torch.any(y >= logits.shape[1]):
        raise ValueError(f"labels outside 0..{logits.shape[1] - 1}")
    return F.cross_entropy(logits, y)


def ema_update(ema: Mapping, current: Mapping, decay: float) -> dict:
    """``decay * ema + (1 - decay) * current`` for every named array."""
    if not 0 <= decay < 1:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    if set(ema) != set(current):
        raise ValueError(f"parameter names differ: {sorted(set(ema) ^ set(current))[:5]}")
    out = {}
    for name, e in ema.items():
        c = current[name]
        if tuple(e.shape) != tuple(c.shape):
            raise ValueError(f"{name}: shape {tuple(e.shape)} vs {tuple(c.shape)}")
        out[name] = decay * e + (1 - decay) * c
    return out


def clip_grad_norm(grads: Mapping, max_norm: float) -> dict:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    sq = 0.0
    for name, g in grads.items():
        s = float((g.double() ** 2).sum()) if torch.is_tensor(g) else float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
        if not math.isfinite(s):
            raise FloatingPointError(f"non-finite gradient in {name}")
        sq += s
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def _clip_module_grads(params: Sequence[nn.Parameter], names: Sequence[str], max_norm: float):
    grads = {n: p.grad for n, p in zip(names, params) if p.grad is not None}
    clipped = clip_grad_norm(grads, max_norm)
    for n, p in zip(names, params):
        if p.grad is not None:
            p.grad.copy_(clipped[n])


class EMA:
    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    @torch.no_grad()
    def update(self, module: nn.Module):
        self.shadow = ema_update(self.shadow, {k: v.detach() for k, v in module.state_dict().items()}, self.decay)

    def copy_to(self, module: nn.Module):
        module.load_state_dict(self.shadow)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


# -- data helpers ------------------------------------------------------------
def _to_tensor(arrs, dtype=torch.float32):
    return torch.as_tensor(np.asarray(arrs), dtype=dtype)


def _augment_speckle(x: torch.Tensor, max_strength: float, gen: torch.Generator) -> torch.Tensor:
    """Extra multiplicative speckle with a random per-sample strength in [0, max_strength]."""
    if max_strength <= 0:
        return x
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    strength = torch.rand(shape, generator=gen, dtype=x.dtype) * max_strength
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return (x * (1 + strength * noise)).clamp(0, 1)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


class TrainLog:
    """Tab-separated ``epoch, stage, mean loss, wall seconds`` lines."""

    def __init__(self, path: Path, stage: int):
        self.path = Path(path)
        self.stage = stage
        self.path.write_text("")
        self.t0 = time.perf_counter()
        self.losses: list[float] = []

    def record(self, epoch: int, loss: float):
        self.losses.append(loss)
        with self.path.open("a") as fh:
            fh.write(f"{epoch}\t{self.stage}\t{loss:.10g}\t{time.perf_counter() - self.t0:.3f}\n")


def _resume(module: nn.Module, loaded: nn.Module):
    try:
        module.load_state_dict(loaded.state_dict())
    except RuntimeError as exc:
        raise CheckpointError(f"resume checkpoint does not match the configured architecture: {exc}") from exc


def _seed_all(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed), torch.Generator().manual_seed(seed)


def _hflip(x: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
    if not flags.any():
        return x
    x = x.clone()
    x[flags] = torch.flip(x[flags], dims=[-1])
    return x


# -- stage 1 -----------------------------------------------------------------
def train_diffusion(cfg: TrainConfig, images: np.ndarray, out_dir: Path) -> dict:
    if len(images) == 0:
        raise TrainingError("stage 1 needs at least one artifact-free image")
    rng, gen = _seed_all(cfg.seed)
    sched = cfg.schedule()
    x_all = _to_tensor(images)[:, None]
    model = UNet(cfg.backbone_config(x_all.shape[-1], "diffusion"), "diffusion")
    if cfg.resume:
        _resume(model, load_model(cfg.resume, "diffusion"))
    ema = EMA(model, cfg.ema_decay)
    names, params = zip(*model.named_parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    tlog = TrainLog(out_dir / "train_log_stage1.tsv", 1)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            x0 = x_all[idx]
            if cfg.flip:
                x0 = _hflip(x0, torch.rand(len(idx), generator=gen) < 0.5)
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            ab = _alpha(sched, t, x0)
            x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
            eps_hat, _ = model(x_t, t)
            loss = stage1_loss(x0, eps, eps_hat, t, sched)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _clip_module_grads(params, names, cfg.grad_clip_norm)
            opt.step()
            ema.update(model)
            total += loss.item() * len(idx)
            count += len(idx)
        tlog.record(epoch, total / count)
    ema_model = UNet(model.config, "diffusion")
    ema.copy_to(ema_model)
    meta = {"stage": 1, "seed": cfg.seed, "schedule": {"T": cfg.T, "s": cfg.s}}
    h = save_model(model, out_dir / "diffusion.npz", meta)
    h_ema = save_model(ema_model, out_dir / "diffusion_ema.npz", dict(meta, ema_decay=cfg.ema_decay))
    return {"diffusion": h, "diffusion_ema": h_ema, "losses": tlog.losses}


# -- stage 2 -----------------------------------------------------------------
def train_extractor(cfg: TrainConfig, images: np.ndarray, masks: np.ndarray, out_dir: Path) -> dict:
    if len(images) == 0:
        raise TrainingError("stage 2 needs at least one labelled image")
    rng, gen = _seed_all(cfg.seed)
    x_all = _to_tensor(images)[:, None]
    y_all = torch.as_tensor(np.asarray(masks), dtype=torch.long)
    model = UNet(cfg.backbone_config(x_all.shape[-1], "extractor"), "extractor")
    if cfg.resume:
        _resume(model, load_model(cfg.resume, "extractor"))
    names, params = zip(*model.named_parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    tlog = TrainLog(out_dir / "train_log_stage2.tsv", 2)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            x, y = x_all[idx], y_all[idx]
            if cfg.flip:
                flags = torch.rand(len(idx), generator=gen) < 0.5
                x, y = _hflip(x, flags), _hflip(y, flags)
            x = _augment_speckle(x, cfg.speckle_augment, gen)
            logits, _ = model(x)
            loss = stage2_loss(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _clip_module_grads(params, names, cfg.grad_clip_norm)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        tlog.record(epoch, total / count)
    h = save_model(model, out_dir / "extractor.npz", {"stage": 2, "seed": cfg.seed})
    return {"extractor": h, "losses": tlog.losses}


def pixel_accuracy(extractor: UNet, images, masks) -> float:
    with torch.no_grad():
        logits, _ = extractor(_to_tensor(images)[:, None])
    pred = logits.argmax(1).numpy()
    return float(np.mean(pred == np.asarray(masks)))


# -- stage 3 -----------------------------------------------------------------
def tuner_loss(diffusion: UNet, tuner: Tuner, x0, cond: FusedConditions, t, eps, sched, skip_mode="replace"):
    """Noise MSE of the conditioned predictor (no reconstruction term)."""
    ab = _alpha(sched, t, x0)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    eps_hat, _ = diffusion(x_t, t, conditions=cond, tuner=tuner, skip_mode=skip_mode)
    return torch.mean((eps - eps_hat) ** 2)


def _frozen_digests(*modules: nn.Module) -> list[str]:
    return [module_digest(m) for m in modules]


def stage3_step(batch, diffusion: UNet, extractor: UNet, tuner: Tuner, cfg: TrainConfig,
                optimizer: Optional[torch.optim.Optimizer] = None, gen: Optional[torch.Generator] = None,
                sched: Optional[NoiseSchedule] = None, check_frozen: bool = True):
    """One optimiser step on the tuner for ``batch = (stacks (B,D,H,W), targets (B,H,W))``.

    Returns ``(tuner, loss)``; raises :class:`FrozenParameterError` if the
    diffusion or extractor weights changed.
    """
    sched = sched or cfg.schedule()
    gen = gen or torch.Generator().manual_seed(cfg.seed)
    if optimizer is None:
        optimizer = torch.optim.Adam(tuner.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    for m in (diffusion, extractor):
        if any(p.requires_grad for p in m.parameters()):
            raise FrozenParameterError(f"{m.role} parameters must be frozen for stage 3")
    before = _frozen_digests(diffusion, extractor) if check_frozen else None
    stacks, targets = batch
    stacks = _to_tensor(stacks)
    x0 = _to_tensor(targets)[:, None]
    cond = extract_conditions(extractor, stacks, cfg.depth_weights)
    t = torch.randint(1, sched.T + 1, (len(x0),), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    loss = tuner_loss(diffusion, tuner, x0, cond, t, eps, sched, cfg.skip_mode)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    names, params = zip(*tuner.named_parameters())
    _clip_module_grads(params, names, cfg.grad_clip_norm)
    optimizer.step()
    if check_frozen and _frozen_digests(diffusion, extractor) != before:
        raise FrozenParameterError("frozen parameters changed during a tuner step")
    return tuner, loss.item()


def precompute_conditions(extractor: UNet, stacks: torch.Tensor, weights, chunk: int = 32) -> FusedConditions:
    parts = [extract_conditions(extractor, stacks[i:i + chunk], weights) for i in range(0, len(stacks), chunk)]
    return FusedConditions.stack(parts)


def train_tuner(cfg: TrainConfig, stacks: np.ndarray, targets: np.ndarray, out_dir: Path,
                diffusion: UNet, extractor: UNet) -> dict:
    if len(stacks) == 0:
        raise TrainingError("stage 3 needs at least one depth stack")
    rng, gen = _seed_all(cfg.seed)
    sched = cfg.schedule()
    freeze(diffusion)
    freeze(extractor)
    digests = _frozen_digests(diffusion, extractor)
    tuner = Tuner.for_backbone(diffusion, cfg.tuner_reduction, cfg.tuner_activation)
    if cfg.resume:
        _resume(tuner, load_tuner(cfg.resume))
    ema = EMA(tuner, cfg.ema_decay)
    names, params = zip(*tuner.named_parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    s_all = _to_tensor(stacks)
    x_all = _to_tensor(targets)[:, None]

    # the extractor is frozen, so clean-input conditions can be cached
    cached = None
    if cfg.speckle_augment <= 0:
        cached = [precompute_conditions(extractor, s_all, cfg.depth_weights)]
        if cfg.flip:
            cached.append(precompute_conditions(extractor, torch.flip(s_all, dims=[-1]), cfg.depth_weights))

    tlog = TrainLog(out_dir / "train_log_stage3.tsv", 3)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(x_all), cfg.batch_size, rng):
            idx_t = torch.as_tensor(idx)
            flip = bool(cfg.flip and torch.rand(1, generator=gen) < 0.5)
            x0 = x_all[idx_t]
            if flip:
                x0 = torch.flip(x0, dims=[-1])
            if cached is not None:
                cond = cached[int(flip)].select(idx_t)
            else:
                s = s_all[idx_t]
                if flip:
                    s = torch.flip(s, dims=[-1])
                s = _augment_speckle(s, cfg.speckle_augment, gen)
                cond = extract_conditions(extractor, s, cfg.depth_weights)
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            loss = tuner_loss(diffusion, tuner, x0, cond, t, eps, sched, cfg.skip_mode)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            _clip_module_grads(params, names, cfg.grad_clip_norm)
            opt.step()
            ema.update(tuner)
            total += loss.item() * len(idx)
            count += len(idx)
        tlog.record(epoch, total / count)
        if _frozen_digests(diffusion, extractor) != digests:
            raise FrozenParameterError(f"frozen parameters changed in stage 3 epoch {epoch}")
    ema_tuner = Tuner(tuner.config.channels, tuner.config.reduction, tuner.config.activation)
    ema.copy_to(ema_tuner)
    meta = {"stage": 3, "seed": cfg.seed, "skip_mode": cfg.skip_mode, "depth_weights": list(cfg.depth_weights),
            "diffusion_digest": digests[0], "extractor_digest": digests[1]}
    h = save_tuner(tuner, out_dir / "tuner.npz", meta)
    h_ema = save_tuner(ema_tuner, out_dir / "tuner_ema.npz", dict(meta, ema_decay=cfg.ema_decay))
    return {"tuner": h, "tuner_ema": h_ema, "losses": tlog.losses, "frozen_digests": digests}


def _stage3_inputs(cfg: TrainConfig, out_dir: Path) -> tuple[UNet, UNet]:
    diff_path = Path(cfg.diffusion_ckpt or out_dir / "diffusion_ema.npz")
    ext_path = Path(cfg.extractor_ckpt or out_dir / "extractor.npz")
    for p in (diff_path, ext_path):
        if not p.exists():
            raise TrainingError(f"stage 3 requires checkpoint {p}; run stages 1 and 2 first")
    return load_model(diff_path, "diffusion"), load_model(ext_path, "extractor")


def train_stage(cfg: TrainConfig, split: DatasetSplit) -> dict:
    """Run one stage, writing checkpoints and ``train_log_stage<N>.tsv`` to ``cfg.out_dir``."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    if cfg.stage in (1, 2):
        pairs = split.artifact_free
        if not pairs:
            raise TrainingError(f"stage {cfg.stage}: dataset has no artifact-free training images")
        images = np.stack([p[0] for p in pairs])
        if cfg.stage == 1:
            result = train_diffusion(cfg, images, out_dir)
        else:
            result = train_extractor(cfg, images, np.stack([p[1] for p in pairs]), out_dir)
    else:
        groups = split.high_quality_groups
        if not groups:
            raise TrainingError("stage 3: dataset has no training depth stacks")
        diffusion, extractor = _stage3_inputs(cfg, out_dir)
        stacks = np.stack([g[0] for g in groups])
        targets = np.stack([g[0][g[1]] for g in groups])
        result = train_tuner(cfg, stacks, targets, out_dir, diffusion, extractor)
    (out_dir / f"config_stage{cfg.stage}.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    return result
