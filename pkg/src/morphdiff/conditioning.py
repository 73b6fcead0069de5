"""Multi-depth morphology conditioning.

The pipeline: run the frozen extractor on each depth image, blend the
resulting feature pyramids with fixed depth weights, and inject the blend
into the diffusion U-Net's skip connections through a small per-level
bottleneck ("tuner").
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid, UNet, load_arrays, save_arrays, CheckpointError

DEFAULT_DEPTH_WEIGHTS = (0.109, 0.205, 0.252, 0.259, 0.174)
NUM_DEPTHS = 5
SKIP_MODES = ("replace", "residual")
ACTIVATIONS = {"gelu": F.gelu, "silu": F.silu, "relu": F.relu, "identity": lambda x: x}


class DepthWeights(tuple):
    """Non-negative depth weights summing to one.

    The default three-decimal values sum to 0.999; inputs within 1e-3 of unity
    are renormalised, anything further off is rejected.
    """

    def __new__(cls, w: Sequence[float] = DEFAULT_DEPTH_WEIGHTS, *, n_depths: int = NUM_DEPTHS, tol: float = 1e-3):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1 or len(w) != n_depths:
            raise ValueError(f"expected {n_depths} depth weights, got {w.tolist()}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("depth weights must be finite and non-negative")
        total = w.sum()
        if abs(total - 1.0) > tol:
            raise ValueError(f"depth weights sum to {total}, not 1")
        return super().__new__(cls, (w / total).tolist())

    @classmethod
    def one_hot(cls, index: int, n_depths: int = NUM_DEPTHS) -> "DepthWeights":
        w = np.zeros(n_depths)
        w[index] = 1.0
        return cls(w, n_depths=n_depths)


@dataclass
class FusedConditions:
    """Depth-blended extractor features for one or more cases.

    ``encoder_conds = [F^_1..F^_M]`` and ``decoder_conds = [F^*_M..F^*_1]``,
    each with a leading batch axis.
    """

    encoder_conds: list
    decoder_conds: list

    @property
    def M(self) -> int:
        return len(self.encoder_conds)

    def encoder(self, level: int):
        return self.encoder_conds[level - 1]

    def decoder(self, level: int):
        return self.decoder_conds[self.M - level]

    def map(self, fn) -> "FusedConditions":
        return FusedConditions([fn(f) for f in self.encoder_conds], [fn(f) for f in self.decoder_conds])

    @classmethod
    def stack(cls, items: Sequence["FusedConditions"]) -> "FusedConditions":
        return cls(
            [torch.cat([c.encoder_conds[i] for c in items]) for i in range(items[0].M)],
            [torch.cat([c.decoder_conds[i] for c in items]) for i in range(items[0].M)],
        )

    def select(self, idx) -> "FusedConditions":
        return self.map(lambda f: f[idx])


def extractor_forward(params: UNet, x):
    """Segmentation logits ``(4, H, W)`` (or batched) and the extractor pyramid."""
    if params.role != "extractor":
        raise ValueError("extractor_forward needs an extractor-role model")
    single = x.dim() == 2
    if single:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None] if x.shape[0] != params.config.in_channels else x[None]
    logits, pyr = params(x)
    if single:
        logits = logits[0]
    return logits, pyr


def fuse_depth_features(pyramids: Sequence[FeaturePyramid], weights: Sequence[float]) -> FusedConditions:
    """Weighted sum over depths, level by level, of encoder and decoder taps."""
    weights = tuple(weights)
    if len(pyramids) != len(weights):
        raise ValueError(f"{len(pyramids)} pyramids but {len(weights)} depth weights")
    ref = pyramids[0].shapes()
    for d, p in enumerate(pyramids[1:], start=2):
        if p.shapes() != ref:
            raise ValueError(f"pyramid for depth {d} has shapes {p.shapes()}, expected {ref}")

    def blend(feats):
        out = weights[0] * feats[0]
        for w, f in zip(weights[1:], feats[1:]):
            out = out + w * f
        return out

    M = pyramids[0].M
    enc = [blend([p.encoder_feats[i] for p in pyramids]) for i in range(M)]
    dec = [blend([p.decoder_feats[i] for p in pyramids]) for i in range(M)]
    return FusedConditions(enc, dec)


def extract_conditions(extractor: UNet, stack, weights: Sequence[float]) -> FusedConditions:
    """Run the extractor on every depth image independently and fuse.

    ``stack`` has shape ``(D, H, W)`` (single case) or ``(B, D, H, W)``.
    """
    stack = torch.as_tensor(stack)
    batched = stack.dim() == 4
    if not batched:
        stack = stack[None]
    b, d = stack.shape[:2]
    if d != len(weights):
        raise ValueError(f"stack has {d} depths, weights expect {len(weights)}")
    with torch.no_grad():
        _, pyr = extractor(stack.reshape(b * d, 1, *stack.shape[2:]))
    per_depth = [
        FeaturePyramid(
            [f.reshape(b, d, *f.shape[1:])[:, k] for f in pyr.encoder_feats],
            [f.reshape(b, d, *f.shape[1:])[:, k] for f in pyr.decoder_feats],
        )
        for k in range(d)
    ]
    return fuse_depth_features(per_depth, weights)


@dataclass
class TunerConfig:
    channels: tuple  # C_i per skip level
    reduction: int = 4
    activation: str = "gelu"


class Tuner(nn.Module):
    """Per-level bottleneck ``W_up . phi(W_down . (f_i + F^_i))`` as 1x1 convolutions.

    The up-projections start at zero, so a fresh tuner contributes nothing.
    """

    def __init__(self, channels: Sequence[int], reduction: int = 4, activation: str = "gelu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.config = TunerConfig(tuple(int(c) for c in channels), int(reduction), activation)
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        for c in self.config.channels:
            hidden = max(1, c // reduction)
            self.down.append(nn.Conv2d(c, hidden, 1, bias=False))
            up = nn.Conv2d(hidden, c, 1, bias=False)
            nn.init.zeros_(up.weight)
            self.up.append(up)
        self.phi = ACTIVATIONS[activation]
        self.meta: dict = {}

    @classmethod
    def for_backbone(cls, model: UNet, reduction: int = 4, activation: str = "gelu", max_fraction: float = 0.10):
        tuner = cls(model.config.level_channels[: model.config.M], reduction, activation)
        frac = tuner.num_parameters() / model.num_parameters()
        if frac >= max_fraction:
            raise ValueError(f"tuner uses {frac:.1%} of backbone parameters (limit {max_fraction:.0%})")
        return tuner

    @property
    def M(self) -> int:
        return len(self.down)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, f, cond, level: int):
        if not 1 <= level <= self.M:
            raise ValueError(f"tuner level {level} outside 1..{self.M}")
        if tuple(f.shape[-3:]) != tuple(cond.shape[-3:]):
            raise ValueError(f"tuner level {level}: shape mismatch {tuple(f.shape)} vs {tuple(cond.shape)}")
        return self.up[level - 1](self.phi(self.down[level - 1](f + cond)))


def tuner_apply(f_i, F_i, tuner: Tuner, level: int):
    return tuner(f_i, F_i, level)


def skip_first_operand(f_i, F_i, Fstar_i, tuner: Tuner, level: int, skip_mode: str = "replace"):
    """First concatenation operand of a conditioned skip.

    ``replace``: ``T(f_i, F^_i) + F^*_i`` (the raw encoder feature enters only
    through the tuner).  ``residual``: additionally adds ``f_i``.
    """
    if skip_mode not in SKIP_MODES:
        raise ValueError(f"unknown skip_mode {skip_mode!r}")
    if tuple(Fstar_i.shape[-3:]) != tuple(f_i.shape[-3:]):
        raise ValueError(f"level {level}: decoder condition shape {tuple(Fstar_i.shape)} != {tuple(f_i.shape)}")
    out = tuner(f_i, F_i, level) + Fstar_i
    if skip_mode == "residual":
        out = out + f_i
    return out


def conditioned_skip(f_i, fstar_i, F_i, Fstar_i, tuner: Tuner, level: int, skip_mode: str = "replace"):
    if tuple(fstar_i.shape[-2:]) != tuple(f_i.shape[-2:]):
        raise ValueError(f"level {level}: cannot concatenate {tuple(f_i.shape)} with {tuple(fstar_i.shape)}")
    first = skip_first_operand(f_i, F_i, Fstar_i, tuner, level, skip_mode)
    return torch.cat([first, fstar_i], dim=-3)


def save_tuner(tuner: Tuner, path, extra: dict | None = None) -> str:
    arrays = {k: v.detach().cpu().numpy() for k, v in tuner.state_dict().items()}
    meta = {"kind": "tuner", "config": asdict(tuner.config)}
    meta.update(extra or {})
    return save_arrays(path, arrays, meta)


def load_tuner(path) -> Tuner:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "tuner":
        raise CheckpointError(f"{path} is not a tuner checkpoint")
    cfg = meta["config"]
    tuner = Tuner(cfg["channels"], cfg["reduction"], cfg["activation"])
    tuner.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    tuner.meta = meta  # training provenance: skip_mode, frozen backbone digests
    return tuner
