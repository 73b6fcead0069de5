"""U-Net shared by the noise predictor and the spine feature extractor.

The network has ``M`` encoder levels, each ending in a skip tap ``f_i``
(taken after the level's residual blocks, before down-sampling), a middle
block with self-attention at the lowest resolution, and a mirrored decoder.
In the decoder, ``f*_i`` is the up-sampled feature arriving at skip level
``i``; it always has the same shape as ``f_i``.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1
ROLES = ("diffusion", "extractor")


@dataclass
class BackboneConfig:
    image_size: int = 256
    in_channels: int = 1
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 2, 4)
    M: int = 3
    out_channels: int = 1
    use_timestep_embedding: bool = True
    embedding_dim: int = 0  # 0 -> 4 * base_channels
    num_res_blocks: int = 2
    attention: bool = True
    # diffusion role: raw head output is read as v and converted to eps
    prediction: str = "v"
    schedule_T: int = 1000
    schedule_s: float = 0.008

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.embedding_dim == 0:
            self.embedding_dim = 4 * self.base_channels
        if len(self.channel_multipliers) != self.M + 1:
            raise ValueError(f"need M+1={self.M + 1} channel multipliers, got {self.channel_multipliers}")
        if self.image_size % (2**self.M):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^M={2**self.M}")
        if self.out_channels not in (1, 4):
            raise ValueError(f"out_channels must be 1 (noise) or 4 (segmentation), got {self.out_channels}")
        if self.embedding_dim % 2:
            raise ValueError("embedding_dim must be even")
        if self.prediction not in ("eps", "v"):
            raise ValueError(f"prediction must be 'eps' or 'v', got {self.prediction!r}")

    @property
    def level_channels(self) -> list[int]:
        """Channels per level including the bottleneck (length M+1)."""
        return [self.base_channels * m for m in self.channel_multipliers]

    def skip_shapes(self) -> list[tuple[int, int, int]]:
        """(C_i, H_i, W_i) at skip levels i = 1..M."""
        s = self.image_size
        return [(c, s >> i, s >> i) for i, c in enumerate(self.level_channels[: self.M])]

    def role_variant(self, role: str) -> "BackboneConfig":
        """Same architecture configured for the other role."""
        d = asdict(self)
        d["out_channels"] = 1 if role == "diffusion" else 4
        d["use_timestep_embedding"] = role == "diffusion"
        return BackboneConfig(**d)


@dataclass
class FeaturePyramid:
    """Skip-level taps. ``encoder_feats = [F_1..F_M]``, ``decoder_feats = [F*_M..F*_1]``."""

    encoder_feats: list
    decoder_feats: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.encoder_feats)

    def encoder(self, level: int):
        return self.encoder_feats[level - 1]

    def decoder(self, level: int):
        return self.decoder_feats[self.M - level]

    def shapes(self) -> list:
        return [tuple(f.shape) for f in self.encoder_feats + self.decoder_feats]


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding ``[sin(t w_k)..., cos(t w_k)...]`` with ``w_k = 10000^(-2k/dim)``.

    ``t`` may be a scalar or a 1-D tensor of timesteps; the result has shape
    ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    scalar = not torch.is_tensor(t) and np.ndim(t) == 0
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if torch.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * 2 * torch.arange(half, dtype=torch.float64) / dim)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[0] if scalar else emb


def _groups(channels: int) -> int:
    g = min(32, max(1, channels // 4))
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: Optional[int]):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    """Encoder/decoder backbone with exposed skip features.

    ``role`` is ``"diffusion"`` (timestep-conditioned noise predictor, one
    output channel) or ``"extractor"`` (four-class segmentation logits).
    """

    def __init__(self, config: BackboneConfig, role: str = "diffusion"):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        if (role == "diffusion") != config.use_timestep_embedding:
            raise ValueError("diffusion role requires timestep embedding; extractor role excludes it")
        self.config = config
        self.role = role
        chans = config.level_channels
        emb_dim = config.embedding_dim if config.use_timestep_embedding else None
        if emb_dim:
            self.time_embed = nn.Sequential(
                nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
            )
        self.conv_in = nn.Conv2d(config.in_channels, chans[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = chans[0]
        for i in range(config.M):
            blocks = nn.ModuleList()
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(c_prev, chans[i], emb_dim))
                c_prev = chans[i]
            self.enc_blocks.append(blocks)
            self.downs.append(nn.Conv2d(chans[i], chans[i], 3, stride=2, padding=1))

        self.mid1 = ResBlock(chans[config.M - 1], chans[config.M], emb_dim)
        self.mid_attn = AttentionBlock(chans[config.M]) if config.attention else nn.Identity()
        self.mid2 = ResBlock(chans[config.M], chans[config.M], emb_dim)

        # decoder lists are indexed by level-1 (level 1 = full resolution)
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(config.M):
            self.ups.append(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1))
            blocks = nn.ModuleList()
            c_in = 2 * chans[i]
            for _ in range(config.num_res_blocks):
                blocks.append(ResBlock(c_in, chans[i], emb_dim))
                c_in = chans[i]
            self.dec_blocks.append(blocks)

        self.norm_out = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], config.out_channels, 3, padding=1)
        self._alpha_bar = None
        if role == "diffusion" and config.prediction == "v":
            from .diffusion import make_cosine_schedule

            # plain attribute, not a buffer: kept out of checkpoints
            self._alpha_bar = torch.tensor(make_cosine_schedule(config.schedule_T, config.schedule_s).alpha_bar)

    # -- helpers ---------------------------------------------------------
    def _embed(self, t, batch: int, dtype):
        if self.role != "diffusion":
            if t is not None:
                raise ValueError("extractor does not take a timestep")
            return None
        if t is None:
            raise ValueError("diffusion role requires a timestep")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and batch > 1:
            t = t.expand(batch)
        emb = timestep_embedding(t, self.config.embedding_dim).to(dtype)
        return self.time_embed(emb)

    def _v_to_eps(self, v, x_t, t):
        """``eps = sqrt(ab) * v + sqrt(1 - ab) * x_t``; keeps eps exact where ab -> 0."""
        t = torch.as_tensor(t).reshape(-1).long()
        ab = self._alpha_bar[t].to(v.dtype).reshape(-1, 1, 1, 1)
        return ab.sqrt() * v + (1 - ab).sqrt() * x_t

    def named_arrays(self) -> dict:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- forward ---------------------------------------------------------
    def forward(self, x, t=None, conditions=None, tuner=None, skip_mode: str = "replace"):
        """Return ``(output, FeaturePyramid)``.

        Without ``conditions`` every skip level concatenates ``[f_i, f*_i]``.
        With ``conditions`` (a ``FusedConditions``) and ``tuner``, the first
        operand is replaced by the conditioned skip of
        :func:`morphdiff.conditioning.conditioned_skip`.
        """
        if (conditions is None) != (tuner is None):
            raise ValueError("conditions and tuner must be given together")
        cfg = self.config
        if x.dim() == 3:
            x = x[None]
        if tuple(x.shape[1:]) != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match "
                f"{(cfg.in_channels, cfg.image_size, cfg.image_size)}"
            )
        emb = self._embed(t, x.shape[0], x.dtype)

        h = self.conv_in(x)
        enc = []
        for i in range(cfg.M):
            for block in self.enc_blocks[i]:
                h = block(h, emb)
            enc.append(h)
            h = self.downs[i](h)

        h = self.mid1(h, emb)
        h = self.mid_attn(h)
        h = self.mid2(h, emb)

        dec = []
        for i in reversed(range(cfg.M)):
            h = self.ups[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            dec.append(h)
            level = i + 1
            if conditions is None:
                first = enc[i]
            else:
                from .conditioning import skip_first_operand

                first = skip_first_operand(
                    enc[i], conditions.encoder(level), conditions.decoder(level), tuner, level, skip_mode
                )
            h = torch.cat([first, h], dim=1)
            for block in self.dec_blocks[i]:
                h = block(h, emb)

        out = self.conv_out(F.silu(self.norm_out(h)))
        if self._alpha_bar is not None:
            out = self._v_to_eps(out, x, t)
        return out, FeaturePyramid(encoder_feats=enc, decoder_feats=dec)


def unet_forward(params: UNet, x, t=None, skip_conditions=None, tuner=None, skip_mode: str = "replace"):
    return params(x, t, conditions=skip_conditions, tuner=tuner, skip_mode=skip_mode)


def encoder_decoder_shapes(model: UNet) -> dict:
    """Parameter shapes of everything except the timestep/class specific layers."""
    skip = ("time_embed.", "conv_out.")
    return {
        k: tuple(v.shape)
        for k, v in model.state_dict().items()
        if not k.startswith(skip) and ".emb." not in k
    }


# -- checkpoints -----------------------------------------------------------
def params_digest(arrays: dict) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def module_digest(module: nn.Module) -> str:
    return params_digest({k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})


def save_arrays(path, arrays: dict, meta: dict) -> str:
    """Write an ``.npz`` container: one entry per array plus ``__meta__`` JSON.

    Returns the parameter digest, which is also stored in the metadata.
    """
    if any(k.startswith("__") for k in arrays):
        raise ValueError("array names must not start with '__'")
    meta = dict(meta, format_version=CHECKPOINT_FORMAT_VERSION, digest=params_digest(arrays))
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())
    return meta["digest"]


class CheckpointError(RuntimeError):
    pass


def load_arrays(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (ValueError, KeyError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    if params_digest(arrays) != meta.get("digest"):
        raise CheckpointError(f"{path}: digest mismatch, file corrupt")
    return arrays, meta


def save_model(model: UNet, path, extra: Optional[dict] = None) -> str:
    meta = {
        "kind": "backbone",
        "role": model.role,
        "config": asdict(model.config),
        "block_design": f"{model.config.num_res_blocks} residual blocks/level, GroupNorm, SiLU, "
                        f"attention at lowest resolution: {model.config.attention}",
    }
    meta.update(extra or {})
    return save_arrays(path, model.named_arrays(), meta)


def load_model(path, role: Optional[str] = None) -> UNet:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    if role is not None and meta["role"] != role:
        raise CheckpointError(f"{path} holds a {meta['role']} model, expected {role}")
    cfg = BackboneConfig(**meta["config"])
    model = UNet(cfg, role=meta["role"])
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model


def load_state(model: nn.Module, arrays: dict):
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def same_architecture(a: Sequence[UNet]) -> bool:
    shapes = [encoder_decoder_shapes(m) for m in a]
    return all(s == shapes[0] for s in shapes[1:])
