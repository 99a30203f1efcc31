"""Transformer denoiser that predicts the clean motion from a noisy one.

Each decoder block runs self-attention, FiLM timestep modulation,
cross-attention over encoded music tokens, style modulation and a
feed-forward layer, all with residual connections and pre-normalisation.
Missing music is a learned null memory token; a missing style prompt is a
learned null embedding fed through the same style-modulation layer.

Checkpoint layout (``.npz``): a ``__header__`` entry holding UTF-8 JSON
``{"format": "dancediff-checkpoint", "version": 1, "config": {...},
"dtype": ..., "skeleton": {...} | null, "extra": {...}}`` and one
``param/<name>`` entry per parameter, keyed by ``named_parameters`` names.
Training checkpoints add ``optim/<name>/exp_avg`` and
``optim/<name>/exp_avg_sq`` arrays plus optimiser/RNG state in ``extra``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .skeleton import Skeleton, feature_width

CHECKPOINT_FORMAT = "dancediff-checkpoint"
CHECKPOINT_VERSION = 1
NORM_EPS = 1e-8


class SequenceTooLongError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    n_joints: int = 9
    d_model: int = 64
    n_heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    d_c: int = 16
    d_s: int = 32
    r: float = 1.0
    max_frames: int = 150
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.r <= 0:
            raise ValueError("style-modulation scale r must be positive")

    @property
    def feature_width(self) -> int:
        return feature_width(self.n_joints)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


PRESETS = {
    # gradient checks: smallest network that still exercises every layer
    "tiny": DenoiserConfig(n_joints=3, d_model=8, n_heads=2, encoder_depth=1, decoder_depth=1,
                           d_c=4, d_s=4, max_frames=16, ff_mult=2),
    "micro": DenoiserConfig(d_model=32, n_heads=4, encoder_depth=1, decoder_depth=1, max_frames=150),
    "desk": DenoiserConfig(),
    "large": DenoiserConfig(d_model=512, n_heads=8, encoder_depth=2, decoder_depth=8, max_frames=150),
}
# diffusion steps a preset implies when the run config leaves T unset
PRESET_STEPS = {"large": 1000}


def preset(name: str, **overrides) -> DenoiserConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# -- functional layers -----------------------------------------------------

def style_modulation(z: torch.Tensor, s_embed: torch.Tensor, weight: torch.Tensor,
                     bias: torch.Tensor, r: float) -> torch.Tensor:
    """(z / (||z|| r)) * FC(s) with the L2 norm taken per frame.

    The norm is clamped below at 1e-8 so zero rows map to zero.
    """
    style = s_embed @ weight.T + bias  # (..., d_z)
    norm = z.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    return z / (norm * r) * style.unsqueeze(-2)


def film(z: torch.Tensor, t_embed: torch.Tensor, scale_w: torch.Tensor, scale_b: torch.Tensor,
         shift_w: torch.Tensor, shift_b: torch.Tensor) -> torch.Tensor:
    scale = (t_embed @ scale_w.T + scale_b).unsqueeze(-2)
    shift = (t_embed @ shift_w.T + shift_b).unsqueeze(-2)
    return z * (1 + scale) + shift


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = positions.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


# -- modules ---------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, ignore=None):
        B, Fq, d = x.shape
        Fk = mem.shape[1]
        hd = d // self.h
        q = self.q(x).view(B, Fq, self.h, hd).transpose(1, 2)
        k = self.k(mem).view(B, Fk, self.h, hd).transpose(1, 2)
        v = self.v(mem).view(B, Fk, self.h, hd).transpose(1, 2)
        att = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if ignore is not None:
            att = att.masked_fill(ignore[:, None, None, :], float("-inf"))
        out = att.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, Fq, d))


class FeedForward(nn.Sequential):
    def __init__(self, d: int, mult: int):
        super().__init__(nn.Linear(d, d * mult), nn.GELU(), nn.Linear(d * mult, d))


class FiLM(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.scale = nn.Linear(d, d)
        self.shift = nn.Linear(d, d)

    def forward(self, z, t_embed):
        return film(z, t_embed, self.scale.weight, self.scale.bias, self.shift.weight, self.shift.bias)


class StyleModulation(nn.Module):
    def __init__(self, d_s: int, d: int, r: float):
        super().__init__()
        self.fc = nn.Linear(d_s, d)
        self.r = r

    def forward(self, z, s_embed):
        return style_modulation(z, s_embed, self.fc.weight, self.fc.bias, self.r)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult)

    def forward(self, h):
        y = self.norm1(h)
        h = h + self.attn(y, y)
        return h + self.ff(self.norm2(h))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.film = FiLM(d)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.style = StyleModulation(cfg.d_s, d, cfg.r)
        self.norm3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult)

    def forward(self, h, t_embed, mem, ignore, s_embed):
        y = self.norm1(h)
        h = h + self.self_attn(y, y)
        h = self.film(h, t_embed)
        h = h + self.cross_attn(self.norm2(h), mem, ignore)
        h = h + self.style(h, s_embed)
        return h + self.ff(self.norm3(h))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.feature_width, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.music_proj = nn.Linear(cfg.d_c, d)
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.encoder_depth))
        self.null_music = nn.Parameter(torch.randn(1, d) * 0.02)
        self.null_style = nn.Parameter(torch.randn(cfg.d_s) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.decoder_depth))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, cfg.feature_width)

    @property
    def dtype(self) -> torch.dtype:
        return self.in_proj.weight.dtype

    def forward(self, x, t, music=None, music_null=None, style=None, style_null=None):
        """x: (B, F, D); t: (B,) steps in 1..T; music: (B, F, d_c) or None;
        style: (B, d_s) or None. ``*_null`` are (B,) bools selecting the null condition.
        """
        B, F, _ = x.shape
        if F > self.cfg.max_frames:
            raise SequenceTooLongError(f"{F} frames exceed max_frames={self.cfg.max_frames}; use long-form mode")
        d = self.cfg.d_model
        pos = sinusoidal_embedding(torch.arange(F), d).to(x.dtype)
        t_embed = self.time_mlp(sinusoidal_embedding(torch.as_tensor(t), d).to(x.dtype))
        h = self.in_proj(x) + pos

        null_tok = self.null_music.expand(B, 1, d)
        if music is None:
            mem, ignore = null_tok, None
        else:
            if music_null is None:
                music_null = torch.zeros(B, dtype=torch.bool)
            enc = self.music_proj(music) + pos
            for blk in self.encoder:
                enc = blk(enc)
            mem = torch.cat([null_tok, enc], dim=1)
            ignore = torch.cat([~music_null[:, None], music_null[:, None].expand(B, F)], dim=1)

        if style is None:
            s = self.null_style.expand(B, -1)
        else:
            s = style if style_null is None else torch.where(style_null[:, None], self.null_style, style)

        for blk in self.blocks:
            h = blk(h, t_embed, mem, ignore, s)
        return self.out_proj(self.out_norm(h))

    @torch.no_grad()
    def predict(self, x_t: np.ndarray, t: int, c: np.ndarray | None = None,
                s: np.ndarray | None = None) -> np.ndarray:
        """Single-sample numpy wrapper: (F, D) noisy motion -> (F, D) clean estimate."""
        dt = self.dtype
        x = torch.as_tensor(np.asarray(x_t), dtype=dt)[None]
        music = None if c is None else torch.as_tensor(np.asarray(c), dtype=dt)[None]
        style = None if s is None else torch.as_tensor(np.asarray(s), dtype=dt)[None]
        out = self(x, torch.tensor([t]), music, None, style, None)
        return out[0].numpy().astype(np.float64)


def denoise(x_t, t, c, s, model: Denoiser, T: int | None = None) -> np.ndarray:
    """Clean-motion estimate for one sample; ``c``/``s`` may be None for the null condition."""
    if T is not None and not 1 <= t <= T:
        raise ValueError(f"step {t} outside 1..{T}")
    feats = getattr(c, "features", c)
    emb = getattr(s, "embedding", s)
    return model.predict(x_t, t, feats, emb)


# -- gradients -------------------------------------------------------------

def first_nonfinite(model: nn.Module) -> str | None:
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            return name
    return None


def gradients(loss_fn, model: nn.Module, batch) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss_fn(model, batch)`` for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model, batch)
    if isinstance(loss, tuple):
        loss = loss[0]
    if not torch.isfinite(loss):
        bad = first_nonfinite(model)
        where = f"parameter '{bad}'" if bad else "the loss (all parameters finite)"
        raise NonFiniteLossError(f"non-finite loss {loss.item()}; first offending array: {where}")
    loss.backward()
    out = {}
    for name, p in model.named_parameters():
        g = p.grad
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().astype(np.float64)
    return out


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: Denoiser, skeleton: Skeleton | None = None,
                    extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "dtype": str(model.dtype).replace("torch.", ""),
        "skeleton": None if skeleton is None else skeleton.to_dict(),
        "extra": extra or {},
    }
    payload = {"__header__": np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)}
    for name, p in model.named_parameters():
        payload[f"param/{name}"] = p.detach().numpy().copy()
    for name, a in (arrays or {}).items():
        payload[name] = a
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return header, arrays


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    header, arrays = read_checkpoint(path)
    model = Denoiser(DenoiserConfig.from_dict(header["config"]))
    model.to(getattr(torch, header["dtype"]))
    missing = [n for n, _ in model.named_parameters() if f"param/{n}" not in arrays]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {missing}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
    model.eval()
    header["arrays"] = arrays
    return model, header
