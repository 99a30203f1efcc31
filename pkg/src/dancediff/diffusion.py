"""Noise schedule, losses, training loop and classifier-free guided sampling.

Sampling re-noises the clean estimate at every step,
``x_{t-1} = sqrt(abar_{t-1}) * x_tilde + coeff(t-1) * eps``, and returns the
estimate itself at t = 1. Masked editing in ``control`` plugs into the same
loop through ``step_fn``.

RNG draw order for a sample with seed ``s`` (``numpy.random.default_rng(s)``):
``x_T`` first, then one ``eps`` of shape (F, D) per step t = T..2.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .conditioning import AudioCondition, StylePrompt
from .denoiser import (Denoiser, NonFiniteLossError, SequenceTooLongError, first_nonfinite,
                       read_checkpoint, save_checkpoint)
from .skeleton import InsufficientFramesError, MotionSequence, Skeleton, fk_torch

NOISE_COEFFS = ("sqrt", "literal")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    noise_coeff: str = "sqrt"

    def alpha_bar(self, t):
        """abar_t for t in 0..T, with abar_0 = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.clip(t, 1, self.T) - 1])

    def signal(self, t):
        return np.sqrt(self.alpha_bar(t))

    def coeff(self, t):
        ab = self.alpha_bar(t)
        return np.sqrt(1.0 - ab) if self.noise_coeff == "sqrt" else 1.0 - ab


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
    return f / f[0]


def make_schedule(T: int = 50, kind: str = "cosine", beta_start: float = 1e-4, beta_end: float = 0.02,
                  noise_coeff: str = "sqrt") -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 diffusion steps, got {T}")
    if noise_coeff not in NOISE_COEFFS:
        raise ValueError(f"noise_coeff must be one of {NOISE_COEFFS}")
    if kind == "cosine":
        ab = _cosine_alpha_bar(T)
        betas = np.clip(1 - ab[1:] / ab[:-1], 0.0, 0.999)
    elif kind == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas), noise_coeff)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """sqrt(abar_t) x0 + coeff(t) eps. ``t`` may be an int or a per-item array (leading axis)."""
    a, b = sched.signal(t), sched.coeff(t)
    if np.ndim(t):
        shape = (-1,) + (1,) * (np.ndim(x0) - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    if isinstance(x0, torch.Tensor):
        a = torch.as_tensor(a, dtype=x0.dtype)
        b = torch.as_tensor(b, dtype=x0.dtype)
    else:
        a, b = float(a) if np.ndim(a) == 0 else a, float(b) if np.ndim(b) == 0 else b
    return a * x0 + b * eps


# -- losses ----------------------------------------------------------------

def split_features(x: torch.Tensor, n_joints: int):
    root = x[..., :3]
    rot = x[..., 3:3 + 6 * n_joints].reshape(x.shape[:-1] + (n_joints, 6))
    contacts = x[..., 3 + 6 * n_joints:]
    return root, rot, contacts


def geometric_losses_torch(x: torch.Tensor, x_hat: torch.Tensor, skel: Skeleton):
    """Joint, velocity and foot-contact losses for (..., F, D) feature tensors.

    Each is a mean over frames (or frame pairs) of a squared L2 norm summed
    over joints/channels, then averaged over any leading batch axes. Contact
    labels come from the ground-truth contact channels.
    """
    if x.shape[-2] < 2:
        raise InsufficientFramesError("geometric losses need at least 2 frames")
    J = skel.n_joints
    root, rot, contacts = split_features(x, J)
    root_h, rot_h, _ = split_features(x_hat, J)
    p = fk_torch(root, rot, skel)
    p_h = fk_torch(root_h, rot_h, skel)
    l_j = ((p - p_h) ** 2).sum(dim=(-1, -2)).mean()
    dv = (x[..., 1:, :] - x[..., :-1, :]) - (x_hat[..., 1:, :] - x_hat[..., :-1, :])
    l_v = (dv ** 2).sum(-1).mean()
    feet = p_h[..., list(skel.foot_joints), :]
    slide = (feet[..., 1:, :, :] - feet[..., :-1, :, :]) * contacts[..., :-1, :, None]
    l_f = (slide ** 2).sum(dim=(-1, -2)).mean()
    return l_j, l_v, l_f


def geometric_losses(x, x_hat, skel: Skeleton) -> tuple[float, float, float]:
    """Float-valued losses for a pair of motions (MotionSequence or (F, D) arrays)."""
    def feats(m):
        return torch.from_numpy(m.features() if isinstance(m, MotionSequence) else np.asarray(m, np.float64))
    with torch.no_grad():
        return tuple(float(v) for v in geometric_losses_torch(feats(x), feats(x_hat), skel))


# -- training --------------------------------------------------------------

@dataclass
class TrainingConfig:
    lambda_j: float = 1.0
    lambda_v: float = 1.0
    lambda_f: float = 1.0
    cond_dropout_music: float = 0.1
    cond_dropout_style: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 0.02
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    max_iters: int = 1000
    seed: int = 0
    T: int = 50
    schedule: str = "cosine"
    noise_coeff: str = "sqrt"
    checkpoint_every: int = 0

    def __post_init__(self):
        for p in (self.cond_dropout_music, self.cond_dropout_style):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"dropout probability {p} outside [0, 1]")
        if min(self.lambda_j, self.lambda_v, self.lambda_f) < 0:
            raise ValueError("loss weights must be non-negative")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def schedule_obj(self) -> NoiseSchedule:
        return make_schedule(self.T, self.schedule, noise_coeff=self.noise_coeff)


@dataclass
class TrainingData:
    """Stacked training windows: motion features, music features and style embeddings."""
    x: np.ndarray  # (N, F, D)
    music: np.ndarray  # (N, F, d_c)
    style: np.ndarray  # (N, d_s)

    def __post_init__(self):
        if not (len(self.x) == len(self.music) == len(self.style)) or len(self.x) == 0:
            raise ValueError("training data arrays must be nonempty and equally long")

    @classmethod
    def from_clips(cls, clips, style_embedding: Callable[[int], np.ndarray]) -> "TrainingData":
        clips = list(clips)
        if not clips:
            raise ValueError("no training clips")
        return cls(np.stack([c.motion.features() for c in clips]),
                   np.stack([c.audio.features for c in clips]),
                   np.stack([style_embedding(c.style_id) for c in clips]))


@dataclass
class Batch:
    x0: torch.Tensor
    music: torch.Tensor
    style: torch.Tensor
    t: np.ndarray
    eps: torch.Tensor
    drop_music: torch.Tensor
    drop_style: torch.Tensor


def draw_condition_drops(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    return rng.random(n) < p


def draw_batch(data: TrainingData, rng: np.random.Generator, tcfg: TrainingConfig,
               dtype=torch.float32) -> Batch:
    """Draw indices, steps, noise and condition drops, in that order."""
    B = tcfg.batch_size
    idx = rng.integers(0, len(data.x), size=B)
    t = rng.integers(1, tcfg.T + 1, size=B)
    eps = rng.standard_normal((B,) + data.x.shape[1:])
    drop_m = draw_condition_drops(rng, B, tcfg.cond_dropout_music)
    drop_s = draw_condition_drops(rng, B, tcfg.cond_dropout_style)
    return Batch(
        x0=torch.as_tensor(data.x[idx], dtype=dtype),
        music=torch.as_tensor(data.music[idx], dtype=dtype),
        style=torch.as_tensor(data.style[idx], dtype=dtype),
        t=t,
        eps=torch.as_tensor(eps, dtype=dtype),
        drop_music=torch.as_tensor(drop_m),
        drop_style=torch.as_tensor(drop_s),
    )


def full_loss(model: Denoiser, batch: Batch, sched: NoiseSchedule, tcfg: TrainingConfig,
              skel: Skeleton) -> tuple[torch.Tensor, dict]:
    """L = L_d + lambda_j L_j + lambda_v L_v + lambda_f L_f on one batch."""
    x_t = q_sample(batch.x0, batch.t, batch.eps, sched)
    x_hat = model(x_t, torch.as_tensor(batch.t), batch.music, batch.drop_music,
                  batch.style, batch.drop_style)
    l_d = ((batch.x0 - x_hat) ** 2).sum(-1).mean()
    l_j, l_v, l_f = geometric_losses_torch(batch.x0, x_hat, skel)
    total = l_d + tcfg.lambda_j * l_j + tcfg.lambda_v * l_v + tcfg.lambda_f * l_f
    parts = {"L_d": l_d, "L_j": l_j, "L_v": l_v, "L_f": l_f, "L": total}
    return total, parts


def make_optimizer(model: Denoiser, tcfg: TrainingConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay,
                             betas=tcfg.adam_betas)


def training_step(batch: Batch, model: Denoiser, optimizer, sched: NoiseSchedule,
                  tcfg: TrainingConfig, skel: Skeleton, iteration: int = 0) -> dict[str, float]:
    """One optimiser update; returns the float loss breakdown."""
    optimizer.zero_grad(set_to_none=True)
    total, parts = full_loss(model, batch, sched, tcfg, skel)
    if not torch.isfinite(total):
        bad = first_nonfinite(model)
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration}: "
            + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items())
            + (f"; first non-finite parameter '{bad}'" if bad else ""))
    total.backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()}


LOSS_COLUMNS = ("iteration", "L_d", "L_j", "L_v", "L_f", "L")


@dataclass
class Trainer:
    """Owns the model, optimiser and RNG stream; resumable from a run checkpoint."""
    model: Denoiser
    data: TrainingData
    tcfg: TrainingConfig
    skel: Skeleton
    iteration: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.sched = self.tcfg.schedule_obj()
        self.optimizer = make_optimizer(self.model, self.tcfg)
        self.rng = np.random.default_rng(self.tcfg.seed)

    def step(self) -> dict[str, float]:
        self.model.train()
        batch = draw_batch(self.data, self.rng, self.tcfg, self.model.dtype)
        parts = training_step(batch, self.model, self.optimizer, self.sched, self.tcfg,
                              self.skel, self.iteration)
        parts["iteration"] = self.iteration
        self.history.append(parts)
        self.iteration += 1
        return parts

    def run(self, n_iters: int | None = None, run_dir=None, log_every: int = 0) -> list[dict]:
        n = self.tcfg.max_iters - self.iteration if n_iters is None else n_iters
        log = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            log_path = run_dir / "loss.csv"
            fresh = not log_path.exists() or self.iteration == 0
            log = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.writer(log)
            if fresh:
                writer.writerow(LOSS_COLUMNS)
        try:
            for _ in range(n):
                parts = self.step()
                if log is not None:
                    writer.writerow([parts["iteration"]] + [repr(parts[k]) for k in LOSS_COLUMNS[1:]])
                if log_every and self.iteration % log_every == 0:
                    print(f"iter {self.iteration:5d}  L={parts['L']:.5f}  L_d={parts['L_d']:.5f}")
                every = self.tcfg.checkpoint_every
                if run_dir is not None and every and self.iteration % every == 0:
                    self.save(run_dir / f"ckpt_{self.iteration:06d}.npz")
        finally:
            if log is not None:
                log.close()
        return self.history

    def save(self, path) -> None:
        arrays, opt_meta = {}, []
        names = [n for n, _ in self.model.named_parameters()]
        state = self.optimizer.state_dict()
        for i, name in enumerate(names):
            st = state["state"].get(i)
            if st is None:
                opt_meta.append(None)
                continue
            arrays[f"optim/{name}/exp_avg"] = st["exp_avg"].numpy().copy()
            arrays[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
            opt_meta.append(float(st["step"]))
        extra = {
            "iteration": self.iteration,
            "training_config": self.tcfg.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            "optim_steps": opt_meta,
        }
        save_checkpoint(path, self.model, self.skel, extra, arrays)

    def load_state(self, path) -> None:
        """Restore parameters, optimiser moments, RNG stream and iteration counter."""
        header, arrays = read_checkpoint(path)
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
        extra = header["extra"]
        self.iteration = int(extra["iteration"])
        self.rng.bit_generator.state = extra["rng_state"]
        state = {"state": {}, "param_groups": self.optimizer.state_dict()["param_groups"]}
        for i, (name, _) in enumerate(self.model.named_parameters()):
            step = extra["optim_steps"][i]
            if step is None:
                continue
            state["state"][i] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
            }
        self.optimizer.load_state_dict(state)


def relative_loss_drop(history: list[dict], window: int = 20, key: str = "L") -> float:
    """Mean of the last ``window`` losses over the mean of the first ``window``."""
    vals = np.array([h[key] for h in history])
    w = max(1, min(window, len(vals) // 2))
    return float(vals[-w:].mean() / vals[:w].mean())


# -- sampling --------------------------------------------------------------

def _features(c):
    return c.features if isinstance(c, AudioCondition) else c


def _embedding(s):
    return s.embedding if isinstance(s, StylePrompt) else s


def guided_prediction(model, x_t: np.ndarray, t: int, c, s, w: float) -> np.ndarray:
    """w * x_hat(c, s) + (1 - w) * x_hat(null, s); one evaluation when w == 1 or c is None."""
    if c is None:
        return model.predict(x_t, t, None, s)
    cond = model.predict(x_t, t, c, s)
    if w == 1:
        return cond
    null = model.predict(x_t, t, None, s)
    return w * cond + (1 - w) * null


def sample_features(model, sched: NoiseSchedule, F: int, c=None, s=None, w: float = 1.0,
                    seed: int = 0, step_fn: Callable | None = None) -> np.ndarray:
    """Run the reverse process and return the (F, D) clean motion estimate.

    ``step_fn(x_t, t, x_tilde, eps)`` replaces the plain re-noising step.
    """
    c, s = _features(c), _embedding(s)
    D = model.cfg.feature_width
    if F > model.cfg.max_frames:
        raise SequenceTooLongError(f"{F} frames exceed max_frames={model.cfg.max_frames}; use long-form mode")
    if c is not None and np.shape(c)[0] != F:
        raise ValueError(f"music has {np.shape(c)[0]} frames, expected {F}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((F, D))
    for t in range(sched.T, 0, -1):
        x_tilde = guided_prediction(model, x, t, c, s, w)
        if t == 1:
            return x_tilde
        eps = rng.standard_normal((F, D))
        x = q_sample(x_tilde, t - 1, eps, sched) if step_fn is None else step_fn(x, t, x_tilde, eps)
    raise AssertionError("unreachable")


def guided_sample(c, s, w: float, model, sched: NoiseSchedule, F: int, seed: int = 0,
                  fps: float = 30.0) -> MotionSequence:
    x = sample_features(model, sched, F, c, s, w, seed)
    return MotionSequence.from_features(x, fps, model.cfg.n_joints)
