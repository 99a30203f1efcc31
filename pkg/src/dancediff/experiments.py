"""Small end-to-end training experiments shared by scripts/ and the test suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import encode_style
from .datagen import ClipRecord, synth_clip
from .denoiser import Denoiser, preset
from .diffusion import Trainer, TrainingConfig, TrainingData, guided_sample, relative_loss_drop
from .metrics import geometric_features, kinetic_features
from .skeleton import MotionSequence, Skeleton, forward_kinematics

BPMS = (120.0, 100.0, 110.0, 130.0)
STYLE_ITERS = 4000  # 2000 steps leaves some seeds ignoring style for one audio track


@dataclass
class ExperimentConfig:
    styles: tuple[int, ...] = (1, 2)
    clips_per_style: int = 2
    seconds: float = 2.0
    fps: float = 30.0
    preset: str = "micro"
    iters: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    torch_seed: int = 0
    sample_seed: int = 7
    w: float = 1.0


@dataclass
class ExperimentResult:
    loss_ratio: float
    seconds: float
    history: list = field(repr=False, default_factory=list)
    mpjpe: list = field(default_factory=list)
    accuracy: float = float("nan")


def shared_audio_clips(cfg: ExperimentConfig) -> list[ClipRecord]:
    """Clip k of every style uses the same bpm and seed, hence identical audio."""
    clips = []
    for style in cfg.styles:
        for k in range(cfg.clips_per_style):
            clips.append(synth_clip(style, BPMS[k % len(BPMS)], cfg.seconds, cfg.fps, seed=k + 1))
    return clips


def one_hot(style_id: int, d_s: int) -> np.ndarray:
    return encode_style("one_hot", style_id, 10, d_s).embedding


def train_on(clips: list[ClipRecord], cfg: ExperimentConfig) -> tuple[Denoiser, Trainer, float]:
    mcfg = preset(cfg.preset, n_joints=clips[0].skeleton.n_joints, max_frames=clips[0].motion.n_frames)
    data = TrainingData.from_clips(clips, lambda sid: one_hot(sid, mcfg.d_s))
    torch.manual_seed(cfg.torch_seed)
    model = Denoiser(mcfg)
    tcfg = TrainingConfig(batch_size=cfg.batch_size, lr=cfg.lr, max_iters=cfg.iters, seed=cfg.torch_seed)
    trainer = Trainer(model, data, tcfg, clips[0].skeleton)
    t0 = time.perf_counter()
    trainer.run()
    model.eval()
    return model, trainer, time.perf_counter() - t0


def mpjpe(a: MotionSequence, b: MotionSequence, skel: Skeleton) -> float:
    """Mean per-joint position error in meters."""
    return float(np.linalg.norm(forward_kinematics(skel, a) - forward_kinematics(skel, b), axis=-1).mean())


def overfit(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Memorise a handful of clips, then resample each one from its own audio and style."""
    clips = shared_audio_clips(cfg)
    model, trainer, secs = train_on(clips, cfg)
    errs = []
    for c in clips:
        x = guided_sample(c.audio, one_hot(c.style_id, model.cfg.d_s), cfg.w, model, trainer.sched,
                          c.motion.n_frames, cfg.sample_seed, c.motion.fps)
        errs.append(mpjpe(x, c.motion, c.skeleton))
    return ExperimentResult(relative_loss_drop(trainer.history), secs, trainer.history, errs)


def motion_descriptor(motion: MotionSequence, skel: Skeleton) -> np.ndarray:
    pos = forward_kinematics(skel, motion)
    return np.concatenate([kinetic_features(pos, skel, motion.fps), geometric_features(pos, skel)])


def nearest_centroid(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray) -> np.ndarray:
    """Labels of the closest class mean after z-scoring with the training statistics."""
    mu, sd = train_x.mean(0), train_x.std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    tx, qx = (train_x - mu) / sd, (test_x - mu) / sd
    labels = np.unique(train_y)
    centroids = np.stack([tx[train_y == k].mean(0) for k in labels])
    d = np.linalg.norm(qx[:, None, :] - centroids[None], axis=-1)
    return labels[np.argmin(d, axis=1)]


def style_conditioning(cfg: ExperimentConfig = ExperimentConfig(iters=STYLE_ITERS),
                       n_samples: int = 20) -> ExperimentResult:
    """Train on styles that share their audio, sample ``n_samples`` per style and classify them.

    Centroids come from the training clips; agreement is the fraction of
    samples classified as the style they were conditioned on.
    """
    clips = shared_audio_clips(cfg)
    model, trainer, secs = train_on(clips, cfg)
    skel = clips[0].skeleton
    train_x = np.stack([motion_descriptor(c.motion, skel) for c in clips])
    train_y = np.array([c.style_id for c in clips])
    audios = [c.audio for c in clips[:cfg.clips_per_style]]
    feats, labels = [], []
    for style in cfg.styles:
        s = one_hot(style, model.cfg.d_s)
        for i in range(n_samples):
            audio = audios[i % len(audios)]
            m = guided_sample(audio, s, cfg.w, model, trainer.sched, audio.n_frames,
                              cfg.sample_seed + i, audio.fps)
            feats.append(motion_descriptor(m, skel))
            labels.append(style)
    pred = nearest_centroid(train_x, train_y, np.stack(feats))
    acc = float(np.mean(pred == np.array(labels)))
    return ExperimentResult(relative_loss_drop(trainer.history), secs, trainer.history, accuracy=acc)
