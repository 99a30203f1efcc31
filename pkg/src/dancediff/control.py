"""Spatial-temporal masked editing and long-form generation by overlap blending.

Mask slots: slot 0 is the root translation, slot j + 1 holds joint j's six
rotation channels, and each contact channel shares the slot of its foot
joint. A mask is an (F, J + 1) 0/1 grid over those slots.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import AudioCondition
from .diffusion import NoiseSchedule, guided_sample, q_sample, sample_features
from .skeleton import MotionSequence, Skeleton, feature_width

TASK_KINDS = ("trajectory", "seed_motion", "in_betweening", "inpainting", "upper_body", "lower_body")
DEFAULT_INPAINT_FRACTION = 0.7


class UnknownTaskError(ValueError):
    pass


def slot_layout(skel: Skeleton) -> np.ndarray:
    """Slot index for every feature channel."""
    J = skel.n_joints
    layout = np.empty(feature_width(J), dtype=np.int64)
    layout[:3] = 0
    layout[3:3 + 6 * J] = np.repeat(np.arange(J) + 1, 6)
    layout[3 + 6 * J:] = np.asarray(skel.foot_joints) + 1
    return layout


@dataclass
class SpatialTemporalMask:
    entries: np.ndarray  # (F, J + 1) of 0/1
    slot_layout: np.ndarray  # (D,) channel -> slot

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.uint8)
        if not np.all((self.entries == 0) | (self.entries == 1)):
            raise ValueError("mask entries must be 0 or 1")
        n_slots = self.entries.shape[1]
        if self.slot_layout.min() < 0 or self.slot_layout.max() >= n_slots:
            raise ValueError("slot layout references slots outside the mask")

    @property
    def n_frames(self) -> int:
        return self.entries.shape[0]

    def expand(self) -> np.ndarray:
        """(F, D) boolean mask over feature channels."""
        return self.entries[:, self.slot_layout].astype(bool)

    def known_frames(self) -> np.ndarray:
        return np.flatnonzero(self.entries.all(axis=1))

    def to_dict(self) -> dict:
        return {"grid": self.entries.tolist(), "slot_layout": self.slot_layout.tolist()}


@dataclass
class EditTask:
    kind: str
    known_motion: MotionSequence
    inpaint_fraction: float = DEFAULT_INPAINT_FRACTION
    seed: int = 0
    audio: AudioCondition | None = None
    style: object = None  # style id or genre name, resolved by the caller
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise UnknownTaskError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")


def build_mask(task: EditTask, F: int, skel: Skeleton) -> SpatialTemporalMask:
    if F < 2:
        raise ValueError("masks need at least 2 frames")
    if task.kind not in TASK_KINDS:
        raise UnknownTaskError(f"unknown task kind {task.kind!r}")
    n_slots = skel.n_joints + 1
    M = np.zeros((F, n_slots), dtype=np.uint8)
    lower_slots = [0] + [j + 1 for j in sorted(skel.lower_body)]
    upper_slots = [j + 1 for j in sorted(skel.upper_body)]
    if task.kind == "trajectory":
        M[:, 0] = 1
    elif task.kind == "seed_motion":
        M[:2] = 1
    elif task.kind == "in_betweening":
        M[[0, F - 1]] = 1
    elif task.kind == "inpainting":
        n_known = math.ceil(task.inpaint_fraction * F - 1e-9)
        rows = np.random.default_rng(task.seed).choice(F, size=n_known, replace=False)
        M[rows] = 1
    elif task.kind == "upper_body":
        M[:, lower_slots] = 1
    else:
        M[:, upper_slots] = 1
    return SpatialTemporalMask(M, slot_layout(skel))


def _expanded(mask) -> np.ndarray:
    return mask.expand() if isinstance(mask, SpatialTemporalMask) else np.asarray(mask, dtype=bool)


def masked_reverse_step(x_t, x0_known, mask, t: int, x_tilde, sched: NoiseSchedule,
                        eps_known, eps_unknown) -> np.ndarray:
    """Noise the known motion and the clean estimate to t-1, then select per channel.

    Returns M * known + (1 - M) * unknown with M the channel-expanded mask.
    """
    M = _expanded(mask)
    shapes = {np.shape(a) for a in (x_t, x0_known, x_tilde, eps_known, eps_unknown)}
    if len(shapes) != 1 or M.shape != np.shape(x_t):
        raise ValueError(f"shape mismatch in masked step: {shapes} vs mask {M.shape}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")
    known = q_sample(x0_known, t - 1, eps_known, sched)
    unknown = q_sample(x_tilde, t - 1, eps_unknown, sched)
    return np.where(M, known, unknown)


def pad_known(known: MotionSequence, F: int) -> np.ndarray:
    """Known features padded (edge-repeated) or cropped to F frames."""
    x = known.features()
    if x.shape[0] >= F:
        return x[:F].copy()
    return np.concatenate([x, np.repeat(x[-1:], F - x.shape[0], axis=0)], axis=0)


def edit_features(mask, x0_known: np.ndarray, model, sched: NoiseSchedule, c=None, s=None,
                  w: float = 1.0, seed: int = 0) -> np.ndarray:
    """Masked sampling; the known-branch noise comes from its own stream so an
    all-zero mask reproduces plain sampling bit for bit."""
    M = _expanded(mask)
    F = M.shape[0]
    known_rng = np.random.default_rng([seed, 1])

    def step(x_t, t, x_tilde, eps):
        eps_known = known_rng.standard_normal(x_t.shape)
        return masked_reverse_step(x_t, x0_known, M, t, x_tilde, sched, eps_known, eps)

    x = sample_features(model, sched, F, c, s, w, seed, step_fn=step)
    return np.where(M, x0_known, x)


def edit(task: EditTask, c, s, w: float, model, sched: NoiseSchedule, seed: int,
         skel: Skeleton, F: int | None = None) -> tuple[MotionSequence, SpatialTemporalMask]:
    """Generate motion honouring the task's constraints; known channels are copied exactly at the end."""
    F = task.known_motion.n_frames if F is None else F
    mask = build_mask(task, F, skel)
    x0 = pad_known(task.known_motion, F)
    x = edit_features(mask, x0, model, sched, c, s, w, seed)
    return MotionSequence.from_features(x, task.known_motion.fps, skel.n_joints), mask


# -- long-form ---------------------------------------------------------------

def blend_weights(n_overlap: int) -> np.ndarray:
    """Weight of the earlier slice across an overlap, ramping linearly from 1 to 0."""
    if n_overlap == 1:
        return np.array([0.5])
    return 1.0 - np.arange(n_overlap) / (n_overlap - 1)


def stitch_features(slices: list[np.ndarray], n_overlap: int) -> np.ndarray:
    out = np.asarray(slices[0], dtype=np.float64)
    lam = blend_weights(n_overlap)[:, None]
    for nxt in slices[1:]:
        nxt = np.asarray(nxt, dtype=np.float64)
        prev_tail, next_head = out[-n_overlap:], nxt[:n_overlap]
        mixed = next_head + lam * (prev_tail - next_head)
        mixed = np.clip(mixed, np.minimum(prev_tail, next_head), np.maximum(prev_tail, next_head))
        out = np.concatenate([out[:-n_overlap], mixed, nxt[n_overlap:]], axis=0)
    return out


def stitch_long(slices: list[MotionSequence], overlap_s: float) -> MotionSequence:
    """Blend consecutive slices over ``overlap_s`` seconds; contacts are re-thresholded at 0.5."""
    if not slices:
        raise ValueError("nothing to stitch")
    fps = slices[0].fps
    if any(m.fps != fps for m in slices):
        raise ValueError("slices must share one frame rate")
    J = slices[0].n_joints
    if any(m.n_joints != J for m in slices):
        raise ValueError("slices must share one joint count")
    n_overlap = int(round(overlap_s * fps))
    if n_overlap < 1 or any(m.n_frames <= n_overlap for m in slices):
        raise ValueError(f"every slice must be longer than the {n_overlap}-frame overlap")
    x = stitch_features([m.features() for m in slices], n_overlap)
    return MotionSequence.from_features(x, fps, J)


def long_form_plan(total: int, window: int, overlap: int) -> list[int]:
    """Start frames of windows covering ``total`` frames with a fixed overlap."""
    if total <= window:
        return [0]
    stride = window - overlap
    n = math.ceil((total - window) / stride) + 1
    return [k * stride for k in range(n)]


def pad_audio(audio: AudioCondition, F: int) -> np.ndarray:
    feats = audio.features
    if feats.shape[0] >= F:
        return feats[:F]
    return np.concatenate([feats, np.repeat(feats[-1:], F - feats.shape[0], axis=0)], axis=0)


def generate_long(audio: AudioCondition, s, w: float, model, sched: NoiseSchedule, seed: int,
                  window: int | None = None, overlap_s: float | None = None) -> MotionSequence:
    """Sample overlapping windows (half-window overlap by default) and stitch them.

    The last window runs over padded music and is cropped back to the audio length.
    """
    window = model.cfg.max_frames if window is None else window
    fps = audio.fps
    n_overlap = window // 2 if overlap_s is None else int(round(overlap_s * fps))
    F = audio.n_frames
    starts = long_form_plan(F, window, n_overlap)
    total = starts[-1] + window
    feats = pad_audio(audio, total)
    slices = [guided_sample(feats[a:a + window], s, w, model, sched, window, seed + k, fps)
              for k, a in enumerate(starts)]
    if len(slices) == 1:
        return slices[0].slice(0, F) if F < window else slices[0]
    out = stitch_long(slices, n_overlap / fps)
    return out.slice(0, F)


# -- task files --------------------------------------------------------------

def load_task(path) -> EditTask:
    """Task JSON: ``{kind, known_motion_path, inpaint_fraction?, seed, audio_path?, style?}``.

    Relative paths resolve against the task file's directory. When the known
    motion file is a full clip, its audio and style id are picked up too.
    """
    from .datagen import load_clip, load_motion

    path = Path(path)
    raw_task = json.loads(path.read_text())
    for key in ("kind", "known_motion_path"):
        if key not in raw_task:
            raise ValueError(f"{path}: missing field '{key}'")
    if raw_task["kind"] not in TASK_KINDS:
        raise UnknownTaskError(f"{path}: unknown task kind {raw_task['kind']!r}")
    known_path = path.parent / raw_task["known_motion_path"]
    raw = json.loads(known_path.read_text())
    audio, style = None, raw_task.get("style")
    if "audio" in raw:
        clip = load_clip(known_path)
        motion, audio = clip.motion, clip.audio
        style = style if style is not None else clip.style_id
    else:
        motion, _ = load_motion(known_path)
    if "audio_path" in raw_task:
        audio = AudioCondition.from_dict(json.loads((path.parent / raw_task["audio_path"]).read_text()))
    return EditTask(raw_task["kind"], motion, float(raw_task.get("inpaint_fraction", DEFAULT_INPAINT_FRACTION)),
                    int(raw_task.get("seed", 0)), audio, style, raw_task)
