"""Synthetic dance/music clips, window slicing, and the clip/corpus file formats."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import GENRES, AudioCondition, make_audio
from .skeleton import (MotionSequence, MotionValidationError, Skeleton, axis_angle_to_matrix,
                       desk_skeleton, extract_foot_contacts, forward_kinematics, matrix_to_rot6d)

TRAIN_WINDOW_S = 5.0
TRAIN_STRIDE_S = 0.5
TEST_STRIDE_S = 2.5
MANIFEST_NAME = "manifest.json"


class UnknownStyleError(ValueError):
    pass


class ClipFormatError(ValueError):
    pass


@dataclass
class ClipRecord:
    motion: MotionSequence
    audio: AudioCondition
    style_id: int
    seed: int
    skeleton: Skeleton = field(default_factory=desk_skeleton)

    def __post_init__(self):
        if self.motion.n_frames != self.audio.n_frames:
            raise ValueError(f"motion has {self.motion.n_frames} frames, audio {self.audio.n_frames}")
        if self.motion.n_joints != self.skeleton.n_joints:
            raise ValueError("motion joint count does not match skeleton")

    @property
    def duration(self) -> float:
        return self.motion.duration


@dataclass(frozen=True)
class StyleParams:
    beat_ratio: float  # joint oscillation frequency relative to the beat
    path: str
    path_radius: float
    kick: float
    abduction: float
    ankle: float
    bend: float
    twist: float
    nod: float
    yaw: float
    bounce: float


_RATIOS = (1.0, 2.0, 1.0, 2.0, 0.5, 1.0, 2.0, 1.0, 0.5, 2.0)
PATH_BEATS = 32.0
_PATHS = ("circle", "figure8", "sway", "still")


def style_params(style_id: int, n_styles: int = len(GENRES)) -> StyleParams:
    if not 1 <= style_id <= n_styles or style_id > len(GENRES):
        raise UnknownStyleError(f"style id {style_id} outside 1..{min(n_styles, len(GENRES))}")
    rng = np.random.default_rng(1000 + style_id)
    a = rng.uniform(0.0, 1.0, size=8)
    return StyleParams(
        beat_ratio=_RATIOS[style_id - 1],
        path=_PATHS[(style_id - 1) % len(_PATHS)],
        path_radius=0.15 + 0.2 * a[0],
        kick=0.3 + 0.5 * a[1],
        abduction=0.05 + 0.25 * a[2],
        ankle=0.1 + 0.4 * a[3],
        bend=0.05 + 0.35 * a[4],
        twist=0.1 + 0.5 * a[5],
        nod=0.1 + 0.3 * a[6],
        yaw=0.05 + 0.15 * a[7],
        bounce=0.0 if style_id % 2 else 0.02,
    )


def _floor_path(kind: str, phase: np.ndarray, radius: float) -> np.ndarray:
    if kind == "circle":
        xy = np.stack([radius * np.sin(phase), radius * (1 - np.cos(phase))], axis=1)
    elif kind == "figure8":
        xy = np.stack([radius * np.sin(phase), 0.5 * radius * np.sin(2 * phase)], axis=1)
    elif kind == "sway":
        xy = np.stack([radius * np.sin(phase), np.zeros_like(phase)], axis=1)
    else:
        xy = 0.1 * radius * np.stack([np.sin(phase), 1 - np.cos(phase)], axis=1)
    return xy


def _rot(axis: int, angle: np.ndarray) -> np.ndarray:
    aa = np.zeros(angle.shape + (3,))
    aa[..., axis] = angle
    return axis_angle_to_matrix(aa)


def synth_clip(style_id: int, bpm: float = 120.0, seconds: float = 8.0, fps: float = 30.0,
               seed: int = 0, n_styles: int = len(GENRES), d_c: int = 16) -> ClipRecord:
    """Deterministic dance clip on the desk skeleton.

    Joints oscillate at ``beat_ratio`` times the beat frequency with extremes
    on the beat grid; the root follows a closed floor path lasting 32 beats.
    The audio depends only on (bpm, seconds, fps, seed), so two styles with the
    same seed share identical music.
    """
    p = style_params(style_id, n_styles)
    F = int(round(seconds * fps))
    if F < 2:
        raise ValueError("a clip needs seconds * fps >= 2")
    skel = desk_skeleton()
    rng = np.random.default_rng([seed, style_id])
    jitter = rng.uniform(0.9, 1.1, size=10)
    start_angle = rng.uniform(0, 2 * np.pi)

    t = np.arange(F) / fps
    w = 2 * np.pi * p.beat_ratio * bpm / 60.0
    beat_phase = w * t
    half = np.sin(beat_phase / 2)

    R = np.tile(np.eye(3), (F, skel.n_joints, 1, 1))
    kick = p.kick * jitter[0]
    lift_l, lift_r = np.maximum(half, 0), np.maximum(-half, 0)
    R[:, 3] = _rot(0, kick * lift_l) @ _rot(1, p.abduction * jitter[1] * lift_l)
    R[:, 6] = _rot(0, kick * lift_r) @ _rot(1, -p.abduction * jitter[1] * lift_r)
    R[:, 4] = _rot(0, p.ankle * jitter[2] * lift_l)
    R[:, 7] = _rot(0, p.ankle * jitter[2] * lift_r)
    R[:, 1] = _rot(0, p.bend * jitter[3] * np.cos(beat_phase)) @ _rot(2, p.twist * jitter[4] * half)
    R[:, 2] = _rot(0, p.nod * jitter[5] * np.sin(beat_phase))

    path_phase = 2 * np.pi * t * (bpm / 60.0) / PATH_BEATS
    xy = _floor_path(p.path, path_phase, p.path_radius * jitter[6])
    c, s = np.cos(start_angle), np.sin(start_angle)
    xy = xy @ np.array([[c, s], [-s, c]])
    R[:, 0] = _rot(2, start_angle + p.yaw * jitter[7] * np.sin(path_phase))

    height = skel.rest_height() + p.bounce * jitter[8] * np.abs(half)
    root = np.column_stack([xy, height])
    motion = MotionSequence(fps, root, matrix_to_rot6d(R), np.zeros((F, 4)))
    motion.contacts = extract_foot_contacts(forward_kinematics(skel, motion), skel, fps)
    audio = make_audio(bpm, F / fps, fps, d_c=d_c, seed=seed)
    return ClipRecord(motion, audio, style_id, seed, skel)


def window_count(duration: float, window_s: float, stride_s: float) -> int:
    """floor((duration - window) / stride) + 1, or 0 when the clip is too short."""
    if duration + 1e-9 < window_s:
        return 0
    return int(math.floor((duration - window_s) / stride_s + 1e-9)) + 1


class Windows(list):
    """List of sliced clips; ``too_short`` flags a clip shorter than one window."""
    too_short: bool = False


def slice_windows(clip: ClipRecord, window_s: float = TRAIN_WINDOW_S,
                  stride_s: float = TRAIN_STRIDE_S) -> Windows:
    fps = clip.motion.fps
    wf, sf = int(round(window_s * fps)), int(round(stride_s * fps))
    if wf < 1 or sf < 1:
        raise ValueError("window and stride must span at least one frame")
    out = Windows()
    n = window_count(clip.duration, window_s, stride_s)
    if n == 0:
        out.too_short = True
        return out
    for k in range(n):
        a = k * sf
        out.append(ClipRecord(clip.motion.slice(a, a + wf), clip.audio.slice(a, a + wf),
                              clip.style_id, clip.seed, clip.skeleton))
    return out


# -- file formats ---------------------------------------------------------

def clip_to_dict(clip: ClipRecord) -> dict:
    d = clip.motion.to_dict(clip.skeleton)
    d["audio"] = clip.audio.to_dict()
    d["style_id"] = int(clip.style_id)
    d["seed"] = int(clip.seed)
    return d


def save_clip(clip: ClipRecord, path) -> None:
    Path(path).write_text(json.dumps(clip_to_dict(clip)))


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ClipFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e


def _field(d: dict, name: str, path, where: str = ""):
    if name not in d:
        raise ClipFormatError(f"{path}: missing field '{where}{name}'")
    return d[name]


def _array(d: dict, name: str, path, shape_tail: tuple, where: str = "") -> np.ndarray:
    raw = _field(d, name, path, where)
    try:
        a = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ClipFormatError(f"{path}: field '{where}{name}' is not a numeric array") from e
    if a.ndim != 1 + len(shape_tail) or any(s is not None and a.shape[i + 1] != s
                                             for i, s in enumerate(shape_tail)):
        raise ClipFormatError(f"{path}: field '{where}{name}' has shape {a.shape}")
    return a


def motion_from_dict(d: dict, path="<dict>") -> tuple[MotionSequence, Skeleton]:
    try:
        skel = Skeleton.from_dict(_field(d, "skeleton", path))
    except (KeyError, TypeError) as e:
        raise ClipFormatError(f"{path}: field 'skeleton' is malformed ({e})") from e
    except ValueError as e:
        raise ClipFormatError(f"{path}: field 'skeleton': {e}") from e
    fps = float(_field(d, "fps", path))
    root = _array(d, "root_translation", path, (3,))
    rot = _array(d, "rotations_6d", path, (skel.n_joints, 6))
    contacts = _array(d, "contacts", path, (4,))
    try:
        motion = MotionSequence(fps, root, rot, contacts)
    except MotionValidationError as e:
        raise ClipFormatError(f"{path}: {e}") from e
    return motion, skel


def load_motion(path) -> tuple[MotionSequence, Skeleton]:
    return motion_from_dict(_read_json(path), path)


def clip_from_dict(d: dict, path="<dict>") -> ClipRecord:
    motion, skel = motion_from_dict(d, path)
    a = _field(d, "audio", path)
    for name in ("fps", "bpm", "beat_times", "features"):
        _field(a, name, path, "audio.")
    try:
        audio = AudioCondition.from_dict(a)
    except ValueError as e:
        raise ClipFormatError(f"{path}: field 'audio': {e}") from e
    try:
        return ClipRecord(motion, audio, int(d.get("style_id", 0)), int(d.get("seed", 0)), skel)
    except ValueError as e:
        raise ClipFormatError(f"{path}: {e}") from e


def load_clip(path) -> ClipRecord:
    return clip_from_dict(_read_json(path), path)


# -- corpus ---------------------------------------------------------------

BPM_CHOICES = (90.0, 100.0, 110.0, 120.0, 130.0)


def corpus_plan(n_styles: int, clips_per_style: int, seed: int) -> list[tuple[int, int, float, int]]:
    """(style_id, clip_index, bpm, clip_seed) with one independent stream per clip."""
    children = np.random.SeedSequence(seed).spawn(n_styles * clips_per_style)
    plan = []
    for s in range(n_styles):
        for k in range(clips_per_style):
            child = children[s * clips_per_style + k]
            clip_seed = int(child.generate_state(1)[0])
            bpm = BPM_CHOICES[int(np.random.default_rng(child).integers(len(BPM_CHOICES)))]
            plan.append((s + 1, k, bpm, clip_seed))
    return plan


def synth_corpus(out_dir, n_styles: int = 4, clips_per_style: int = 8, seconds: float = 8.0,
                 fps: float = 30.0, seed: int = 0) -> dict:
    """Write clip files and a manifest; the last quarter of each style is held out."""
    if n_styles < 1 or clips_per_style < 1:
        raise ValueError("need at least one style and one clip per style")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = clips_per_style // 4 if clips_per_style >= 4 else 0
    entries = []
    for style_id, k, bpm, clip_seed in corpus_plan(n_styles, clips_per_style, seed):
        clip = synth_clip(style_id, bpm, seconds, fps, clip_seed, n_styles=max(n_styles, 1))
        name = f"clip_s{style_id:02d}_{k:03d}.json"
        save_clip(clip, out / name)
        split = "test" if k >= clips_per_style - n_test else "train"
        entries.append({"path": name, "style_id": style_id, "split": split, "bpm": bpm, "seed": clip_seed})
    manifest = {
        "version": 1,
        "fps": fps,
        "seconds": seconds,
        "n_styles": n_styles,
        "window_s": TRAIN_WINDOW_S,
        "train_stride_s": TRAIN_STRIDE_S,
        "test_stride_s": TEST_STRIDE_S,
        "clips": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_corpus(data_dir, split: str | None = None) -> list[ClipRecord]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST_NAME).read_text())
    return [load_clip(data_dir / e["path"]) for e in manifest["clips"]
            if split is None or e["split"] == split]
