"""Beat alignment, physical foot contact, FID and diversity for dance motion.

Feature spaces
--------------
kinetic (length J): per-joint mean squared velocity, m^2/s^2.

geometric (length 32): frame averages of boolean pose predicates in world
coordinates (z up, +x the dancer's left, +y forward). Landmarks: root R,
top T (upper-body joint highest in the rest pose, or R), heels LH/RH and
toes LT/RT. ``h0`` is the rest root height; heights are above the floor
(lowest foot joint of the frame). Index: predicate (pairs 2k/2k+1 are
left/right mirror images unless noted):

 0/1   LH / RH height > 0.10
 2/3   LT / RT height > 0.10
 4/5   LH above RH by > 0.02 / RH above LH by > 0.02
 6/7   LT above RT by > 0.02 / RT above LT by > 0.02
 8/9   LT / RT ahead of R by > 0.10 (y)
 10/11 LT / RT behind R by > 0.10
 12/13 LT left of R by > 0.25 / RT right of R by > 0.25
 14    |LT - RT| > 0.40            15  |LT - RT| < 0.15
 16    T ahead of R by > 0.05      17  T behind R by > 0.05
 18/19 T left of R by > 0.05 / T right of R by > 0.05
 20    R height < 0.85 h0          21  R height > 1.03 h0
 22/23 LT / RT higher than R height - 0.5 h0
 24/25 LH ahead of RH by > 0.20 / RH ahead of LH by > 0.20
 26/27 LT right of R (crossed) / RT left of R (crossed)
 28    T height < 0.9 rest top height
 29    horizontal |T - mean(feet)| > 0.20
 30/31 LT below LH by > 0.03 / RT below RH by > 0.03

Dance beats are local minima of the 5-frame moving average of mean joint
speed. PFC averages, over frames, the upward-clamped root acceleration
magnitude times the left and right foot speeds (each foot's speed is the
minimum over its heel and toe), with the acceleration normalised by its
maximum and each foot speed by its own maximum. Lower is better.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.spatial.distance import pdist

from .skeleton import UP_AXIS, InsufficientFramesError, MotionSequence, Skeleton, forward_kinematics

BEAT_SIGMA = 0.1
FID_EPS = 1e-6
N_GEOMETRIC = 32


def _positions(motion, skel: Skeleton) -> np.ndarray:
    return forward_kinematics(skel, motion) if isinstance(motion, MotionSequence) else np.asarray(motion)


# -- beats -------------------------------------------------------------------

def dance_beats(motion, skel: Skeleton, fps: float | None = None) -> np.ndarray:
    """Beat times (s) at local minima of the smoothed mean joint speed.

    ``motion`` is a MotionSequence or an (F, J, 3) position array (then ``fps`` is required).
    """
    fps = motion.fps if isinstance(motion, MotionSequence) else fps
    pos = _positions(motion, skel)
    if pos.shape[0] < 5:
        raise InsufficientFramesError("dance beat extraction needs at least 5 frames")
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=-1).mean(axis=1) * fps
    smooth = uniform_filter1d(speed, size=5, mode="nearest")
    i = np.arange(1, len(smooth) - 1)
    tol = 1e-9 * smooth.max()  # rounding ripples on a constant speed are not beats
    minima = i[(smooth[i] < smooth[i - 1] - tol) & (smooth[i] < smooth[i + 1] - tol)]
    # a speed sample sits halfway between the two frames it differences
    return (minima + 0.5) / fps


def beat_align(music_beats, dance_beats, sigma: float = BEAT_SIGMA) -> float:
    music_beats = np.asarray(music_beats, dtype=np.float64).reshape(-1)
    dance_beats = np.asarray(dance_beats, dtype=np.float64).reshape(-1)
    if music_beats.size == 0:
        raise ValueError("need at least one music beat")
    if dance_beats.size == 0:
        return 0.0
    d2 = np.min((music_beats[:, None] - dance_beats[None, :]) ** 2, axis=1)
    return float(np.mean(np.exp(-d2 / (2 * sigma ** 2))))


# -- physical foot contact ---------------------------------------------------

def pfc(motion, skel: Skeleton, fps: float | None = None) -> float:
    fps = motion.fps if isinstance(motion, MotionSequence) else fps
    pos = _positions(motion, skel)
    if pos.shape[0] < 3:
        raise InsufficientFramesError("PFC needs at least 3 frames")
    root = pos[:, skel.root]
    acc = (root[2:] - 2 * root[1:-1] + root[:-2]) * fps ** 2
    acc[:, UP_AXIS] = np.maximum(acc[:, UP_AXIS], 0.0)
    acc = np.linalg.norm(acc, axis=-1)
    lh, rh, lt, rt = skel.foot_joints
    v = np.linalg.norm(pos[2:] - pos[1:-1], axis=-1) * fps
    left = np.minimum(v[:, lh], v[:, lt])
    right = np.minimum(v[:, rh], v[:, rt])

    def normed(a):
        m = a.max()
        return a / m if m > 0 else np.zeros_like(a)

    return float(np.mean(normed(acc) * normed(left) * normed(right)))


# -- features ----------------------------------------------------------------

def kinetic_features(motion, skel: Skeleton, fps: float | None = None) -> np.ndarray:
    fps = motion.fps if isinstance(motion, MotionSequence) else fps
    pos = _positions(motion, skel)
    if pos.shape[0] < 2:
        raise InsufficientFramesError("kinetic features need at least 2 frames")
    vel = np.diff(pos, axis=0) * fps
    return np.mean(np.sum(vel ** 2, axis=-1), axis=0)


def _top_joint(skel: Skeleton) -> int:
    if not skel.upper_body:
        return skel.root
    rest = skel.rest_positions()
    return max(sorted(skel.upper_body), key=lambda j: rest[j, UP_AXIS])


def geometric_predicates(pos: np.ndarray, skel: Skeleton) -> np.ndarray:
    """(F, 32) boolean predicate table for an (F, J, 3) position array."""
    pos = np.asarray(pos, dtype=np.float64)
    X, Y, Z = 0, 1, UP_AXIS
    lh, rh, lt, rt = skel.foot_joints
    top = _top_joint(skel)
    r = skel.root
    h0 = skel.rest_height()
    rest = skel.rest_positions()
    top_rest = rest[top, Z] - rest[:, Z].min()
    floor = pos[:, list(skel.foot_joints), Z].min(axis=1)
    h = pos[..., Z] - floor[:, None]
    P = lambda j: pos[:, j]  # noqa: E731
    rel = lambda j, axis: pos[:, j, axis] - pos[:, r, axis]  # noqa: E731
    feet_mid = pos[:, list(skel.foot_joints), :2].mean(axis=1)
    toe_gap = np.linalg.norm(P(lt) - P(rt), axis=-1)
    preds = [
        h[:, lh] > 0.10, h[:, rh] > 0.10,
        h[:, lt] > 0.10, h[:, rt] > 0.10,
        h[:, lh] - h[:, rh] > 0.02, h[:, rh] - h[:, lh] > 0.02,
        h[:, lt] - h[:, rt] > 0.02, h[:, rt] - h[:, lt] > 0.02,
        rel(lt, Y) > 0.10, rel(rt, Y) > 0.10,
        rel(lt, Y) < -0.10, rel(rt, Y) < -0.10,
        rel(lt, X) > 0.25, rel(rt, X) < -0.25,
        toe_gap > 0.40, toe_gap < 0.15,
        rel(top, Y) > 0.05, rel(top, Y) < -0.05,
        rel(top, X) > 0.05, rel(top, X) < -0.05,
        h[:, r] < 0.85 * h0, h[:, r] > 1.03 * h0,
        h[:, lt] > h[:, r] - 0.5 * h0, h[:, rt] > h[:, r] - 0.5 * h0,
        P(lh)[:, Y] - P(rh)[:, Y] > 0.20, P(rh)[:, Y] - P(lh)[:, Y] > 0.20,
        rel(lt, X) < 0.0, rel(rt, X) > 0.0,
        h[:, top] < 0.9 * top_rest,
        np.linalg.norm(P(top)[:, :2] - feet_mid, axis=-1) > 0.20,
        h[:, lt] < h[:, lh] - 0.03, h[:, rt] < h[:, rh] - 0.03,
    ]
    return np.stack(preds, axis=1)


def geometric_features(motion, skel: Skeleton) -> np.ndarray:
    pos = _positions(motion, skel)
    if pos.shape[0] < 1:
        raise InsufficientFramesError("geometric features need at least 1 frame")
    return geometric_predicates(pos, skel).mean(axis=0)


# -- distribution metrics ----------------------------------------------------

def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid_from_moments(mu_a, cov_a, mu_b, cov_b, eps: float = FID_EPS) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^{1/2}) with A, B regularised by eps * I.

    Tr((AB)^{1/2}) is evaluated as Tr((A^{1/2} B A^{1/2})^{1/2}), which only needs
    symmetric eigendecompositions.
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    n = mu_a.size
    A = np.atleast_2d(cov_a).astype(np.float64) + eps * np.eye(n)
    B = np.atleast_2d(cov_b).astype(np.float64) + eps * np.eye(n)
    ra = _sqrt_psd(A)
    inner = ra @ B @ ra
    inner = (inner + inner.T) / 2
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0, None)).sum()
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(A) + np.trace(B) - 2 * cross)
    return max(val, 0.0)


def fid(features_a, features_b, eps: float = FID_EPS) -> float:
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    return fid_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)


def diversity(features) -> float:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if len(f) < 2:
        raise ValueError("diversity needs at least 2 samples")
    return float(pdist(f).mean())


# -- report -------------------------------------------------------------------

@dataclass
class MetricReport:
    beat_align: float
    pfc: float
    fid_k: float
    fid_g: float
    div_k: float
    div_g: float
    n_generated: int
    n_reference: int
    reference_div_k: float = float("nan")
    reference_div_g: float = float("nan")
    n_trials: int = 1

    def to_table(self) -> dict:
        """Field names as in the usual dance-generation results table."""
        return {
            "BeatAlign": self.beat_align, "PFC": self.pfc,
            "FID_k": self.fid_k, "FID_g": self.fid_g,
            "Div_k": self.div_k, "Div_g": self.div_g,
            "n_generated": self.n_generated, "n_reference": self.n_reference,
            "reference_Div_k": self.reference_div_k, "reference_Div_g": self.reference_div_g,
            "n_trials": self.n_trials,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_table(), indent=1)


def evaluate(generated: list[MotionSequence], reference: list[MotionSequence], skel: Skeleton,
             music_beats: list | None = None, sigma: float = BEAT_SIGMA) -> MetricReport:
    """All metrics for one generated set against a reference set.

    ``music_beats[i]`` are the beat times paired with ``generated[i]``; motions
    without beats (None) are skipped for BeatAlign, which is NaN if none remain.
    """
    if not generated or not reference:
        raise ValueError("generated and reference sets must be nonempty")
    gen_pos = [forward_kinematics(skel, m) for m in generated]
    ref_pos = [forward_kinematics(skel, m) for m in reference]
    fps_g = [m.fps for m in generated]
    fps_r = [m.fps for m in reference]
    gk = np.stack([kinetic_features(p, skel, f) for p, f in zip(gen_pos, fps_g)])
    rk = np.stack([kinetic_features(p, skel, f) for p, f in zip(ref_pos, fps_r)])
    gg = np.stack([geometric_features(p, skel) for p in gen_pos])
    rg = np.stack([geometric_features(p, skel) for p in ref_pos])
    scores = []
    for p, f, beats in zip(gen_pos, fps_g, music_beats or [None] * len(generated)):
        if beats is not None and len(beats):
            scores.append(beat_align(beats, dance_beats(p, skel, f), sigma))
    two = len(generated) >= 2 and len(reference) >= 2
    return MetricReport(
        beat_align=float(np.mean(scores)) if scores else float("nan"),
        pfc=float(np.mean([pfc(p, skel, f) for p, f in zip(gen_pos, fps_g)])),
        fid_k=fid(gk, rk) if two else float("nan"),
        fid_g=fid(gg, rg) if two else float("nan"),
        div_k=diversity(gk) if len(gk) >= 2 else float("nan"),
        div_g=diversity(gg) if len(gg) >= 2 else float("nan"),
        n_generated=len(generated),
        n_reference=len(reference),
        reference_div_k=diversity(rk) if len(rk) >= 2 else float("nan"),
        reference_div_g=diversity(rg) if len(rg) >= 2 else float("nan"),
    )


def average_reports(reports: list[MetricReport]) -> MetricReport:
    """Field-wise mean over repeated trials."""
    if not reports:
        raise ValueError("no reports to average")
    d = {k: float(np.mean([getattr(r, k) for r in reports]))
         for k in ("beat_align", "pfc", "fid_k", "fid_g", "div_k", "div_g",
                   "reference_div_k", "reference_div_g")}
    return MetricReport(**d, n_generated=reports[0].n_generated, n_reference=reports[0].n_reference,
                        n_trials=len(reports))


def evaluate_trials(trials: list[list[MotionSequence]], reference, skel, music_beats=None) -> MetricReport:
    return average_reports([evaluate(g, reference, skel, music_beats) for g in trials])

