"""Stick-figure SVG frames, front orthographic view (x right, z up)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .skeleton import MotionSequence, Skeleton, forward_kinematics

WIDTH, HEIGHT = 400, 400
PX_PER_M = 150.0
ORIGIN = (WIDTH / 2, HEIGHT - 40.0)  # pixel position of world (0, *, 0)
JOINT_RADIUS = 4.0


def project(points: np.ndarray) -> np.ndarray:
    """World (..., 3) to pixel (..., 2); fixed mapping so translations stay visible."""
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([ORIGIN[0] + PX_PER_M * pts[..., 0], ORIGIN[1] - PX_PER_M * pts[..., 2]], axis=-1)


def frame_svg(pos: np.ndarray, skel: Skeleton) -> str:
    px = project(pos)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
             f'viewBox="0 0 {WIDTH} {HEIGHT}">',
             f'<line x1="0" y1="{ORIGIN[1]:.3f}" x2="{WIDTH}" y2="{ORIGIN[1]:.3f}" stroke="#bbb"/>']
    for j, p in enumerate(skel.parents):
        if p != -1:
            (x1, y1), (x2, y2) = px[p], px[j]
            parts.append(f'<line class="bone" x1="{x1:.3f}" y1="{y1:.3f}" x2="{x2:.3f}" y2="{y2:.3f}" '
                         f'stroke="black" stroke-width="3"/>')
    for j, (x, y) in enumerate(px):
        parts.append(f'<circle class="joint" id="j{j}" cx="{x:.3f}" cy="{y:.3f}" r="{JOINT_RADIUS}" fill="#c33"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_motion(motion: MotionSequence, skel: Skeleton, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pos = forward_kinematics(skel, motion)
    paths = []
    for i, frame in enumerate(pos):
        path = out / f"frame_{i:05d}.svg"
        path.write_text(frame_svg(frame, skel))
        paths.append(path)
    return paths
