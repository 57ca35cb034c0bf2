"""Deterministic SVG / CSV emission for runs: top-down trajectory with loop
chords highlighted, plus metric tables. No plotting dependency; the SVG is
written directly so identical runs produce identical bytes."""

from __future__ import annotations

import os
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

TRAJECTORY_CSV_HEADER = "frame,x,y,z,yaw_deg"


def write_csv(path, header: str, rows: Iterable[Sequence]) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trajectory_csv_rows(frames: Sequence[int], positions: np.ndarray,
                        yaws_deg: np.ndarray) -> List[tuple]:
    return [
        (int(f), float(p[0]), float(p[1]), float(p[2]), float(y))
        for f, p, y in zip(frames, positions, yaws_deg)
    ]


def emit_trajectory_svg(path, est_xy: np.ndarray,
                        gt_xy: Optional[np.ndarray] = None,
                        loop_pairs: Sequence[Tuple[int, int]] = (),
                        size: int = 640, margin: float = 20.0) -> None:
    """Top-down (x, y) polyline; loop closures drawn as red chords."""
    pts = [est_xy] + ([gt_xy] if gt_xy is not None else [])
    allp = np.vstack(pts)
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def to_px(p):
        x = margin + (p[0] - lo[0]) * scale
        y = size - margin - (p[1] - lo[1]) * scale  # y up
        return f"{x:.2f},{y:.2f}"

    def polyline(arr, color, dash=""):
        pts_attr = " ".join(to_px(p) for p in arr)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5"'
                f'{extra} points="{pts_attr}"/>')

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if gt_xy is not None:
        lines.append(polyline(gt_xy, "#999999", dash="4 3"))
    lines.append(polyline(est_xy, "#1f6fb2"))
    for i, j in loop_pairs:
        a, b = est_xy[i], est_xy[j]
        lines.append(
            f'<line stroke="red" stroke-width="1.2" '
            f'x1="{to_px(a).split(",")[0]}" y1="{to_px(a).split(",")[1]}" '
            f'x2="{to_px(b).split(",")[0]}" y2="{to_px(b).split(",")[1]}"/>'
        )
    start = to_px(est_xy[0]).split(",")
    lines.append(f'<circle cx="{start[0]}" cy="{start[1]}" r="4" fill="#1f6fb2"/>')
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def emit_run_outputs(out_dir, est_xy, gt_xy, loop_pairs, metrics: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    emit_trajectory_svg(os.path.join(out_dir, "trajectory.svg"), est_xy, gt_xy, loop_pairs)
    write_csv(os.path.join(out_dir, "metrics.csv"), "metric,value",
              sorted(metrics.items()))
