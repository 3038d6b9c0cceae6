"""Stick-figure rendering of skeleton sequences to PNG frames or an animated GIF."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .skeleton import SkeletonSequence, validate_sequence

BACKGROUND = (255, 255, 255)
LEFT = (40, 90, 200)
RIGHT = (200, 60, 40)
CENTER = (60, 60, 60)


def _side_color(name: str) -> tuple[int, int, int]:
    if name.startswith("l_"):
        return LEFT
    if name.startswith("r_"):
        return RIGHT
    return CENTER


def _canvas_transform(frames: np.ndarray, size: int, margin: float):
    # one transform for the whole sequence keeps the camera fixed across frames
    lo = frames.reshape(-1, 2).min(axis=0)
    hi = frames.reshape(-1, 2).max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (1 - 2 * margin) * size / span
    center = (lo + hi) / 2

    def to_pixels(xy: np.ndarray) -> np.ndarray:
        p = (xy - center) * scale
        # y points up in skeleton space and down in image space
        return np.stack([size / 2 + p[:, 0], size / 2 - p[:, 1]], axis=1)

    return to_pixels


def render_frames(seq: SkeletonSequence, size: int = 256, margin: float = 0.1,
                  joint_radius: int = 3, line_width: int = 3) -> list[Image.Image]:
    report = validate_sequence(seq)
    if not report.ok:
        raise ValueError(f"invalid sequence: {report.violations[0]}")
    if seq.C != 2:
        raise ValueError(f"only 2D sequences can be drawn, got C={seq.C}")
    topo = seq.topology
    to_pixels = _canvas_transform(np.asarray(seq.frames), size, margin)
    images = []
    for frame in seq.frames:
        px = to_pixels(frame)
        img = Image.new("RGB", (size, size), BACKGROUND)
        draw = ImageDraw.Draw(img)
        for parent, child in topo.edges:
            color = _side_color(topo.joint_names[child])
            draw.line([tuple(px[parent]), tuple(px[child])], fill=color, width=line_width)
        for j, (x, y) in enumerate(px):
            r = joint_radius
            draw.ellipse([x - r, y - r, x + r, y + r], fill=_side_color(topo.joint_names[j]))
        images.append(img)
    return images


def render_sequence(seq: SkeletonSequence, out_path: str | Path, mode: str = "gif", size: int = 256,
                    fps: float | None = None) -> list[Path]:
    """Write ``frame_0000.png``... into the directory ``out_path`` (mode "png") or one
    animated GIF at ``out_path`` (mode "gif"). Returns the written paths."""
    images = render_frames(seq, size=size)
    out = Path(out_path)
    if mode == "png":
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for t, img in enumerate(images):
            p = out / f"frame_{t:04d}.png"
            img.save(p, format="PNG")
            paths.append(p)
        return paths
    if mode == "gif":
        out.parent.mkdir(parents=True, exist_ok=True)
        duration = int(round(1000 / (fps or seq.fps)))
        images[0].save(out, format="GIF", save_all=True, append_images=images[1:], duration=duration, loop=0)
        return [out]
    raise ValueError(f"unknown render mode {mode!r}; use 'png' or 'gif'")
