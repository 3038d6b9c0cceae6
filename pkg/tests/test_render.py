import numpy as np
import pytest
from PIL import Image

from lac.render import LEFT, RIGHT, render_frames, render_sequence
from lac.skeleton import SkeletonSequence
from lac.synth import MotionKind, MotionProgram, Viewpoint, make_character, realize

from conftest import random_sequence


def idle_sequence(T=16):
    return realize(MotionProgram(kind=MotionKind.IDLE, duration_frames=T), make_character(0), Viewpoint(), T)


def test_png_mode_writes_one_file_per_frame(tmp_path):
    paths = render_sequence(random_sequence(16, 0), tmp_path / "frames", mode="png", size=64)
    assert len(paths) == 16 and sorted(p.name for p in (tmp_path / "frames").iterdir())[0] == "frame_0000.png"


def test_idle_frames_are_pixel_identical():
    frames = [np.asarray(img) for img in render_frames(idle_sequence(), size=64)]
    assert all(np.array_equal(frames[0], f) for f in frames[1:])


def test_rendering_is_byte_deterministic(tmp_path):
    seq = random_sequence(8, 1)
    a = render_sequence(seq, tmp_path / "a.gif", size=64)[0].read_bytes()
    b = render_sequence(seq, tmp_path / "b.gif", size=64)[0].read_bytes()
    assert a == b
    pa = [p.read_bytes() for p in render_sequence(seq, tmp_path / "pa", mode="png", size=64)]
    pb = [p.read_bytes() for p in render_sequence(seq, tmp_path / "pb", mode="png", size=64)]
    assert pa == pb


def test_gif_holds_every_frame(tmp_path):
    path = render_sequence(random_sequence(5, 2), tmp_path / "x.gif", size=48)[0]
    with Image.open(path) as img:
        assert img.n_frames == 5


def test_sides_are_colored():
    pixels = {tuple(p) for p in np.asarray(render_frames(idle_sequence(8), size=128)[0]).reshape(-1, 3)}
    assert LEFT in pixels and RIGHT in pixels


def test_invalid_sequences_are_errors(tmp_path):
    bad = np.zeros((4, 13, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="invalid sequence"):
        render_frames(SkeletonSequence(bad))
    with pytest.raises(ValueError, match="C=3"):
        render_frames(SkeletonSequence(np.zeros((4, 13, 3))))
    with pytest.raises(ValueError, match="render mode"):
        render_sequence(random_sequence(2, 0), tmp_path / "x", mode="mp4")
