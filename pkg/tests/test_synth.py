import filecmp
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lac.skeleton import DEFAULT_TOPOLOGY, read_manifest
from lac.synth import (
    ACTIVE_KINDS,
    CLASS_NAMES,
    MotionKind,
    MotionProgram,
    RetargetDataConfig,
    TrimmedDataConfig,
    UntrimmedDataConfig,
    Viewpoint,
    bone_angles,
    build_retarget_dataset,
    build_trimmed_dataset,
    build_untrimmed_dataset,
    load_annotation,
    make_character,
    realize,
    realize_composite,
)

FRONT = Viewpoint()


def test_make_character_deterministic():
    assert make_character(0) == make_character(0)


def test_character_bone_bounds():
    for seed in range(100):
        lengths = make_character(seed).bone_lengths
        assert set(lengths) == set(DEFAULT_TOPOLOGY.edges)
        assert all(0.5 <= v <= 2.0 for v in lengths.values())


def test_characters_differ():
    assert make_character(0).bone_lengths != make_character(1).bone_lengths


def test_viewpoint_bounds():
    with pytest.raises(ValueError):
        Viewpoint(scale=3.0)
    with pytest.raises(ValueError):
        Viewpoint(rotation_angle=math.pi)


def test_joint_support_in_range():
    for kind in MotionKind:
        support = MotionProgram(kind).joint_support
        assert all(0 <= j < DEFAULT_TOPOLOGY.num_joints for j in support)
    assert MotionProgram(MotionKind.IDLE).joint_support == frozenset()


def test_idle_is_constant():
    seq = realize(MotionProgram(MotionKind.IDLE), make_character(3), Viewpoint(0.3, 1.2, (1.0, -2.0)), 20)
    assert np.array_equal(seq.frames, np.broadcast_to(seq.frames[0], seq.frames.shape))


def test_zero_amplitude_equals_idle():
    c = make_character(2)
    a = realize(MotionProgram(MotionKind.WAVE, amplitude=0.0, duration_frames=32), c, FRONT, 32)
    b = realize(MotionProgram(MotionKind.IDLE, duration_frames=32), c, FRONT, 32)
    assert np.array_equal(a.frames, b.frames)


def test_too_short():
    with pytest.raises(ValueError, match="sequence too short"):
        realize(MotionProgram(MotionKind.SQUAT), make_character(0), FRONT, 7)


@given(st.sampled_from(ACTIVE_KINDS), st.floats(0, 1), st.floats(0, 6.28), st.integers(0, 50), st.integers(0, 50),
       st.floats(-3.1, 3.1), st.floats(0.5, 2.0))
def test_angle_trajectories_shared_across_characters(kind, amp, phase, ca, cb, rot, scale):
    prog = MotionProgram(kind, amplitude=amp, phase=phase, duration_frames=24)
    view = Viewpoint(rot, scale, (0.5, 0.25))
    a = realize(prog, make_character(ca), view, 24)
    b = realize(prog, make_character(cb), view, 24)
    diff = np.angle(np.exp(1j * (bone_angles(a.frames) - bone_angles(b.frames))))
    assert np.abs(diff).max() <= 1e-9


def test_different_characters_give_different_coordinates():
    prog = MotionProgram(MotionKind.RAISE_ARM_LEFT, duration_frames=16)
    a = realize(prog, make_character(0), FRONT, 16)
    b = realize(prog, make_character(1), FRONT, 16)
    assert np.mean((a.frames - b.frames) ** 2) > 0


def test_composite_idle_only():
    _, ann = realize_composite([MotionProgram(MotionKind.IDLE, duration_frames=16)], make_character(0), FRONT, 16)
    assert ann.labels[:, CLASS_NAMES.index("idle")].all()
    assert ann.labels.sum() == 16


def test_composite_overlap_labels():
    progs = [MotionProgram(MotionKind.RAISE_ARM_LEFT, duration_frames=32, start_frame=0),
             MotionProgram(MotionKind.SQUAT, duration_frames=32, start_frame=16)]
    _, ann = realize_composite(progs, make_character(0), FRONT, 48)
    both = ann.labels[:, CLASS_NAMES.index("raise_arm_left")] & ann.labels[:, CLASS_NAMES.index("squat")]
    assert np.flatnonzero(both).tolist() == list(range(16, 32))


def test_composite_singleton_equals_realize():
    prog = MotionProgram(MotionKind.KICK, amplitude=0.7, duration_frames=20)
    seq, _ = realize_composite([prog], make_character(5), FRONT, 20)
    assert np.array_equal(seq.frames, realize(prog, make_character(5), FRONT, 20).frames)


def test_disjoint_supports_compose_additively():
    c = make_character(1)
    arm = MotionProgram(MotionKind.RAISE_ARM_LEFT, duration_frames=16)
    kick = MotionProgram(MotionKind.KICK, duration_frames=16)
    both = realize_composite([arm, kick], c, FRONT, 16)[0]
    ang = bone_angles(both.frames)
    idle = bone_angles(realize(MotionProgram(MotionKind.IDLE, duration_frames=16), c, FRONT, 16).frames)
    only_arm = bone_angles(realize(arm, c, FRONT, 16).frames)
    only_kick = bone_angles(realize(kick, c, FRONT, 16).frames)
    np.testing.assert_allclose(ang - idle, (only_arm - idle) + (only_kick - idle), atol=1e-9)


def test_retarget_small_grid(tmp_path):
    m = build_retarget_dataset(RetargetDataConfig(num_characters=2, num_programs=2, num_viewpoints=1), tmp_path)
    assert len(m.entries) == 4
    assert all(len(e.extra["cross_targets"]) == 1 for e in m.entries)
    assert all((tmp_path / e.sequence_path).exists() for e in m.entries)


def test_retarget_split_by_character(tmp_path):
    m = build_retarget_dataset(RetargetDataConfig(num_programs=2, num_viewpoints=2), tmp_path)
    train = {e.character_id for e in m.split("train")}
    test = {e.character_id for e in m.split("test")}
    assert train and test and not train & test


def test_retarget_needs_two_characters(tmp_path):
    with pytest.raises(ValueError, match="num_characters"):
        build_retarget_dataset(RetargetDataConfig(num_characters=1), tmp_path)


def test_retarget_deterministic(tmp_path):
    cfg = RetargetDataConfig(num_characters=3, num_programs=2, num_viewpoints=2, seed=7)
    build_retarget_dataset(cfg, tmp_path / "a")
    build_retarget_dataset(cfg, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert filecmp.cmp(tmp_path / "a/manifest.jsonl", tmp_path / "b/manifest.jsonl", shallow=False)
    names = [e.sequence_path for e in read_manifest(tmp_path / "a/manifest.jsonl").entries]
    assert all(filecmp.cmp(tmp_path / "a" / n, tmp_path / "b" / n, shallow=False) for n in names)
    assert not cmp.left_only and not cmp.right_only


def test_cross_targets_share_motion(tmp_path):
    m = build_retarget_dataset(RetargetDataConfig(num_characters=3, num_programs=2, num_viewpoints=1), tmp_path)
    by_path = {x.sequence_path: x for x in m.entries}
    for e in m.entries:
        a = m.load(e).frames
        for rel in e.extra["cross_targets"]:
            other = by_path[rel]
            assert other.motion_ids == e.motion_ids and other.character_id != e.character_id
            # same viewpoint, so bone directions agree exactly after normalization
            diff = np.angle(np.exp(1j * (bone_angles(a) - bone_angles(m.load(other).frames))))
            assert np.abs(diff).max() <= 1e-9


def test_untrimmed_max_cooccurrence_one(tmp_path):
    m = build_untrimmed_dataset(UntrimmedDataConfig(num_videos=4, max_cooccurrence=1, T_range=(64, 96)), tmp_path)
    for e in m.entries:
        assert load_annotation(m, e).labels.sum(axis=1).max() <= 1


def test_untrimmed_cooccurrence_and_labels(tmp_path):
    m = build_untrimmed_dataset(UntrimmedDataConfig(num_videos=6, T_range=(128, 160)), tmp_path)
    rows = [load_annotation(m, e).labels for e in m.entries]
    assert max(r.sum(axis=1).max() for r in rows) >= 2
    for e, r in zip(m.entries, rows):
        assert r.shape == (m.load(e).T, len(CLASS_NAMES))
        assert r.sum(axis=1).min() >= 1  # idle fills gaps, every frame is labeled


def test_untrimmed_deterministic(tmp_path):
    cfg = UntrimmedDataConfig(num_videos=3, T_range=(64, 80), seed=4)
    build_untrimmed_dataset(cfg, tmp_path / "a")
    build_untrimmed_dataset(cfg, tmp_path / "b")
    for f in ["manifest.jsonl", "sequences/video_0001.json", "sequences/video_0001.labels.json"]:
        assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)


def test_untrimmed_class_subset(tmp_path):
    m = build_untrimmed_dataset(UntrimmedDataConfig(num_videos=2, T_range=(64, 64), classes=["squat", "kick", "idle"]),
                                tmp_path)
    ann = load_annotation(m, m.entries[0])
    assert ann.class_names == ["squat", "kick", "idle"] and ann.labels.shape[1] == 3


def test_trimmed_dataset(tmp_path):
    m = build_trimmed_dataset(TrimmedDataConfig(num_sequences=6, T=32, test_fraction=0.5), tmp_path)
    assert len(m.split("test")) == 3
    assert all(m.load(e).T == 32 for e in m.entries)
    assert all(e.motion_ids[0] in CLASS_NAMES for e in m.entries)
