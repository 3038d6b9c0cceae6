"""Procedural skeleton motion: characters, motion programs, datasets.

Every motion program is a joint-angle trajectory. Rendering goes through 2D
forward kinematics on a character's bone lengths and then a viewpoint
similarity transform, so the same program rendered on two characters has
exactly the same bone angles -- this is what provides ground-truth
cross-character retargeting targets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .skeleton import (
    DEFAULT_TOPOLOGY,
    DatasetManifest,
    ManifestEntry,
    SkeletonSequence,
    SkeletonTopology,
    normalize_sequence,
    write_manifest,
    write_sequence,
)

MIN_FRAMES = 8


class MotionKind(str, Enum):
    RAISE_ARM_LEFT = "raise_arm_left"
    RAISE_ARM_RIGHT = "raise_arm_right"
    SQUAT = "squat"
    BEND_OVER = "bend_over"
    WAVE = "wave"
    WALK_CYCLE = "walk_cycle"
    KICK = "kick"
    IDLE = "idle"


CLASS_NAMES = [k.value for k in MotionKind]
ACTIVE_KINDS = [k for k in MotionKind if k is not MotionKind.IDLE]
ROOT_CHANNEL = "root"

# (parent joint, rest angle relative to the parent bone, degrees) per child joint
# of the default 13-joint body. Root children are relative to the +x axis.
_REST_ANGLES = {
    1: 90.0, 0: 0.0,
    2: -90.0, 3: 90.0, 4: -80.0, 5: 80.0, 6: -5.0, 7: 5.0,
    9: -20.0, 10: 200.0, 11: -68.0, 12: 68.0,
}
# nominal bone length per child joint; characters scale these
_BASE_LENGTHS = {
    1: 1.5, 0: 0.6, 2: 0.7, 3: 0.7, 4: 1.0, 5: 1.0, 6: 0.9, 7: 0.9,
    9: 0.6, 10: 0.6, 11: 1.4, 12: 1.4,
}
# bones sharing one proportion factor (left/right symmetric bodies)
_BONE_GROUPS = {"torso": (1,), "head": (0,), "shoulder": (2, 3), "upper_arm": (4, 5),
                "forearm": (6, 7), "hip": (9, 10), "thigh": (11, 12)}


def _bump(u):
    return np.sin(np.pi * u) ** 2


def _program_offsets(kind: MotionKind, u: np.ndarray, a: float, phase: float) -> dict:
    """Local-angle offsets (degrees) per joint, plus a root drop in thigh lengths."""
    b = _bump(u)
    if kind is MotionKind.RAISE_ARM_LEFT:
        return {4: 150 * a * b, 6: 20 * a * b}
    if kind is MotionKind.RAISE_ARM_RIGHT:
        return {5: -150 * a * b, 7: -20 * a * b}
    if kind is MotionKind.SQUAT:
        return {11: 45 * a * b, 12: -45 * a * b, ROOT_CHANNEL: 0.5 * a * b}
    if kind is MotionKind.BEND_OVER:
        return {1: -55 * a * b}
    if kind is MotionKind.WAVE:
        swing = np.sin(2 * np.pi * 3 * u + phase)
        return {5: -110 * a * b, 7: (-30 * a - 40 * a * swing) * b}
    if kind is MotionKind.WALK_CYCLE:
        s = np.sin(2 * np.pi * 2 * u + phase) * np.sin(np.pi * u)
        return {11: 25 * a * s, 12: 25 * a * s, 4: -20 * a * s, 5: -20 * a * s}
    if kind is MotionKind.KICK:
        return {12: -75 * a * b}
    return {}


def _support(kind: MotionKind, root_joint: int = DEFAULT_TOPOLOGY.root_joint) -> frozenset[int]:
    keys = _program_offsets(kind, np.zeros(1), 1.0, 0.0).keys()
    return frozenset(root_joint if k == ROOT_CHANNEL else k for k in keys)


@dataclass(frozen=True)
class CharacterParams:
    id: str
    bone_lengths: dict  # (parent, child) -> length

    def to_dict(self) -> dict:
        return {"id": self.id,
                "bone_lengths": {f"{p}-{c}": v for (p, c), v in sorted(self.bone_lengths.items())}}


@dataclass(frozen=True)
class Viewpoint:
    rotation_angle: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    id: str = "front"

    def __post_init__(self):
        if not -math.pi <= self.rotation_angle < math.pi:
            raise ValueError("rotation_angle must lie in [-pi, pi)")
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError("scale must lie in [0.5, 2.0]")

    def apply(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation_angle), math.sin(self.rotation_angle)
        rot = np.array([[c, -s], [s, c]])
        return self.scale * xy @ rot.T + np.asarray(self.translation, dtype=np.float64)


@dataclass(frozen=True)
class MotionProgram:
    kind: MotionKind
    amplitude: float = 1.0
    phase: float = 0.0
    duration_frames: int = 64
    start_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", MotionKind(self.kind))
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must lie in [0, 1]")
        if self.duration_frames < 1:
            raise ValueError("duration_frames must be positive")
        if self.start_frame < 0:
            raise ValueError("start_frame must be non-negative")

    @property
    def joint_support(self) -> frozenset[int]:
        return _support(self.kind)

    def active(self, T: int) -> np.ndarray:
        t = np.arange(T)
        return (t >= self.start_frame) & (t < self.start_frame + self.duration_frames)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "amplitude": self.amplitude, "phase": self.phase,
                "duration_frames": self.duration_frames, "start_frame": self.start_frame}


@dataclass
class UntrimmedAnnotation:
    labels: np.ndarray  # T x num_classes, 0/1
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "labels": self.labels.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "UntrimmedAnnotation":
        return cls(labels=np.asarray(d["labels"], dtype=np.int64), class_names=list(d["class_names"]))


def seeded_rng(seed: int, *index: int) -> np.random.Generator:
    """Hierarchical seeding: one independent stream per (seed, index...) path."""
    return np.random.default_rng(np.random.SeedSequence([seed % 2**63, *index]))


def make_character(seed: int, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> CharacterParams:
    rng = seeded_rng(seed, 0xC4A5)
    overall = rng.uniform(0.75, 1.3)
    lengths = {}
    for group in _BONE_GROUPS.values():
        factor = overall * rng.uniform(0.85, 1.15)
        for child in group:
            lengths[child] = float(np.clip(_BASE_LENGTHS[child] * factor, 0.5, 2.0))
    parents = topo.parents
    return CharacterParams(id=f"char{seed}", bone_lengths={(parents[c], c): v for c, v in lengths.items()})


def _angle_trajectory(programs: list[MotionProgram], T: int) -> tuple[np.ndarray, np.ndarray]:
    """Blend programs into per-joint local-angle offsets (T x V, degrees) and a root drop (T)."""
    V = DEFAULT_TOPOLOGY.num_joints
    channels = list(range(V)) + [ROOT_CHANNEL]
    num = {ch: np.zeros(T) for ch in channels}
    weight = {ch: np.zeros(T) for ch in channels}
    value = {ch: np.zeros(T) for ch in channels}
    count = {ch: np.zeros(T, dtype=int) for ch in channels}
    for prog in programs:
        active = prog.active(T)
        if not active.any():
            continue
        u = (np.arange(T) - prog.start_frame) / prog.duration_frames
        for ch, off in _program_offsets(prog.kind, u, prog.amplitude, prog.phase).items():
            off = np.where(active, off, 0.0)
            num[ch] += prog.amplitude * off
            weight[ch] += prog.amplitude * active
            value[ch] += off
            count[ch] += active
    offsets = np.zeros((T, V + 1))
    for i, ch in enumerate(channels):
        # a lone program passes through unchanged; overlapping ones blend by amplitude
        blended = np.divide(num[ch], weight[ch], out=np.zeros(T), where=weight[ch] > 0)
        offsets[:, i] = np.where(count[ch] > 1, blended, value[ch])
    return offsets[:, :V], offsets[:, V]


def _forward_kinematics(local_deg: np.ndarray, root_drop: np.ndarray, character: CharacterParams,
                        topo: SkeletonTopology) -> np.ndarray:
    T = local_deg.shape[0]
    parents = topo.parents
    order = _topological_order(topo)
    absolute = np.zeros((T, topo.num_joints))
    pos = np.zeros((T, topo.num_joints, 2))
    thigh = np.mean([character.bone_lengths[(parents[c], c)] for c in _BONE_GROUPS["thigh"]])
    pos[:, topo.root_joint, 1] = -root_drop * thigh
    for j in order:
        p = parents[j]
        if p < 0:
            continue
        base = absolute[:, p] if p != topo.root_joint else 0.0
        absolute[:, j] = base + np.deg2rad(_REST_ANGLES[j] + local_deg[:, j])
        length = character.bone_lengths[(p, j)]
        pos[:, j, 0] = pos[:, p, 0] + length * np.cos(absolute[:, j])
        pos[:, j, 1] = pos[:, p, 1] + length * np.sin(absolute[:, j])
    return pos


def _topological_order(topo: SkeletonTopology) -> list[int]:
    children: dict[int, list[int]] = {}
    for p, c in topo.edges:
        children.setdefault(p, []).append(c)
    order, queue = [], [topo.root_joint]
    while queue:
        j = queue.pop(0)
        order.append(j)
        queue.extend(children.get(j, []))
    return order


def bone_angles(frames: np.ndarray, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Absolute bone directions (radians, T x num_edges) recovered from coordinates."""
    d = np.stack([frames[:, c] - frames[:, p] for p, c in topo.edges], axis=1)
    return np.arctan2(d[..., 1], d[..., 0])


def realize_composite(programs: list[MotionProgram], character: CharacterParams, view: Viewpoint,
                      T: int, fps: float = 30.0) -> tuple[SkeletonSequence, UntrimmedAnnotation]:
    if not programs:
        raise ValueError("realize_composite needs at least one program")
    if T < MIN_FRAMES:
        raise ValueError(f"sequence too short: T={T} < {MIN_FRAMES}")
    topo = DEFAULT_TOPOLOGY
    local, drop = _angle_trajectory(programs, T)
    xy = view.apply(_forward_kinematics(local, drop, character, topo))
    labels = np.zeros((T, len(CLASS_NAMES)), dtype=np.int64)
    for prog in programs:
        labels[prog.active(T), CLASS_NAMES.index(prog.kind.value)] = 1
    seq = SkeletonSequence(xy, fps=fps, topology_id=topo.id, meta={"character": character.id, "view": view.id})
    return seq, UntrimmedAnnotation(labels=labels)


def realize(program: MotionProgram, character: CharacterParams, view: Viewpoint, T: int,
            fps: float = 30.0) -> SkeletonSequence:
    return realize_composite([program], character, view, T, fps=fps)[0]


# ---------------------------------------------------------------- datasets

@dataclass
class RetargetDataConfig:
    num_characters: int = 8
    num_programs: int = 12
    num_viewpoints: int = 4
    T: int = 64
    seed: int = 0
    test_fraction: float = 0.25


@dataclass
class TrimmedDataConfig:
    num_sequences: int = 512
    T: int = 64
    num_characters: int = 16
    seed: int = 0
    test_fraction: float = 0.0


@dataclass
class UntrimmedDataConfig:
    num_videos: int = 200
    T_range: tuple[int, int] = (256, 512)
    classes: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    max_cooccurrence: int = 3
    seed: int = 0
    test_fraction: float = 0.25
    num_characters: int = 16
    duration_range: tuple[int, int] = (32, 96)


def _random_program(rng: np.random.Generator, kind: MotionKind, duration: int, start: int = 0) -> MotionProgram:
    return MotionProgram(kind=kind, amplitude=float(rng.uniform(0.6, 1.0)),
                         phase=float(rng.uniform(0.0, 2 * math.pi)), duration_frames=duration,
                         start_frame=start)


def _random_viewpoint(rng: np.random.Generator, vid: str) -> Viewpoint:
    return Viewpoint(rotation_angle=float(rng.uniform(-math.pi / 4, math.pi / 4)),
                     scale=float(rng.uniform(0.8, 1.25)),
                     translation=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))), id=vid)


def _test_ids(n: int, fraction: float) -> int:
    if fraction <= 0:
        return 0
    return min(n - 1, max(1, round(n * fraction)))


def build_retarget_dataset(config: RetargetDataConfig, out_dir: str | Path) -> DatasetManifest:
    """Render every (program, character, viewpoint) combination and link cross-character targets.

    Characters are split into train/test; the last ``test_fraction`` of characters are held out.
    Writes sequence files and ``manifest.jsonl`` into ``out_dir``.
    """
    if config.num_characters < 2:
        raise ValueError("num_characters must be >= 2: cross-character targets are impossible otherwise")
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    characters = [make_character(int(seeded_rng(config.seed, 1, i).integers(2**31))) for i in range(config.num_characters)]
    characters = [CharacterParams(id=f"c{i:02d}", bone_lengths=c.bone_lengths) for i, c in enumerate(characters)]
    programs = []
    for m in range(config.num_programs):
        rng = seeded_rng(config.seed, 2, m)
        kind = ACTIVE_KINDS[m % len(ACTIVE_KINDS)] if m < len(ACTIVE_KINDS) else ACTIVE_KINDS[rng.integers(len(ACTIVE_KINDS))]
        programs.append(_random_program(rng, kind, config.T))
    views = [_random_viewpoint(seeded_rng(config.seed, 3, v), f"v{v:02d}") for v in range(config.num_viewpoints)]
    n_test = _test_ids(config.num_characters, config.test_fraction)
    test_chars = {c.id for c in characters[config.num_characters - n_test:]}

    def rel(m, c, v):
        return f"sequences/m{m:02d}_{characters[c].id}_{views[v].id}.json"

    entries = []
    for m, prog in enumerate(programs):
        for c, char in enumerate(characters):
            for v, view in enumerate(views):
                seq = normalize_sequence(realize(prog, char, view, config.T))
                write_sequence(seq, out / rel(m, c, v))
                entries.append(ManifestEntry(
                    sequence_path=rel(m, c, v), character_id=char.id, motion_ids=[f"m{m:02d}"],
                    viewpoint_id=view.id, split="test" if char.id in test_chars else "train",
                    extra={"cross_targets": [rel(m, o, v) for o in range(config.num_characters) if o != c],
                           "motion_kinds": [prog.kind.value]},
                ))
    manifest = DatasetManifest(kind="retarget_pairs", entries=entries, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def build_trimmed_dataset(config: TrimmedDataConfig, out_dir: str | Path) -> DatasetManifest:
    """Single-program clips on random characters and viewpoints (pretraining pool)."""
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    characters = [make_character(int(seeded_rng(config.seed, 1, i).integers(2**31))) for i in range(config.num_characters)]
    n_test = round(config.num_sequences * config.test_fraction)
    entries = []
    for i in range(config.num_sequences):
        rng = seeded_rng(config.seed, 4, i)
        kind = ACTIVE_KINDS[rng.integers(len(ACTIVE_KINDS))]
        c = int(rng.integers(config.num_characters))
        view = _random_viewpoint(rng, f"v{i:04d}")
        seq = normalize_sequence(realize(_random_program(rng, kind, config.T), characters[c], view, config.T))
        path = f"sequences/clip_{i:05d}.json"
        write_sequence(seq, out / path)
        entries.append(ManifestEntry(sequence_path=path, character_id=f"c{c:02d}", motion_ids=[kind.value],
                                     viewpoint_id=view.id, split="test" if i >= config.num_sequences - n_test else "train"))
    manifest = DatasetManifest(kind="trimmed", entries=entries, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def _place_programs(rng: np.random.Generator, T: int, config: UntrimmedDataConfig) -> list[MotionProgram]:
    kinds = [MotionKind(k) for k in config.classes if k != MotionKind.IDLE.value]
    lo, hi = config.duration_range
    occupancy = np.zeros(T, dtype=int)
    kind_busy = {k: np.zeros(T, dtype=bool) for k in kinds}
    programs = []
    for _ in range(int(4 * T / lo)):
        d = int(rng.integers(lo, min(hi, T) + 1))
        s = int(rng.integers(0, T - d + 1))
        kind = kinds[rng.integers(len(kinds))]
        window = slice(s, s + d)
        if occupancy[window].max() >= config.max_cooccurrence or kind_busy[kind][window].any():
            continue
        occupancy[window] += 1
        kind_busy[kind][window] = True
        programs.append(_random_program(rng, kind, d, s))
    if MotionKind.IDLE.value in config.classes:
        # idle marks every frame where nothing else happens
        t = 0
        while t < T:
            if occupancy[t] == 0:
                e = t
                while e < T and occupancy[e] == 0:
                    e += 1
                programs.append(MotionProgram(MotionKind.IDLE, amplitude=0.0, duration_frames=e - t, start_frame=t))
                t = e
            else:
                t += 1
    return programs


def build_untrimmed_dataset(config: UntrimmedDataConfig, out_dir: str | Path) -> DatasetManifest:
    """Long videos with overlapping programs and dense multi-hot labels.

    Each video gets ``video_XXXX.json`` plus ``video_XXXX.labels.json``.
    """
    unknown = set(config.classes) - set(CLASS_NAMES)
    if unknown:
        raise ValueError(f"unknown classes: {sorted(unknown)}")
    out = Path(out_dir)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    characters = [make_character(int(seeded_rng(config.seed, 1, i).integers(2**31))) for i in range(config.num_characters)]
    n_test = _test_ids(config.num_videos, config.test_fraction) if config.num_videos > 1 else 0
    entries = []
    for i in range(config.num_videos):
        rng = seeded_rng(config.seed, 5, i)
        T = int(rng.integers(config.T_range[0], config.T_range[1] + 1))
        c = int(rng.integers(config.num_characters))
        view = _random_viewpoint(rng, f"v{i:04d}")
        programs = _place_programs(rng, T, config)
        seq, ann = realize_composite(programs, characters[c], view, T)
        col = [CLASS_NAMES.index(k) for k in config.classes]
        ann = UntrimmedAnnotation(labels=ann.labels[:, col], class_names=list(config.classes))
        seq = normalize_sequence(seq)
        path = f"sequences/video_{i:04d}.json"
        lpath = f"sequences/video_{i:04d}.labels.json"
        write_sequence(seq, out / path)
        (out / lpath).write_text(json.dumps(ann.to_dict(), separators=(",", ":")))
        entries.append(ManifestEntry(
            sequence_path=path, character_id=f"c{c:02d}",
            motion_ids=sorted({p.kind.value for p in programs}), viewpoint_id=view.id,
            split="test" if i >= config.num_videos - n_test else "train",
            extra={"labels_path": lpath, "video_id": f"video_{i:04d}"},
        ))
    manifest = DatasetManifest(kind="untrimmed", entries=entries, root=out)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def load_annotation(manifest: DatasetManifest, entry: ManifestEntry) -> UntrimmedAnnotation:
    return UntrimmedAnnotation.from_dict(json.loads(manifest.resolve(entry.extra["labels_path"]).read_text()))
