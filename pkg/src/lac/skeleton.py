"""Skeleton data types, normalization, validation and on-disk formats.

Sequences are stored as a single JSON document::

    {"version": 1, "fps": 30.0, "topology": {...},
     "frames": [[[x, y], ...V], ...T], "meta": {...}}

Manifests are JSON-lines files: a header line ``{"manifest_kind": ..., "version": 1}``
followed by one entry per line.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
MANIFEST_KINDS = ("trimmed", "untrimmed", "retarget_pairs")


class SequenceFormatError(ValueError):
    """Raised when a sequence or manifest file does not match its schema."""


class DegenerateSkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    id: str
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    root_joint: int
    joint_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(p), int(c)) for p, c in self.edges))
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        problems = topology_violations(self)
        if problems:
            raise ValueError(f"invalid topology {self.id!r}: " + "; ".join(problems))

    @property
    def parents(self) -> list[int]:
        """Parent index per joint, -1 for the root."""
        parents = [-1] * self.num_joints
        for p, c in self.edges:
            parents[c] = p
        return parents

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "num_joints": self.num_joints,
            "edges": [list(e) for e in self.edges],
            "root_joint": self.root_joint,
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SkeletonTopology":
        try:
            return cls(
                id=str(d["id"]),
                num_joints=int(d["num_joints"]),
                edges=tuple(tuple(e) for e in d["edges"]),
                root_joint=int(d["root_joint"]),
                joint_names=tuple(d["joint_names"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SequenceFormatError(f"topology: {exc}") from exc


def topology_violations(topo: SkeletonTopology) -> list[str]:
    v = topo.num_joints
    problems = []
    if v < 1:
        return ["num_joints must be positive"]
    if len(topo.joint_names) != v:
        problems.append("joint_names length differs from num_joints")
    if not 0 <= topo.root_joint < v:
        problems.append("root_joint out of range")
    for p, c in topo.edges:
        if not (0 <= p < v and 0 <= c < v):
            problems.append(f"edge ({p}, {c}) out of range")
    if problems:
        return problems
    if len(topo.edges) != v - 1:
        problems.append("edges do not form a tree over all joints")
        return problems
    children = [c for _, c in topo.edges]
    if len(set(children)) != len(children) or topo.root_joint in children:
        problems.append("every non-root joint needs exactly one parent")
        return problems
    # connectivity from the root
    adj: dict[int, list[int]] = {}
    for p, c in topo.edges:
        adj.setdefault(p, []).append(c)
    seen, stack = {topo.root_joint}, [topo.root_joint]
    while stack:
        for c in adj.get(stack.pop(), []):
            if c not in seen:
                seen.add(c)
                stack.append(c)
    if len(seen) != v:
        problems.append("edges do not connect every joint to the root")
    return problems


# Default 13-joint 2D body. Index layout:
#   0 head, 1 neck, 2 l_shoulder, 3 r_shoulder, 4 l_elbow, 5 r_elbow,
#   6 l_wrist, 7 r_wrist, 8 pelvis (root), 9 l_hip, 10 r_hip, 11 l_knee, 12 r_knee
DEFAULT_TOPOLOGY = SkeletonTopology(
    id="body13",
    num_joints=13,
    edges=(
        (8, 1), (1, 0), (1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (5, 7),
        (8, 9), (8, 10), (9, 11), (10, 12),
    ),
    root_joint=8,
    joint_names=(
        "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
        "l_wrist", "r_wrist", "pelvis", "l_hip", "r_hip", "l_knee", "r_knee",
    ),
)

_REGISTRY: dict[str, SkeletonTopology] = {DEFAULT_TOPOLOGY.id: DEFAULT_TOPOLOGY}


def register_topology(topo: SkeletonTopology) -> SkeletonTopology:
    known = _REGISTRY.get(topo.id)
    if known is not None and known != topo:
        raise ValueError(f"topology id {topo.id!r} already registered with a different definition")
    _REGISTRY[topo.id] = topo
    return topo


def get_topology(topology_id: str) -> SkeletonTopology:
    try:
        return _REGISTRY[topology_id]
    except KeyError:
        raise KeyError(f"unknown topology {topology_id!r}") from None


@dataclass(frozen=True)
class SkeletonSequence:
    """A T x V x C_in array of joint coordinates plus metadata.

    The frames array is copied on construction and made read-only.
    """

    frames: np.ndarray
    fps: float = 30.0
    topology_id: str = DEFAULT_TOPOLOGY.id
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def V(self) -> int:
        return self.frames.shape[1]

    @property
    def C(self) -> int:
        return self.frames.shape[2]

    @property
    def topology(self) -> SkeletonTopology:
        return get_topology(self.topology_id)

    def replace_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(frames, fps=self.fps, topology_id=self.topology_id, meta=self.meta)


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_sequence(seq: SkeletonSequence, topo: SkeletonTopology | None = None) -> ValidationReport:
    """Check a sequence against its invariants. Violations are returned, never raised."""
    topo = topo if topo is not None else seq.topology
    frames = seq.frames
    out = []
    if frames.ndim != 3:
        return ValidationReport([f"frames must be 3-D (T, V, C), got ndim={frames.ndim}"])
    t, v, c = frames.shape
    if t < 1:
        out.append("empty sequence (T = 0)")
    if c not in (2, 3):
        out.append(f"coordinate channels must be 2 or 3, got {c}")
    if v != topo.num_joints:
        out.append(f"joint-count mismatch: frames have {v} joints, topology {topo.id!r} has {topo.num_joints}")
    if not (isinstance(seq.fps, (int, float)) and math.isfinite(seq.fps) and seq.fps > 0):
        out.append(f"fps must be a positive real, got {seq.fps!r}")
    bad = np.argwhere(~np.isfinite(frames))
    for idx in bad[:10]:
        out.append("non-finite value at ({}, {}, {})".format(*idx.tolist()))
    if len(bad) > 10:
        out.append(f"... and {len(bad) - 10} more non-finite values")
    return ValidationReport(out)


def bone_lengths(frame: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    parents = np.array([p for p, _ in topo.edges])
    children = np.array([c for _, c in topo.edges])
    return np.linalg.norm(frame[children] - frame[parents], axis=-1)


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    """Put the frame-0 root at the origin and make the frame-0 median bone length 1.

    Idempotent bit-for-bit: a sequence that is already normalized is returned unchanged.
    """
    topo = seq.topology
    frames = np.array(seq.frames)
    root = frames[0, topo.root_joint].copy()
    if np.any(root != 0.0):
        frames = frames - root
    scale = float(np.median(bone_lengths(frames[0], topo)))
    if scale < 1e-8:
        raise DegenerateSkeletonError("degenerate skeleton: median bone length of frame 0 is below 1e-8")
    # already-unit scale is left alone so normalization is exactly idempotent
    if abs(scale - 1.0) > 1e-9:
        frames = frames / scale
    return seq.replace_frames(frames)


def sequence_to_dict(seq: SkeletonSequence) -> dict[str, Any]:
    return {
        "version": FORMAT_VERSION,
        "fps": float(seq.fps),
        "topology": seq.topology.to_dict(),
        "frames": seq.frames.tolist(),
        "meta": {str(k): str(v) for k, v in seq.meta.items()},
    }


def sequence_from_dict(doc: Any) -> SkeletonSequence:
    if not isinstance(doc, dict):
        raise SequenceFormatError("document: expected a JSON object")
    for key in ("version", "fps", "topology", "frames"):
        if key not in doc:
            raise SequenceFormatError(f"{key}: missing field")
    if doc["version"] != FORMAT_VERSION:
        raise SequenceFormatError(f"version: unsupported value {doc['version']!r}")
    if not isinstance(doc["fps"], (int, float)) or isinstance(doc["fps"], bool):
        raise SequenceFormatError("fps: expected a number")
    if not isinstance(doc["topology"], dict):
        raise SequenceFormatError("topology: expected an object")
    topo = register_topology(SkeletonTopology.from_dict(doc["topology"]))
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise SequenceFormatError("frames: expected a non-empty list")
    try:
        arr = np.array(frames, dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise SequenceFormatError(f"frames: ragged or non-numeric rows ({exc})") from exc
    if arr.ndim != 3:
        raise SequenceFormatError(f"frames: expected T x V x C nesting, got {arr.ndim}-D")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise SequenceFormatError("meta: expected an object")
    seq = SkeletonSequence(arr, fps=float(doc["fps"]), topology_id=topo.id, meta=meta)
    report = validate_sequence(seq, topo)
    if not report.ok:
        raise SequenceFormatError("frames: " + report.violations[0])
    return seq


def write_sequence(seq: SkeletonSequence, path: str | Path) -> None:
    report = validate_sequence(seq)
    if not report.ok:
        raise ValueError("refusing to write invalid sequence: " + "; ".join(report.violations))
    Path(path).write_text(json.dumps(sequence_to_dict(seq), separators=(",", ":")))


def read_sequence(path: str | Path) -> SkeletonSequence:
    text = Path(path).read_text()
    if not text.strip():
        raise SequenceFormatError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{path}: not valid JSON ({exc})") from exc
    return sequence_from_dict(doc)


@dataclass
class ManifestEntry:
    sequence_path: str
    character_id: str
    motion_ids: list[str]
    viewpoint_id: str
    split: str
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "sequence_path": self.sequence_path,
            "character_id": self.character_id,
            "motion_ids": list(self.motion_ids),
            "viewpoint_id": self.viewpoint_id,
            "split": self.split,
        }
        d.update(self.extra)
        return d


@dataclass
class DatasetManifest:
    kind: str
    entries: list[ManifestEntry]
    root: Path | None = None  # directory sequence paths are relative to

    def __post_init__(self):
        if self.kind not in MANIFEST_KINDS:
            raise ValueError(f"manifest kind must be one of {MANIFEST_KINDS}, got {self.kind!r}")
        paths = [e.sequence_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest sequence_path values must be unique")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValueError(f"split must be train or test, got {e.split!r}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def load(self, entry: ManifestEntry) -> SkeletonSequence:
        return read_sequence(self.resolve(entry.sequence_path))


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [json.dumps({"manifest_kind": manifest.kind, "version": FORMAT_VERSION}, sort_keys=True)]
    lines += [json.dumps(e.to_dict(), sort_keys=True) for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise SequenceFormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if "manifest_kind" not in header:
        raise SequenceFormatError(f"{path}: manifest_kind: missing header line")
    entries = []
    known = {"sequence_path", "character_id", "motion_ids", "viewpoint_id", "split"}
    for i, line in enumerate(lines[1:], start=2):
        d = json.loads(line)
        missing = known - d.keys()
        if missing:
            raise SequenceFormatError(f"{path}:{i}: {sorted(missing)[0]}: missing field")
        entries.append(ManifestEntry(
            sequence_path=d["sequence_path"],
            character_id=d["character_id"],
            motion_ids=list(d["motion_ids"]),
            viewpoint_id=d["viewpoint_id"],
            split=d["split"],
            extra={k: v for k, v in d.items() if k not in known},
        ))
    return DatasetManifest(kind=header["manifest_kind"], entries=entries, root=path.parent)
