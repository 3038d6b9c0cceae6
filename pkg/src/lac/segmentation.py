"""Sliding-window fine-tuning, online window combination and linear probing."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import EncoderConfig, VisualEncoder, load_encoder, save_encoder
from .metrics import frame_map
from .retarget import write_history
from .skeleton import DatasetManifest, ManifestEntry, SkeletonSequence
from .synth import CLASS_NAMES, load_annotation


@dataclass
class WindowConfig:
    window_len: int = 64
    stride: int = 32
    combine: str = "mean"

    def __post_init__(self):
        if not 1 <= self.stride <= self.window_len:
            raise ValueError("need 1 <= stride <= window_len")
        if self.combine != "mean":
            raise ValueError(f"unsupported combine rule {self.combine!r}")


@dataclass
class SegmentPrediction:
    scores: np.ndarray  # T x num_classes
    coverage: np.ndarray  # windows covering each frame

    def to_dict(self, video_id: str) -> dict:
        return {"video_id": video_id, "scores": self.scores.tolist(), "coverage": self.coverage.astype(int).tolist()}


def window_starts(T: int, window_len: int, stride: int) -> list[int]:
    """Starts at 0, stride, 2*stride, ...; a final right-aligned window covers the tail."""
    if not 1 <= stride <= window_len:
        raise ValueError(f"need 1 <= stride <= window_len (got stride {stride}, window {window_len}); larger strides leave frames uncovered")
    if T < window_len:
        raise ValueError(f"sequence of {T} frames is shorter than the window ({window_len}); pad it or shrink the window")
    starts = list(range(0, T - window_len + 1, stride))
    if starts[-1] + window_len < T:
        starts.append(T - window_len)
    return starts


class OnlineCombiner:
    """Running per-frame mean of window predictions, in any arrival order."""

    def __init__(self, T: int, num_classes: int):
        self.sum = np.zeros((T, num_classes))
        self.count = np.zeros(T, dtype=np.int64)

    def add(self, start: int, scores: np.ndarray) -> None:
        self.sum[start:start + len(scores)] += scores
        self.count[start:start + len(scores)] += 1

    def result(self) -> SegmentPrediction:
        if (self.count == 0).any():
            raise ValueError("some frames are not covered by any window")
        return SegmentPrediction(scores=self.sum / self.count[:, None], coverage=self.count.copy())


@torch.no_grad()
def predict_untrimmed(seq: SkeletonSequence, model: VisualEncoder, wcfg: WindowConfig,
                      batch_size: int = 32) -> SegmentPrediction:
    frames = torch.as_tensor(np.array(seq.frames), dtype=next(model.parameters()).dtype)
    starts = window_starts(seq.T, wcfg.window_len, wcfg.stride)
    comb = OnlineCombiner(seq.T, model.config.num_classes)
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = torch.stack([frames[s:s + wcfg.window_len] for s in chunk])
        for s, sc in zip(chunk, model.scores(x).double().numpy()):
            comb.add(s, sc)
    return comb.result()


def select_label_subset(entries: list[ManifestEntry], fraction: float, seed: int) -> list[ManifestEntry]:
    """Seeded whole-video subsample; smaller fractions are nested in larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    order = np.random.default_rng(seed).permutation(len(entries))
    n = max(1, math.ceil(fraction * len(entries)))
    return [entries[i] for i in sorted(order[:n])]


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    label_fraction: float = 1.0
    subset_seed: int = 0
    freeze_backbone: bool = False
    checkpoint_interval: int = 500


class UntrimmedData:
    def __init__(self, manifest: DatasetManifest, entries: list[ManifestEntry] | None = None):
        if manifest.kind != "untrimmed":
            raise ValueError(f"expected an untrimmed manifest, got {manifest.kind!r}")
        self.entries = entries if entries is not None else manifest.split("train")
        self.videos, self.labels = [], []
        self.class_names = None
        for e in self.entries:
            ann = load_annotation(manifest, e)
            seq = manifest.load(e)
            if ann.labels.shape[0] != seq.T:
                raise ValueError(f"{e.sequence_path}: {ann.labels.shape[0]} label rows for {seq.T} frames")
            if self.class_names is None:
                self.class_names = ann.class_names
            elif ann.class_names != self.class_names:
                raise ValueError("videos disagree on class names")
            self.videos.append(torch.as_tensor(np.array(seq.frames), dtype=torch.float32))
            self.labels.append(torch.as_tensor(ann.labels, dtype=torch.float32))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def sample(self, rng: np.random.Generator, n: int, window_len: int):
        xs, ys = [], []
        for _ in range(n):
            v = int(rng.integers(len(self.videos)))
            T = self.videos[v].shape[0]
            if T < window_len:
                raise ValueError(f"video of {T} frames is shorter than the window ({window_len})")
            s = int(rng.integers(0, T - window_len + 1))
            xs.append(self.videos[v][s:s + window_len])
            ys.append(self.labels[v][s:s + window_len])
        return torch.stack(xs), torch.stack(ys)


def build_classifier_model(init_checkpoint: str | Path | None, num_classes: int, seed: int,
                           encoder_config: EncoderConfig | None = None, label_mode: str = "multi") -> VisualEncoder:
    """Encoder from a checkpoint (or fresh) with a seeded classifier attached."""
    torch.manual_seed(seed)
    if init_checkpoint is None:
        model = VisualEncoder(copy.deepcopy(encoder_config) if encoder_config else EncoderConfig())
    else:
        model, _ = load_encoder(init_checkpoint)
    if model.classifier is not None and model.config.num_classes != num_classes:
        raise ValueError(f"label/class-count mismatch: checkpoint classifier has {model.config.num_classes} "
                         f"classes, data has {num_classes}")
    if model.classifier is None:
        model.attach_classifier(num_classes, label_mode)
    return model


def finetune(manifest: DatasetManifest, init_checkpoint: str | Path | None, wcfg: WindowConfig,
             config: FinetuneConfig, out_dir: str | Path, encoder_config: EncoderConfig | None = None,
             resume_from: str | Path | None = None, data: UntrimmedData | None = None):
    """Per-frame BCE on random windows of labeled videos; returns (checkpoint path, history)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        train = select_label_subset(manifest.split("train"), config.label_fraction, config.subset_seed)
        data = UntrimmedData(manifest, train)
    if not data.videos:
        raise ValueError("no training videos")
    model = build_classifier_model(init_checkpoint, data.num_classes, config.seed, encoder_config)
    if config.freeze_backbone:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    start = 0
    if resume_from is not None:
        model, payload = load_encoder(resume_from)
        if config.freeze_backbone:
            for p in model.backbone.parameters():
                p.requires_grad_(False)
        opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=config.learning_rate)
        extra = payload["extra"]
        opt.load_state_dict(extra["optimizer"])
        rng.bit_generator.state = extra["rng"]
        history = list(extra["history"])
        start = extra["step"]

    def checkpoint(path, step):
        return save_encoder(model, path, config.seed, extra={
            "step": step, "optimizer": opt.state_dict(), "rng": rng.bit_generator.state,
            "history": history, "finetune_config": asdict(config), "window_config": asdict(wcfg),
            "class_names": data.class_names})

    model.train()
    for step in range(start, config.steps):
        x, y = data.sample(rng, config.batch_size, wcfg.window_len)
        loss = F.binary_cross_entropy_with_logits(model.logits(x), y)
        if not torch.isfinite(loss):
            raise RuntimeError(f"diverged: non-finite BCE at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item()})
        if (step + 1) % config.checkpoint_interval == 0 and step + 1 < config.steps:
            checkpoint(out / "checkpoints" / f"step_{step + 1:06d}.ckpt", step + 1)
    final = checkpoint(out / "finetuned.ckpt", config.steps)
    write_history(history, out / "loss_history.csv", ["step", "loss"])
    return final, history


def evaluate_segmentation(manifest: DatasetManifest, model: VisualEncoder, wcfg: WindowConfig,
                          split: str = "test", predictions_path: str | Path | None = None) -> dict:
    """Frame mAP over all frames of ``split`` videos (scores concatenated in time)."""
    scores, labels, dump = [], [], []
    for e in manifest.split(split):
        pred = predict_untrimmed(manifest.load(e), model, wcfg)
        scores.append(pred.scores)
        labels.append(load_annotation(manifest, e).labels)
        dump.append(pred.to_dict(e.extra.get("video_id", e.sequence_path)))
    if predictions_path is not None:
        Path(predictions_path).write_text(json.dumps(dump))
    return frame_map(np.concatenate(scores), np.concatenate(labels))


# ---------------------------------------------------------------- linear probe

def train_probe(features: torch.Tensor, labels: torch.Tensor, num_classes: int, mode: str = "multi",
                steps: int = 500, learning_rate: float = 1e-2, seed: int = 0,
                classifier: nn.Linear | None = None) -> nn.Linear:
    """Fit a linear classifier on fixed features (N, D).

    ``labels`` are multi-hot (N, C) for ``mode="multi"`` or class indices (N,) for ``"single"``.
    """
    torch.manual_seed(seed)
    clf = classifier if classifier is not None else nn.Linear(features.shape[1], num_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate)
    for _ in range(steps):
        z = clf(features)
        loss = (F.binary_cross_entropy_with_logits(z, labels.float()) if mode == "multi"
                else F.cross_entropy(z, labels.long()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return clf


@dataclass
class ProbeConfig:
    steps: int = 500
    learning_rate: float = 1e-2
    seed: int = 0
    label_fraction: float = 1.0
    subset_seed: int = 0


def _probe_set(manifest: DatasetManifest, model: VisualEncoder, entries: list[ManifestEntry]):
    feats, labels = [], []
    with torch.no_grad():
        for e in entries:
            seq = manifest.load(e)
            x = torch.as_tensor(np.array(seq.frames), dtype=torch.float32)[None]
            f = model.frame_features(x)[0]
            feats.append(f)
            if manifest.kind == "untrimmed":
                labels.append(torch.as_tensor(load_annotation(manifest, e).labels))
            else:
                labels.append(torch.full((seq.T,), CLASS_NAMES.index(e.motion_ids[0])))
    return torch.cat(feats), torch.cat(labels)


def linear_probe(manifest: DatasetManifest, frozen_checkpoint: str | Path | None, config: ProbeConfig,
                 encoder_config: EncoderConfig | None = None) -> dict:
    """Train only a linear classifier on frozen per-frame features.

    Untrimmed manifests are scored with frame mAP (multi-label); trimmed ones with
    frame accuracy (single-label, the clip's motion kind on every frame).
    """
    torch.manual_seed(config.seed)
    if frozen_checkpoint is None:
        model = VisualEncoder(copy.deepcopy(encoder_config) if encoder_config else EncoderConfig())
    else:
        model, _ = load_encoder(frozen_checkpoint)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    train = select_label_subset(manifest.split("train"), config.label_fraction, config.subset_seed)
    test = manifest.split("test")
    x, y = _probe_set(manifest, model, train)
    multi = manifest.kind == "untrimmed"
    num_classes = y.shape[1] if multi else len(CLASS_NAMES)
    clf = train_probe(x, y, num_classes, "multi" if multi else "single", config.steps,
                      config.learning_rate, config.seed)
    result = {"classifier": clf, "num_train_frames": len(x)}
    if test:
        xt, yt = _probe_set(manifest, model, test)
        with torch.no_grad():
            z = clf(xt)
        if multi:
            result["mAP"] = frame_map(torch.sigmoid(z).numpy(), yt.numpy())["mAP"]
        else:
            result["accuracy"] = float((z.argmax(1) == yt).float().mean())
    return result
