"""Skeleton visual encoder: stacked (1x1 channel mix, 9x1 temporal) conv blocks.

Input sequences ``(B, T, V, C_in)`` are treated as images of shape T x V with
C_in channels. Joints are only mixed by the final spatial average pooling,
which yields per-frame features ``(B, T, D)``; their temporal mean is the
sequence feature. An optional linear classifier gives per-frame scores.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .skeleton import SkeletonSequence

CHECKPOINT_KIND = "visual_encoder"
BACKBONE_NAME = "table1-backbone"


@dataclass
class EncoderConfig:
    num_joints: int = 13
    in_channels: int = 2
    channels: tuple[int, ...] = (64, 128, 256)
    blocks: tuple[int, ...] = (4, 3, 3)
    temporal_kernel: int = 9
    residual: bool = True
    num_classes: int = 0
    label_mode: str = "multi"  # "multi": sigmoid + BCE, "single": softmax + CE
    backbone: str = BACKBONE_NAME

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.blocks = tuple(self.blocks)
        if len(self.channels) != len(self.blocks):
            raise ValueError("channels and blocks must have one entry per stage")
        if self.temporal_kernel % 2 == 0:
            raise ValueError("temporal kernel must be odd for symmetric padding")
        if self.label_mode not in ("multi", "single"):
            raise ValueError(f"label_mode must be 'multi' or 'single', got {self.label_mode!r}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def halo(self) -> int:
        """Frames per side affected by zero padding (receptive-field radius)."""
        return sum(self.blocks) * (self.temporal_kernel // 2)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, residual: bool):
        super().__init__()
        self.mix = nn.Conv2d(c_in, c_out, 1)
        self.temporal = nn.Conv2d(c_out, c_out, (kernel, 1), padding=(kernel // 2, 0))
        self.residual = residual and c_in == c_out
        self.act = nn.ReLU()

    def forward(self, x):
        y = self.act(self.temporal(self.act(self.mix(x))))
        return x + y if self.residual else y


class VisualEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        layers = []
        c_prev = cfg.in_channels
        for c, n in zip(cfg.channels, cfg.blocks):
            for _ in range(n):
                layers.append(Block(c_prev, c, cfg.temporal_kernel, cfg.residual))
                c_prev = c
        self.backbone = nn.Sequential(*layers)
        self.classifier = nn.Linear(cfg.feature_dim, cfg.num_classes) if cfg.num_classes else None

    def attach_classifier(self, num_classes: int, label_mode: str = "multi") -> None:
        self.config.num_classes = num_classes
        self.config.label_mode = label_mode
        self.config.__post_init__()
        p = next(self.parameters())
        self.classifier = nn.Linear(self.config.feature_dim, num_classes).to(p.dtype)

    def frame_features(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T, V, C)`` -> ``(B, T, D)``; temporal length preserved."""
        if x.shape[2] != self.config.num_joints or x.shape[3] != self.config.in_channels:
            raise ValueError(f"joint-count mismatch: input has V={x.shape[2]}, C={x.shape[3]}; "
                             f"model expects V={self.config.num_joints}, C={self.config.in_channels}")
        h = self.backbone(x.permute(0, 3, 1, 2))  # B, D, T, V
        return h.mean(dim=3).transpose(1, 2)

    def sequence_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.frame_features(x).mean(dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise RuntimeError("classifier absent: call attach_classifier first")
        return self.classifier(self.frame_features(x))

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        z = self.logits(x)
        return torch.sigmoid(z) if self.config.label_mode == "multi" else torch.softmax(z, dim=-1)

    def backbone_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("classifier.")}


def _batch(seq: SkeletonSequence, model: VisualEncoder) -> torch.Tensor:
    if seq.V != model.config.num_joints:
        raise ValueError(f"joint-count mismatch: sequence has {seq.V} joints, model expects {model.config.num_joints}")
    return torch.as_tensor(np.array(seq.frames), dtype=next(model.parameters()).dtype)[None]


@torch.no_grad()
def encode_frames(seq: SkeletonSequence, model: VisualEncoder) -> np.ndarray:
    return model.frame_features(_batch(seq, model))[0].double().numpy()


@torch.no_grad()
def encode_sequence(seq: SkeletonSequence, model: VisualEncoder) -> np.ndarray:
    return model.sequence_features(_batch(seq, model))[0].double().numpy()


@torch.no_grad()
def classify_frames(seq: SkeletonSequence, model: VisualEncoder) -> np.ndarray:
    return model.scores(_batch(seq, model))[0].double().numpy()


def save_encoder(model: VisualEncoder, path: str | Path, seed: int, extra: dict | None = None) -> Path:
    return save_checkpoint(path, CHECKPOINT_KIND, model.config.to_dict(), model.state_dict(), seed, extra)


def load_encoder(path: str | Path, expected: EncoderConfig | None = None) -> tuple[VisualEncoder, dict]:
    payload = load_checkpoint(path, CHECKPOINT_KIND, expected.to_dict() if expected is not None else None)
    model = VisualEncoder(EncoderConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state"])
    return model, payload
