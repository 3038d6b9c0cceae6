"""Skeleton-sequence autoencoder with a learnable orthogonal action dictionary.

The latent code of a sequence (T' x C_out) is projected onto an orthonormal
dictionary whose first J rows are motion directions and last K rows static
directions. Motion magnitudes are kept per latent frame; static magnitudes are
taken from the time-averaged latent. Decoding sums the motion features of each
frame with the (broadcast) static features.

All tensor methods are batch-first: sequences are ``(B, T, V, C_in)`` and
latents ``(B, T', C_out)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .skeleton import SkeletonSequence

CHECKPOINT_KIND = "generator"


class RankDeficientError(RuntimeError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"rank-deficient dictionary: residual norm of row {row} is {norm:.3g} < 1e-8")
        self.row = row


def orthogonalize(raw: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Row-wise modified Gram-Schmidt. Differentiable; row i spans rows 0..i of ``raw``."""
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ValueError(f"dictionary must be square, got shape {tuple(raw.shape)}")
    rows = []
    rest = raw
    for i in range(raw.shape[0]):
        v = rest[0]
        norm = torch.linalg.vector_norm(v)
        if float(norm.detach()) < eps:
            raise RankDeficientError(i, float(norm.detach()))
        q = v / norm
        rows.append(q)
        tail = rest[1:]
        rest = torch.addr(tail, tail @ q, q, alpha=-1)
    return torch.stack(rows)


def orthogonality_error(d: torch.Tensor) -> tuple[float, float]:
    """(max off-diagonal |<d_i, d_j>|, max |‖d_i‖ - 1|)."""
    with torch.no_grad():
        gram = d @ d.T
        off = gram - torch.diag(torch.diagonal(gram))
        norms = torch.linalg.vector_norm(d, dim=1)
        return float(off.abs().max()), float((norms - 1).abs().max())


@dataclass
class GeneratorConfig:
    num_joints: int = 13
    in_channels: int = 2
    enc_channels: tuple[int, ...] = (64, 96, 160)
    enc_kernel: int = 8
    strides: tuple[int, ...] = (2, 2, 2)
    dec_channels: tuple[int, ...] = (128, 64)
    dec_kernel: int = 7
    J: int = 128
    K: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.strides = tuple(self.strides)
        self.dec_channels = tuple(self.dec_channels)
        if self.J < 1 or self.K < 1 or self.J + self.K != self.c_out:
            raise ValueError(f"need J >= 1, K >= 1 and J + K = C_out = {self.c_out}, got J={self.J}, K={self.K}")
        if len(self.strides) != len(self.enc_channels) or len(self.dec_channels) != len(self.strides) - 1:
            raise ValueError("encoder/decoder stage counts must match the stride list")
        if (self.enc_kernel - 2) % 2:
            raise ValueError("encoder kernel must be even for exact 'same' stride-2 padding")

    @property
    def c_out(self) -> int:
        return self.enc_channels[-1]

    @property
    def temporal_stride(self) -> int:
        return math.prod(self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


class ActionDictionary(nn.Module):
    """Learnable C_out x C_out matrix; rows 0..J-1 are motion, J.. static directions.

    The raw matrix is always kept in float64 so the orthogonality tolerance holds
    regardless of the precision of the convolutional layers.
    """

    def __init__(self, c_out: int, J: int, K: int):
        super().__init__()
        if J + K != c_out:
            raise ValueError("J + K must equal C_out")
        self.J, self.K = J, K
        self.raw = nn.Parameter(torch.randn(c_out, c_out, dtype=torch.float64) / math.sqrt(c_out))

    def orthogonalized(self) -> torch.Tensor:
        return orthogonalize(self.raw)

    @torch.no_grad()
    def rerandomize_row(self, row: int, generator: torch.Generator | None = None) -> None:
        c = self.raw.shape[1]
        self.raw[row] = torch.randn(c, generator=generator, dtype=self.raw.dtype) / math.sqrt(c)


def decompose_tensor(r: torch.Tensor, d: torch.Tensor, J: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Project latents ``(B, T', C)`` onto dictionary rows; returns (A_m (B, T', J), A_c (B, K))."""
    dm, dc = d[:J], d[J:]
    a_m = (r @ dm.T) / (dm * dm).sum(1)
    a_c = (r.mean(dim=1) @ dc.T) / (dc * dc).sum(1)
    return a_m, a_c


def recombine_tensor(a_m: torch.Tensor, a_c: torch.Tensor, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return motion features (B, T', C) and static features (B, 1, C)."""
    J = a_m.shape[-1]
    return a_m @ d[:J], (a_c @ d[J:])[:, None, :]


class GeneratorModel(nn.Module):
    """Temporal-conv encoder, upsampling decoder and the action dictionary.

    ``dtype`` applies to the convolutions; the dictionary and the projections are float64.
    """

    def __init__(self, config: GeneratorConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        flat = cfg.num_joints * cfg.in_channels
        layers: list[nn.Module] = []
        c_prev = flat
        for i, (c, s) in enumerate(zip(cfg.enc_channels, cfg.strides)):
            layers.append(nn.Conv1d(c_prev, c, cfg.enc_kernel, stride=s, padding=(cfg.enc_kernel - s) // 2))
            if i < len(cfg.enc_channels) - 1:
                layers.append(nn.LeakyReLU(cfg.leaky_slope))
            c_prev = c
        self.encoder = nn.Sequential(*layers)
        layers = []
        outs = list(cfg.dec_channels) + [flat]
        for i, c in enumerate(outs):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv1d(c_prev, c, cfg.dec_kernel, padding=cfg.dec_kernel // 2)]
            if i < len(outs) - 1:
                layers.append(nn.LeakyReLU(cfg.leaky_slope))
            c_prev = c
        self.decoder = nn.Sequential(*layers)
        self.encoder.to(dtype)
        self.decoder.to(dtype)
        self.dictionary = ActionDictionary(cfg.c_out, cfg.J, cfg.K)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder[0].weight.dtype

    @property
    def J(self) -> int:
        return self.config.J

    def check_length(self, T: int) -> None:
        stride = self.config.temporal_stride
        if T % stride:
            raise ValueError(f"sequence length T={T} is not divisible by {stride}; pad the sequence to a multiple of {stride}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        B, T, V, C = x.shape
        self.check_length(T)
        h = self.encoder(x.reshape(B, T, V * C).transpose(1, 2))
        return h.transpose(1, 2)

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        B, Tp, _ = feats.shape
        y = self.decoder(feats.transpose(1, 2)).transpose(1, 2)
        return y.reshape(B, Tp * self.config.temporal_stride, self.config.num_joints, self.config.in_channels)

    def split(self, x: torch.Tensor, d: torch.Tensor | None = None):
        """Encode and decompose: returns (motion features, static features, dictionary)."""
        d = self.dictionary.orthogonalized() if d is None else d
        a_m, a_c = decompose_tensor(self.encode(x).to(d.dtype), d, self.J)
        r_m, r_c = recombine_tensor(a_m, a_c, d)
        return r_m.to(self.dtype), r_c.to(self.dtype), d

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r_m, r_c, _ = self.split(x)
        return self.decode(r_m + r_c)


# ------------------------------------------------- sequence-level operations

@dataclass
class LatentCode:
    values: np.ndarray  # T' x C_out
    source_T: int


@dataclass
class LatentDecomposition:
    A_m: np.ndarray  # T' x J
    A_c: np.ndarray  # K


def _as_batch(seq: SkeletonSequence, model: GeneratorModel) -> torch.Tensor:
    cfg = model.config
    if seq.V != cfg.num_joints or seq.C != cfg.in_channels:
        raise ValueError(f"sequence shape (V={seq.V}, C={seq.C}) does not match model (V={cfg.num_joints}, C={cfg.in_channels})")
    return torch.as_tensor(np.array(seq.frames), dtype=_dtype(model))[None]


def _dtype(model: GeneratorModel) -> torch.dtype:
    return model.dtype


def _to_sequence(y: torch.Tensor, like: SkeletonSequence | None = None) -> SkeletonSequence:
    frames = y.detach().cpu().double().numpy()
    if like is None:
        return SkeletonSequence(frames)
    return SkeletonSequence(frames, fps=like.fps, topology_id=like.topology_id)


@torch.no_grad()
def encode(seq: SkeletonSequence, model: GeneratorModel) -> LatentCode:
    r = model.encode(_as_batch(seq, model))[0]
    return LatentCode(values=r.double().numpy(), source_T=seq.T)


def _dict_tensor(dictionary) -> torch.Tensor:
    if isinstance(dictionary, ActionDictionary):
        with torch.no_grad():
            return dictionary.orthogonalized().double()
    return torch.as_tensor(np.array(dictionary), dtype=torch.float64)


def decompose(latent: LatentCode | np.ndarray, dictionary, J: int | None = None) -> LatentDecomposition:
    """Magnitudes of a latent along motion (per frame) and static (pooled) directions.

    ``dictionary`` is an :class:`ActionDictionary` or an already-orthogonalized matrix
    (then ``J`` is required).
    """
    values = latent.values if isinstance(latent, LatentCode) else np.asarray(latent)
    d = _dict_tensor(dictionary)
    J = dictionary.J if isinstance(dictionary, ActionDictionary) else J
    if J is None:
        raise ValueError("J is required when passing a raw dictionary matrix")
    if values.shape[-1] != d.shape[1]:
        raise ValueError(f"latent width {values.shape[-1]} does not match dictionary width {d.shape[1]}")
    a_m, a_c = decompose_tensor(torch.as_tensor(values, dtype=torch.float64)[None], d, J)
    return LatentDecomposition(A_m=a_m[0].numpy(), A_c=a_c[0].numpy())


def recombine(decomp: LatentDecomposition, dictionary) -> tuple[np.ndarray, np.ndarray]:
    d = _dict_tensor(dictionary)
    r_m, r_c = recombine_tensor(torch.as_tensor(decomp.A_m)[None], torch.as_tensor(decomp.A_c)[None], d)
    return r_m[0].numpy(), r_c[0].numpy()


@torch.no_grad()
def decode(features: np.ndarray, model: GeneratorModel) -> SkeletonSequence:
    f = torch.as_tensor(np.array(features), dtype=_dtype(model))
    if not torch.isfinite(f).all():
        raise ValueError("decoder input contains non-finite values")
    return _to_sequence(model.decode(f[None])[0])


@torch.no_grad()
def retarget(seq_a: SkeletonSequence, seq_b: SkeletonSequence, model: GeneratorModel):
    """Swap static features: returns (motion of a on b's static, motion of b on a's static)."""
    if seq_a.T != seq_b.T:
        raise ValueError(f"retarget needs equal lengths, got {seq_a.T} and {seq_b.T}")
    x = torch.cat([_as_batch(seq_a, model), _as_batch(seq_b, model)])
    r_m, r_c, _ = model.split(x)
    y = model.decode(torch.stack([r_m[0] + r_c[1], r_m[1] + r_c[0]]))
    return _to_sequence(y[0], seq_a), _to_sequence(y[1], seq_b)


@torch.no_grad()
def compose_features(seqs: list[SkeletonSequence], static_source_index: int,
                     model: GeneratorModel) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoder inputs for a composition, split as (mean motion features, static features)."""
    if len(seqs) < 2:
        raise ValueError("compose needs at least two sequences")
    if len({s.T for s in seqs}) != 1:
        raise ValueError("compose needs sequences of equal length")
    if not 0 <= static_source_index < len(seqs):
        raise IndexError(f"static_source_index {static_source_index} out of range for {len(seqs)} sequences")
    # one forward pass per sequence: batched convolutions may round differently from the single-sequence
    # path, and composing identical inputs must reproduce the reconstruction latent exactly
    parts = [model.split(_as_batch(s, model)) for s in seqs]
    r_m = torch.cat([p[0] for p in parts])
    return r_m.mean(dim=0), parts[static_source_index][1][0]


@torch.no_grad()
def compose(seqs: list[SkeletonSequence], static_source_index: int, model: GeneratorModel) -> SkeletonSequence:
    motion, static = compose_features(seqs, static_source_index, model)
    return _to_sequence(model.decode((motion + static)[None])[0], seqs[static_source_index])


@torch.no_grad()
def reconstruct(seq: SkeletonSequence, model: GeneratorModel) -> SkeletonSequence:
    return _to_sequence(model(_as_batch(seq, model))[0], seq)


# ---------------------------------------------------------------- checkpoints

def save_generator(model: GeneratorModel, path: str | Path, seed: int, extra: dict | None = None) -> Path:
    return save_checkpoint(path, CHECKPOINT_KIND, model.config.to_dict(), model.state_dict(), seed, extra)


def load_generator(path: str | Path, expected: GeneratorConfig | None = None) -> tuple[GeneratorModel, dict]:
    payload = load_checkpoint(path, CHECKPOINT_KIND, expected.to_dict() if expected is not None else None)
    cfg = GeneratorConfig.from_dict(payload["config"])
    model = GeneratorModel(cfg, dtype=payload["state"]["encoder.0.weight"].dtype)
    model.load_state_dict(payload["state"])
    return model, payload
