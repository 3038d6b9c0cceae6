"""Two-level contrastive pretraining of the visual encoder.

Queries are decoded compositions of the motion features of several clips;
positive keys share the composed motion but carry the static features of
other clips in the batch. A momentum copy of the encoder embeds the keys, and
a FIFO queue keeps both sequence-level and per-frame key embeddings as
negatives.

The losses follow the printed form, with negatives only in the denominator::

    L = -log( sum_p exp(s(q, k+_p)) / sum_n exp(s(q, k-_n)) )

where for the frame level ``s`` is the sum of per-frame similarities.
``positives_in_denominator=True`` switches to the usual InfoNCE denominator.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint
from .encoder import CHECKPOINT_KIND as ENCODER_KIND
from .encoder import EncoderConfig, VisualEncoder, save_encoder
from .generator import GeneratorModel, compose_features, load_generator
from .retarget import write_history
from .skeleton import DatasetManifest, SkeletonSequence

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["step", "L_qs", "L_qf", "L_total", "queue_len"]


class DegenerateEmbeddingError(ValueError):
    pass


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int = 256, hidden: int = 256, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


def _project(x: torch.Tensor, head) -> torch.Tensor:
    return x if head is None else head(x)


def _unit(z: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateEmbeddingError("degenerate embedding: projected vector has zero norm")
    return z / norm


def similarity(x: torch.Tensor, y: torch.Tensor, head=None, temp: float = 0.07) -> torch.Tensor:
    """Cosine similarity of the projected vectors divided by the temperature."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    return (_unit(_project(x, head)) * _unit(_project(y, head))).sum(-1) / temp


def _nce_from_logits(pos: torch.Tensor, neg: torch.Tensor, positives_in_denominator: bool) -> torch.Tensor:
    """Mean over queries of -(logsumexp(pos) - logsumexp(denominator)); pos (Q, P), neg (Q, N)."""
    if neg.shape[-1] == 0:
        raise ValueError("empty queue: at least one negative is required")
    denom = torch.cat([neg, pos], dim=-1) if positives_in_denominator else neg
    return -(torch.logsumexp(pos, dim=-1) - torch.logsumexp(denom, dim=-1)).mean()


def info_nce_sequence(q_feat: torch.Tensor, pos_feats: torch.Tensor, queue: torch.Tensor, head=None,
                      temp: float = 0.07, positives_in_denominator: bool = False) -> torch.Tensor:
    """Sequence-level loss for one query.

    ``q_feat`` (D,) and ``pos_feats`` (P, D) go through ``head``; ``queue`` (N, D')
    holds negatives that are already projected.
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    if queue.shape[0] == 0:
        raise ValueError("empty queue: at least one negative is required")
    q = _unit(_project(q_feat, head))
    pos = _unit(_project(pos_feats, head)) @ q / temp
    neg = _unit(queue) @ q / temp
    return _nce_from_logits(pos[None], neg[None], positives_in_denominator)


def info_nce_frame(q_frames: torch.Tensor, pos_frames: torch.Tensor, queue: torch.Tensor, head=None,
                   temp: float = 0.07, positives_in_denominator: bool = False) -> torch.Tensor:
    """Frame-level loss for one query; per-frame similarities are summed inside each exponent.

    ``q_frames`` (T_s, D), ``pos_frames`` (P, T_s, D), ``queue`` (N, T_s, D') already projected.
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    if queue.shape[0] == 0:
        raise ValueError("empty queue: at least one negative is required")
    t_s = q_frames.shape[0]
    if pos_frames.shape[1] != t_s or queue.shape[1] != t_s:
        raise ValueError(f"T_s mismatch: query {t_s}, positives {pos_frames.shape[1]}, queue {queue.shape[1]}")
    q = _unit(_project(q_frames, head))
    pos = (_unit(_project(pos_frames, head)) * q).sum(dim=(-1, -2)) / temp
    neg = (_unit(queue) * q).sum(dim=(-1, -2)) / temp
    return _nce_from_logits(pos[None], neg[None], positives_in_denominator)


@torch.no_grad()
def momentum_update(query_params, key_params, m: float) -> None:
    """key <- m * key + (1 - m) * query, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    query_params, key_params = list(query_params), list(key_params)
    if len(query_params) != len(key_params):
        raise ValueError("parameter lists differ in length")
    for q, k in zip(query_params, key_params):
        if q.shape != k.shape:
            raise ValueError(f"parameter shape mismatch: {tuple(q.shape)} vs {tuple(k.shape)}")
        k.mul_(m).add_(q.detach(), alpha=1.0 - m)


class NegativeQueue:
    """Fixed-capacity FIFO of key embeddings at sequence and frame level (ring buffer)."""

    def __init__(self, capacity: int, dim: int, frames: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.seq = torch.zeros(capacity, dim)
        self.frames = torch.zeros(capacity, frames, dim)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @torch.no_grad()
    def enqueue(self, seq_feats: torch.Tensor, frame_feats: torch.Tensor) -> None:
        for s, f in zip(seq_feats.detach(), frame_feats.detach()):
            self.seq[self.ptr] = s
            self.frames[self.ptr] = f
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def entries(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Contents oldest first."""
        if self.size < self.capacity:
            idx = torch.arange(self.size)
        else:
            idx = (torch.arange(self.capacity) + self.ptr) % self.capacity
        return self.seq[idx], self.frames[idx]

    def state_dict(self) -> dict:
        return {"seq": self.seq.clone(), "frames": self.frames.clone(), "ptr": self.ptr, "size": self.size}

    def load_state_dict(self, d: dict) -> None:
        self.seq, self.frames, self.ptr, self.size = d["seq"].clone(), d["frames"].clone(), d["ptr"], d["size"]


@dataclass
class ContrastiveBatch:
    query: SkeletonSequence
    positives: list[SkeletonSequence]
    provenance: list[int]  # indices of the composed motion sources
    motion_features: np.ndarray  # decoder motion input shared by query and positives
    static_features: list[np.ndarray] = field(default_factory=list)  # query first, then positives


@torch.no_grad()
def make_query_and_keys(motion_sources: list[SkeletonSequence], generator: GeneratorModel, P: int,
                        static_pool: list[SkeletonSequence], rng: np.random.Generator,
                        provenance: list[int] | None = None) -> ContrastiveBatch:
    """Compose the motions of ``motion_sources`` on the static of the first; positives
    swap in the static features of ``P`` members of ``static_pool``.

    Static sources are drawn without replacement when the pool is large enough.
    """
    if P < 1:
        raise ValueError("need at least one positive key (P >= 1)")
    motion, static = compose_features(motion_sources, 0, generator)
    _, pool_static, _ = generator.split(torch.cat([
        torch.as_tensor(np.array(s.frames), dtype=generator.dtype)[None] for s in static_pool]))
    pick = rng.choice(len(static_pool), size=P, replace=len(static_pool) < P)
    statics = [static] + [pool_static[i] for i in pick]
    y = generator.decode(torch.stack([motion + s for s in statics]))
    seqs = [SkeletonSequence(f.double().numpy(), topology_id=motion_sources[0].topology_id) for f in y]
    return ContrastiveBatch(
        query=seqs[0], positives=seqs[1:], provenance=list(provenance or range(len(motion_sources))),
        motion_features=motion.double().numpy(),
        static_features=[s.double().numpy() for s in statics],
    )


@dataclass
class ContrastiveConfig:
    steps: int = 2000
    batch_size: int = 8  # clips sampled per step; motion and static sources come from here
    queries_per_step: int = 4
    num_positives: int = 4
    num_motions: int = 2
    queue_size: int = 4096
    temperature: float = 0.07
    momentum: float = 0.999
    sample_rate: int = 4
    frame_level: bool = True
    positives_in_denominator: bool = False
    tie_heads: bool = False
    proj_dim: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.batch_size < self.num_positives + 1:
            raise ValueError(f"batch of {self.batch_size} clips is smaller than P+1 = {self.num_positives + 1}")
        if self.batch_size < self.num_motions or self.num_motions < 2:
            raise ValueError("num_motions must be >= 2 and fit in the batch")
        if self.queries_per_step < 2:
            raise ValueError("queries_per_step must be >= 2 (other queries' keys are negatives when the queue is empty)")
        if self.temperature <= 0 or not 0 <= self.momentum <= 1 or self.sample_rate < 1:
            raise ValueError("invalid temperature, momentum or sample_rate")


class ContrastiveModel(nn.Module):
    """Online encoder + heads, and their momentum copies."""

    def __init__(self, encoder_config: EncoderConfig, proj_dim: int = 128, tie_heads: bool = False):
        super().__init__()
        dim = encoder_config.feature_dim
        self.encoder = VisualEncoder(encoder_config)
        self.head_seq = ProjectionHead(dim, dim, proj_dim)
        self.head_frame = self.head_seq if tie_heads else ProjectionHead(dim, dim, proj_dim)
        self.key_encoder = copy.deepcopy(self.encoder)
        self.key_head_seq = copy.deepcopy(self.head_seq)
        self.key_head_frame = self.key_head_seq if tie_heads else copy.deepcopy(self.head_frame)
        for p in self.key_parameters():
            p.requires_grad_(False)

    def online_parameters(self):
        return [*self.encoder.parameters(), *self.head_seq.parameters(),
                *(self.head_frame.parameters() if self.head_frame is not self.head_seq else [])]

    def key_parameters(self):
        return [*self.key_encoder.parameters(), *self.key_head_seq.parameters(),
                *(self.key_head_frame.parameters() if self.key_head_frame is not self.key_head_seq else [])]

    def embed(self, x: torch.Tensor, sample_rate: int, key: bool = False):
        enc = self.key_encoder if key else self.encoder
        hs = self.key_head_seq if key else self.head_seq
        hf = self.key_head_frame if key else self.head_frame
        frames = enc.frame_features(x)
        return _unit(hs(frames.mean(dim=1))), _unit(hf(frames[:, ::sample_rate]))


def contrastive_losses(model: ContrastiveModel, queries: torch.Tensor, keys: torch.Tensor,
                       queue: NegativeQueue, config: ContrastiveConfig):
    """Losses for Q queries (Q, T, V, C) and their keys (Q, P, T, V, C).

    Negatives are the queue plus the keys of the other queries of this step.
    Returns (L_qs, L_qf, key_seq_emb, key_frame_emb).
    """
    Q, P = keys.shape[:2]
    qs, qf = model.embed(queries, config.sample_rate)
    with torch.no_grad():
        ks, kf = model.embed(keys.flatten(0, 1), config.sample_rate, key=True)
    ks_q, kf_q = ks.view(Q, P, -1), kf.view(Q, P, kf.shape[1], -1)
    qseq, qfr = queue.entries()
    t = config.temperature
    pos_s = torch.einsum("qd,qpd->qp", qs, ks_q) / t
    pos_f = torch.einsum("qtd,qptd->qp", qf, kf_q) / t
    neg_s_all = torch.cat([qseq, ks]) @ qs.T / t  # (N + Q*P, Q)
    neg_f_all = torch.einsum("qtd,ntd->nq", qf, torch.cat([qfr, kf])) / t
    own = torch.zeros(Q, len(qseq) + Q * P, dtype=torch.bool)
    for i in range(Q):
        own[i, len(qseq) + i * P: len(qseq) + (i + 1) * P] = True
    neg_s = neg_s_all.T.masked_fill(own, float("-inf"))
    neg_f = neg_f_all.T.masked_fill(own, float("-inf"))
    l_s = _nce_from_logits(pos_s, neg_s, config.positives_in_denominator)
    l_f = _nce_from_logits(pos_f, neg_f, config.positives_in_denominator)
    return l_s, l_f, ks, kf


def load_pretraining_clips(manifest: DatasetManifest) -> torch.Tensor:
    entries = manifest.split("train") or manifest.entries
    clips = [manifest.load(e).frames for e in entries]
    if len({c.shape for c in clips}) != 1:
        raise ValueError("pretraining clips must all have the same length (the frame queue needs a fixed T_s)")
    return torch.as_tensor(np.stack(clips), dtype=torch.float32)


def _build_step(rng: np.random.Generator, clips: torch.Tensor, generator: GeneratorModel, config: ContrastiveConfig):
    """Decode Q queries and their P keys for one step."""
    B, Q, P, M = config.batch_size, config.queries_per_step, config.num_positives, config.num_motions
    idx = rng.choice(len(clips), size=B, replace=len(clips) < B)
    with torch.no_grad():
        r_m, r_c, _ = generator.split(clips[idx].to(generator.dtype))
        inputs = []
        # disjoint motion groups when the batch allows it, so in-step negatives differ in motion
        perm = rng.permutation(B)
        for i in range(Q):
            if (i + 1) * M <= B:
                group = perm[i * M:(i + 1) * M]
            else:
                group = rng.permutation(B)[:M]
            a = group[0]
            others = [j for j in range(B) if j != a]
            statics = rng.choice(others, size=P, replace=len(others) < P)
            motion = r_m[group].mean(dim=0)
            inputs.append(motion + r_c[a])
            inputs += [motion + r_c[s] for s in statics]
        y = generator.decode(torch.stack(inputs)).float()
    y = y.view(Q, P + 1, *y.shape[1:])
    return y[:, 0], y[:, 1:]


def pretrain(manifest: DatasetManifest, generator_checkpoint: str | Path, config: ContrastiveConfig,
             out_dir: str | Path, encoder_config: EncoderConfig | None = None,
             resume_from: str | Path | None = None, clips: torch.Tensor | None = None):
    """Contrastive pretraining; returns (encoder checkpoint path, loss history rows).

    Writes ``encoder.ckpt`` (a plain visual-encoder checkpoint whose extra holds the
    full training state), ``loss_history.csv`` and periodic checkpoints into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    generator, _ = load_generator(generator_checkpoint)
    generator.eval()
    clips = load_pretraining_clips(manifest) if clips is None else clips
    T = clips.shape[1]
    if len(clips) < config.num_positives + 1:
        raise ValueError(f"need at least P+1 = {config.num_positives + 1} clips, got {len(clips)}")
    t_s = len(range(0, T, config.sample_rate))

    torch.manual_seed(config.seed)
    enc_cfg = copy.deepcopy(encoder_config) if encoder_config is not None else EncoderConfig()
    model = ContrastiveModel(enc_cfg, config.proj_dim, config.tie_heads)
    opt = torch.optim.Adam(model.online_parameters(), lr=config.learning_rate)
    queue = NegativeQueue(config.queue_size, config.proj_dim, t_s)
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    start = 0
    if resume_from is not None:
        extra = load_checkpoint(resume_from, ENCODER_KIND)["extra"]
        model.load_state_dict(extra["contrastive_state"])
        opt.load_state_dict(extra["optimizer"])
        queue.load_state_dict(extra["queue"])
        rng.bit_generator.state = extra["rng"]
        history = list(extra["history"])
        start = extra["step"]

    def checkpoint(path, step):
        return save_encoder(model.encoder, path, config.seed, extra={
            "step": step, "contrastive_state": model.state_dict(), "optimizer": opt.state_dict(),
            "queue": queue.state_dict(), "rng": rng.bit_generator.state, "history": history,
            "contrastive_config": asdict(config)})

    for step in range(start, config.steps):
        queries, keys = _build_step(rng, clips, generator, config)
        l_s, l_f, ks, kf = contrastive_losses(model, queries, keys, queue, config)
        loss = l_s + l_f if config.frame_level else l_s
        if not torch.isfinite(loss):
            raise RuntimeError(f"diverged: non-finite contrastive loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        momentum_update(model.online_parameters(), model.key_parameters(), config.momentum)
        queue.enqueue(ks, kf)
        history.append({"step": step, "L_qs": l_s.item(), "L_qf": l_f.item(), "L_total": loss.item(),
                        "queue_len": len(queue)})
        if (step + 1) % config.checkpoint_interval == 0 and step + 1 < config.steps:
            checkpoint(out / "checkpoints" / f"step_{step + 1:06d}.ckpt", step + 1)
    final = checkpoint(out / "encoder.ckpt", config.steps)
    write_history(history, out / "loss_history.csv", HISTORY_FIELDS)
    return final, history


@torch.no_grad()
def fixed_negative_losses(encoder_checkpoint: str | Path, generator_checkpoint: str | Path,
                          clips: torch.Tensor, rounds: int = 8, seed: int = 12345,
                          encoder_config: EncoderConfig | None = None) -> dict:
    """Mean (L_qs, L_qf) of a pretrained checkpoint on freshly drawn steps with an empty queue.

    The training log mixes model progress with queue growth (more negatives raise the
    loss), so comparing its first and last rows says little. Here every checkpoint sees
    the same steps and only the in-step negatives, which makes losses comparable.
    """
    payload = load_checkpoint(encoder_checkpoint, ENCODER_KIND)
    extra = payload["extra"]
    config = ContrastiveConfig(**extra["contrastive_config"])
    enc_cfg = encoder_config or EncoderConfig.from_dict(payload["config"])
    model = ContrastiveModel(enc_cfg, config.proj_dim, config.tie_heads)
    model.load_state_dict(extra["contrastive_state"])
    model.eval()
    generator, _ = load_generator(generator_checkpoint)
    generator.eval()
    t_s = len(range(0, clips.shape[1], config.sample_rate))
    rng = np.random.default_rng(seed)
    total_s = total_f = 0.0
    for _ in range(rounds):
        queries, keys = _build_step(rng, clips, generator, config)
        l_s, l_f, _, _ = contrastive_losses(model, queries, keys, NegativeQueue(1, config.proj_dim, t_s), config)
        total_s += l_s.item()
        total_f += l_f.item()
    return {"L_qs": total_s / rounds, "L_qf": total_f / rounds}
