"""Training the generator by cross-character motion retargeting."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .generator import (
    GeneratorConfig,
    GeneratorModel,
    RankDeficientError,
    load_generator,
    orthogonality_error,
    save_generator,
)
from .skeleton import DatasetManifest

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-5
HISTORY_FIELDS = ["step", "L_self", "L_target", "L_total", "ortho_error"]


class DivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 3000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0 or self.checkpoint_interval < 1:
            raise ValueError("learning_rate, batch_size and checkpoint_interval must be positive, steps >= 0")


@dataclass
class RetargetBatch:
    """Sequence pairs (B, T, V, C) with both cross-rendered ground truths."""

    p_mc: torch.Tensor
    p_m2c2: torch.Tensor
    target_mc2: torch.Tensor  # motion of p_mc on the static of p_m2c2
    target_m2c: torch.Tensor  # motion of p_m2c2 on the static of p_mc

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.p_mc, self.p_m2c2, self.target_mc2, self.target_m2c)}
        if len(shapes) != 1:
            raise ValueError(f"retarget batch tensors must share one shape, got {sorted(shapes)}")


def reconstruction_loss(batch: RetargetBatch, model: GeneratorModel, step: int | None = None,
                        return_dictionary: bool = False):
    """Self + cross reconstruction loss; returns (total, {"L_self": .., "L_target": ..}).

    Every term is a mean over frames, joints, coordinates and batch.
    """
    x = torch.cat([batch.p_mc, batch.p_m2c2]).to(model.dtype)
    r_m, r_c, d = model.split(x)
    B = batch.p_mc.shape[0]
    rm_a, rm_b, rc_a, rc_b = r_m[:B], r_m[B:], r_c[:B], r_c[B:]
    y = model.decode(torch.cat([rm_a + rc_a, rm_b + rc_b, rm_a + rc_b, rm_b + rc_a]))
    y_self_a, y_self_b, y_cross_a, y_cross_b = y.split(B)
    l_self = ((y_self_a - batch.p_mc) ** 2).mean() + ((y_self_b - batch.p_m2c2) ** 2).mean()
    l_target = ((y_cross_a - batch.target_mc2) ** 2).mean() + ((y_cross_b - batch.target_m2c) ** 2).mean()
    total = l_self + l_target
    if not torch.isfinite(total):
        raise DivergedError(f"diverged: non-finite reconstruction loss at step {step}")
    terms = {"L_self": l_self, "L_target": l_target}
    if return_dictionary:
        terms["dictionary"] = d
    return total, terms


class RetargetData:
    """All sequences of a retarget manifest in memory, indexed by (motion, character, view)."""

    def __init__(self, manifest: DatasetManifest, dtype=torch.float32):
        if manifest.kind != "retarget_pairs":
            raise ValueError(f"expected a retarget_pairs manifest, got {manifest.kind!r}")
        if not manifest.entries:
            raise ValueError("empty manifest")
        self.entries = manifest.entries
        self.frames = torch.as_tensor(np.stack([manifest.load(e).frames for e in self.entries]), dtype=dtype)
        self.key = {(e.motion_ids[0], e.character_id, e.viewpoint_id): i for i, e in enumerate(self.entries)}

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if e.split == split], dtype=np.int64)

    def cross_target(self, motion_from: int, static_from: int) -> int:
        m = self.entries[motion_from].motion_ids[0]
        e = self.entries[static_from]
        try:
            return self.key[(m, e.character_id, e.viewpoint_id)]
        except KeyError:
            raise KeyError(f"no ground truth for motion {m} on {e.character_id}/{e.viewpoint_id}") from None

    def pairs(self, split: str) -> list[tuple[int, int]]:
        idx = self.indices(split)
        chars = [self.entries[i].character_id for i in idx]
        return [(int(a), int(b)) for ia, a in enumerate(idx) for ib, b in enumerate(idx) if chars[ia] != chars[ib]]

    def batch(self, pairs) -> RetargetBatch:
        a = [p[0] for p in pairs]
        b = [p[1] for p in pairs]
        return RetargetBatch(
            p_mc=self.frames[a], p_m2c2=self.frames[b],
            target_mc2=self.frames[[self.cross_target(i, j) for i, j in pairs]],
            target_m2c=self.frames[[self.cross_target(j, i) for i, j in pairs]],
        )


def _check_orthogonality(d: torch.Tensor, step: int) -> float:
    off, norm = orthogonality_error(d)
    err = max(off, norm)
    if err > ORTHO_TOL:
        raise RuntimeError(f"dictionary orthogonality violated at step {step}: {err:.3g}")
    return err


def _sample_pairs(rng: np.random.Generator, train_idx: np.ndarray, chars: np.ndarray, n: int):
    out = []
    while len(out) < n:
        a, b = rng.choice(len(train_idx), size=2, replace=True)
        if chars[a] != chars[b]:
            out.append((int(train_idx[a]), int(train_idx[b])))
    return out


def write_history(rows: list[dict], path: Path, fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def train_retarget(manifest: DatasetManifest, config: TrainConfig, out_dir: str | Path,
                   generator_config: GeneratorConfig | None = None,
                   resume_from: str | Path | None = None, data: RetargetData | None = None):
    """Train the generator; returns (final checkpoint path, loss history rows).

    Writes ``generator.ckpt``, ``loss_history.csv`` and periodic
    ``checkpoints/step_XXXXXX.ckpt`` files (each resumable) into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or RetargetData(manifest)
    train_idx = data.indices("train")
    if len(train_idx) == 0:
        raise ValueError("manifest has no training sequences")
    chars = np.array([data.entries[i].character_id for i in train_idx])
    if len(set(chars)) < 2:
        raise ValueError("training split needs at least two characters")

    torch.manual_seed(config.seed)
    model = GeneratorModel(generator_config or GeneratorConfig())
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed + 1)
    history: list[dict] = []
    start = 0
    if resume_from is not None:
        model, payload = load_generator(resume_from, model.config)
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2))
        extra = payload["extra"]
        opt.load_state_dict(extra["optimizer"])
        rng.bit_generator.state = extra["rng"]
        torch_gen.set_state(extra["torch_rng"])
        history = list(extra["history"])
        start = extra["step"]

    def checkpoint(path, step):
        return save_generator(model, path, config.seed, extra={
            "step": step, "optimizer": opt.state_dict(), "rng": rng.bit_generator.state,
            "torch_rng": torch_gen.get_state(), "history": history, "train_config": asdict(config)})

    for step in range(start, config.steps):
        batch = data.batch(_sample_pairs(rng, train_idx, chars, config.batch_size))
        while True:
            try:
                loss, terms = reconstruction_loss(batch, model, step, return_dictionary=True)
                break
            except RankDeficientError as exc:
                log.warning("step %d: %s; re-randomizing row %d", step, exc, exc.row)
                model.dictionary.rerandomize_row(exc.row, torch_gen)
        # the dictionary used by this forward pass is the one produced by the previous update
        err = _check_orthogonality(terms["dictionary"], step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step == config.steps - 1:
            with torch.no_grad():
                err = max(err, _check_orthogonality(model.dictionary.orthogonalized(), step))
        history.append({"step": step, "L_self": terms["L_self"].item(), "L_target": terms["L_target"].item(),
                        "L_total": loss.item(), "ortho_error": err})
        if (step + 1) % config.checkpoint_interval == 0 and step + 1 < config.steps:
            checkpoint(out / "checkpoints" / f"step_{step + 1:06d}.ckpt", step + 1)
    final = checkpoint(out / "generator.ckpt", config.steps)
    write_history(history, out / "loss_history.csv", HISTORY_FIELDS)
    return final, history


@torch.no_grad()
def evaluate_retarget(data: RetargetData, model: GeneratorModel, split: str = "test",
                      max_pairs: int | None = None, seed: int = 0, batch_size: int = 256) -> dict:
    """Mean retarget MSE on cross-character pairs of ``split``, with the copy-source baseline.

    The baseline predicts the cross target by copying the motion-source sequence unchanged.
    """
    pairs = data.pairs(split)
    if not pairs:
        raise ValueError(f"split {split!r} has no cross-character pairs")
    if max_pairs is not None and len(pairs) > max_pairs:
        pick = np.random.default_rng(seed).choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(pick)]
    dtype = model.dtype
    se_model = se_copy = 0.0
    count = 0
    for i in range(0, len(pairs), batch_size):
        b = data.batch(pairs[i:i + batch_size])
        x = torch.cat([b.p_mc, b.p_m2c2]).to(dtype)
        r_m, r_c, _ = model.split(x)
        n = b.p_mc.shape[0]
        y = model.decode(torch.cat([r_m[:n] + r_c[n:], r_m[n:] + r_c[:n]])).double()
        target = torch.cat([b.target_mc2, b.target_m2c]).double()
        source = torch.cat([b.p_mc, b.p_m2c2]).double()
        per = y[0].numel()
        se_model += float(((y - target) ** 2).sum()) / per
        se_copy += float(((source - target) ** 2).sum()) / per
        count += 2 * n
    return {"mse": se_model / count, "baseline_mse": se_copy / count, "num_pairs": len(pairs)}
