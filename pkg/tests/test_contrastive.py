import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lac.checkpoint import load_checkpoint
from lac.contrastive import (
    HISTORY_FIELDS,
    ContrastiveConfig,
    ContrastiveModel,
    DegenerateEmbeddingError,
    NegativeQueue,
    ProjectionHead,
    fixed_negative_losses,
    info_nce_frame,
    info_nce_sequence,
    load_pretraining_clips,
    make_query_and_keys,
    momentum_update,
    pretrain,
    similarity,
)
from lac.encoder import EncoderConfig, load_encoder
from lac.generator import GeneratorConfig, GeneratorModel, save_generator
from lac.synth import TrimmedDataConfig, build_trimmed_dataset

import oracles
from conftest import random_sequence

TINY_GEN = GeneratorConfig(enc_channels=(8, 8, 8), dec_channels=(8, 8), J=6, K=2)
NARROW = EncoderConfig(channels=(8, 16, 16), blocks=(1, 1, 1))


def fast_config(**kw):
    base = dict(steps=6, batch_size=6, queries_per_step=2, num_positives=2, queue_size=16,
                proj_dim=8, checkpoint_interval=3, sample_rate=4)
    base.update(kw)
    return ContrastiveConfig(**base)


@pytest.fixture(scope="module")
def generator_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    return save_generator(GeneratorModel(TINY_GEN), tmp_path_factory.mktemp("gen") / "generator.ckpt", seed=0)


@pytest.fixture(scope="module")
def trimmed(tmp_path_factory):
    cfg = TrimmedDataConfig(num_sequences=12, T=16, num_characters=4)
    return build_trimmed_dataset(cfg, tmp_path_factory.mktemp("trimmed"))


# ---------------------------------------------------------------- similarity

def test_similarity_examples():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert similarity(x, 2 * x, temp=0.07).item() == pytest.approx(1 / 0.07, abs=1e-6)
    assert similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0
    assert similarity(x, -x, temp=0.07).item() == pytest.approx(-1 / 0.07, abs=1e-6)


def test_similarity_zero_vector_is_an_error():
    with pytest.raises(DegenerateEmbeddingError, match="degenerate embedding"):
        similarity(torch.zeros(3), torch.ones(3))


def test_similarity_uses_head():
    torch.manual_seed(0)
    head = ProjectionHead(4, 4, 3)
    x, y = torch.randn(4), torch.randn(4)
    expected = oracles.cosine(head(x).tolist(), head(y).tolist()) / 0.5
    assert similarity(x, y, head=head, temp=0.5).item() == pytest.approx(expected, abs=1e-5)


# ---------------------------------------------------------------- InfoNCE

def test_sequence_loss_is_zero_when_positive_equals_negative():
    q = torch.tensor([1.0, 0.0])
    k = torch.tensor([[0.6, 0.8]])
    assert info_nce_sequence(q, k, k.clone()).item() == pytest.approx(0.0, abs=1e-6)


def test_sequence_loss_hand_example():
    # s(q, k+) = 1 / 0.5 = 2 and s(q, k-) = 0, so the loss is -log(e^2 / e^0) = -2
    q = torch.tensor([1.0, 0.0])
    loss = info_nce_sequence(q, torch.tensor([[3.0, 0.0]]), torch.tensor([[0.0, 1.0]]), temp=0.5)
    assert loss.item() == pytest.approx(-2.0, abs=1e-6)


def test_usual_denominator_is_nonnegative():
    q = torch.tensor([1.0, 0.0])
    loss = info_nce_sequence(q, torch.tensor([[3.0, 0.0]]), torch.tensor([[0.0, 1.0]]), temp=0.5,
                             positives_in_denominator=True)
    assert loss.item() == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-6)


@given(seed=st.integers(0, 10_000), P=st.integers(1, 4), N=st.integers(1, 6), D=st.integers(2, 5),
       with_pos=st.booleans())
def test_sequence_loss_matches_oracle(seed, P, N, D, with_pos):
    g = torch.Generator().manual_seed(seed)
    q, pos, queue = (torch.randn(*s, generator=g, dtype=torch.float64) for s in [(D,), (P, D), (N, D)])
    got = info_nce_sequence(q, pos, queue, temp=0.3, positives_in_denominator=with_pos).item()
    want = oracles.nce_sequence(q.tolist(), pos.tolist(), queue.tolist(), 0.3, with_pos)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(seed=st.integers(0, 10_000), P=st.integers(1, 3), N=st.integers(1, 4), T=st.integers(1, 4),
       D=st.integers(2, 4), with_pos=st.booleans())
def test_frame_loss_matches_oracle(seed, P, N, T, D, with_pos):
    g = torch.Generator().manual_seed(seed)
    q, pos, queue = (torch.randn(*s, generator=g, dtype=torch.float64) for s in [(T, D), (P, T, D), (N, T, D)])
    got = info_nce_frame(q, pos, queue, temp=0.3, positives_in_denominator=with_pos).item()
    want = oracles.nce_frame(q.tolist(), pos.tolist(), queue.tolist(), 0.3, with_pos)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(seed=st.integers(0, 10_000))
def test_single_frame_reduces_to_sequence_loss(seed):
    g = torch.Generator().manual_seed(seed)
    q, pos, queue = torch.randn(3, generator=g), torch.randn(2, 3, generator=g), torch.randn(4, 3, generator=g)
    seq = info_nce_sequence(q, pos, queue)
    frame = info_nce_frame(q[None], pos[:, None], queue[:, None])
    assert frame.item() == pytest.approx(seq.item(), rel=1e-5)


def test_frame_loss_with_constant_similarities():
    # every per-frame similarity equals s+ (positive) or s- (negative): loss = -T_s (s+ - s-)
    T_s, temp = 5, 0.5
    q = torch.tensor([[1.0, 0.0]]).repeat(T_s, 1)
    pos = torch.tensor([[[0.6, 0.8]]]).repeat(1, T_s, 1)
    neg = torch.tensor([[[0.0, 1.0]]]).repeat(1, T_s, 1)
    s_pos, s_neg = 0.6 / temp, 0.0
    assert info_nce_frame(q, pos, neg, temp=temp).item() == pytest.approx(-T_s * (s_pos - s_neg), abs=1e-5)


def test_empty_queue_is_an_error():
    with pytest.raises(ValueError, match="empty queue"):
        info_nce_sequence(torch.ones(2), torch.ones(1, 2), torch.zeros(0, 2))
    with pytest.raises(ValueError, match="empty queue"):
        info_nce_frame(torch.ones(3, 2), torch.ones(1, 3, 2), torch.zeros(0, 3, 2))


def test_frame_count_mismatch_is_an_error():
    with pytest.raises(ValueError, match="T_s mismatch"):
        info_nce_frame(torch.ones(3, 2), torch.ones(1, 4, 2), torch.ones(2, 3, 2))


def test_queue_receives_no_gradient():
    q = torch.randn(3, requires_grad=True)
    queue = torch.randn(4, 3, requires_grad=True)
    info_nce_sequence(q, torch.randn(2, 3), queue.detach()).backward()
    assert q.grad is not None and queue.grad is None


# ---------------------------------------------------------------- momentum update

@pytest.mark.parametrize("m, expected", [(1.0, 5.0), (0.0, 1.0), (0.5, 3.0)])
def test_momentum_examples(m, expected):
    q, k = torch.tensor([1.0]), torch.tensor([5.0])
    momentum_update([q], [k], m)
    assert k.item() == expected and q.item() == 1.0


@given(m=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_momentum_is_a_convex_combination(m, seed):
    g = torch.Generator().manual_seed(seed)
    q, k = torch.randn(6, generator=g, dtype=torch.float64), torch.randn(6, generator=g, dtype=torch.float64)
    k0 = k.clone()
    momentum_update([q], [k], m)
    assert torch.allclose(k, m * k0 + (1 - m) * q, atol=1e-12)
    lo, hi = torch.minimum(q, k0), torch.maximum(q, k0)
    assert bool(((k >= lo - 1e-12) & (k <= hi + 1e-12)).all())


def test_momentum_rejects_bad_inputs():
    with pytest.raises(ValueError):
        momentum_update([torch.ones(1)], [torch.ones(1)], 1.5)
    with pytest.raises(ValueError, match="shape mismatch"):
        momentum_update([torch.ones(2)], [torch.ones(3)], 0.5)
    with pytest.raises(ValueError, match="length"):
        momentum_update([torch.ones(2)], [], 0.5)


# ---------------------------------------------------------------- negative queue

def test_queue_is_fifo_with_capacity():
    queue = NegativeQueue(capacity=3, dim=1, frames=1)
    for v in range(5):
        queue.enqueue(torch.tensor([[float(v)]]), torch.tensor([[[float(v)]]]))
    seq, frames = queue.entries()
    assert seq[:, 0].tolist() == [2.0, 3.0, 4.0] and frames[:, 0, 0].tolist() == [2.0, 3.0, 4.0]


@given(capacity=st.integers(1, 20), steps=st.integers(0, 10), per_step=st.integers(1, 5))
def test_queue_length(capacity, steps, per_step):
    queue = NegativeQueue(capacity, dim=2, frames=1)
    for _ in range(steps):
        queue.enqueue(torch.zeros(per_step, 2), torch.zeros(per_step, 1, 2))
    assert len(queue) == min(steps * per_step, capacity) == len(queue.entries()[0])


def test_queue_state_round_trip():
    queue = NegativeQueue(4, dim=2, frames=1)
    queue.enqueue(torch.randn(6, 2), torch.randn(6, 1, 2))
    other = NegativeQueue(4, dim=2, frames=1)
    other.load_state_dict(queue.state_dict())
    assert all(torch.equal(a, b) for a, b in zip(queue.entries(), other.entries()))
    assert len(other) == 4


# ---------------------------------------------------------------- query and key construction

def test_single_positive_with_the_query_static_matches_the_query(rng):
    torch.manual_seed(0)
    gen = GeneratorModel(TINY_GEN, dtype=torch.float64)
    a, b = random_sequence(16, 1), random_sequence(16, 2)
    batch = make_query_and_keys([a, b], gen, P=1, static_pool=[a], rng=rng)
    assert np.array_equal(batch.positives[0].frames, batch.query.frames)
    assert np.array_equal(batch.static_features[0], batch.static_features[1])


def test_positives_share_motion_and_differ_in_static(rng):
    torch.manual_seed(0)
    gen = GeneratorModel(TINY_GEN, dtype=torch.float64)
    seqs = [random_sequence(16, s) for s in range(6)]
    batch = make_query_and_keys(seqs[:2], gen, P=3, static_pool=seqs[2:], rng=rng)
    assert len(batch.positives) == 3 and batch.provenance == [0, 1]
    statics = batch.static_features
    assert all(not np.array_equal(statics[0], s) for s in statics[1:])
    assert len({s.tobytes() for s in statics[1:]}) == 3


def test_zero_positives_is_an_error(rng):
    gen = GeneratorModel(TINY_GEN)
    with pytest.raises(ValueError, match="P >= 1"):
        make_query_and_keys([random_sequence(16, 0), random_sequence(16, 1)], gen, 0, [random_sequence(16, 2)], rng)


def test_config_validation():
    with pytest.raises(ValueError, match="P\\+1"):
        ContrastiveConfig(batch_size=4, num_positives=4)
    with pytest.raises(ValueError, match="queries_per_step"):
        ContrastiveConfig(queries_per_step=1)


# ---------------------------------------------------------------- pretraining

def test_zero_steps_returns_the_initialization(trimmed, generator_ckpt, tmp_path):
    ckpt, history = pretrain(trimmed, generator_ckpt, fast_config(steps=0), tmp_path / "a", NARROW)
    torch.manual_seed(0)
    init = ContrastiveModel(NARROW, 8)
    model, _ = load_encoder(ckpt)
    assert history == []
    assert all(torch.equal(v, init.encoder.state_dict()[k]) for k, v in model.state_dict().items())


def test_pretraining_is_deterministic_and_logs(trimmed, generator_ckpt, tmp_path):
    a, hist = pretrain(trimmed, generator_ckpt, fast_config(), tmp_path / "a", NARROW)
    b, _ = pretrain(trimmed, generator_ckpt, fast_config(), tmp_path / "b", NARROW)
    assert a.read_bytes() == b.read_bytes()
    with open(tmp_path / "a" / "loss_history.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == HISTORY_FIELDS and len(rows) == 6
    assert [int(r["queue_len"]) for r in rows] == [min(4 * (i + 1), 16) for i in range(6)]
    for r in rows:
        assert float(r["L_total"]) == pytest.approx(float(r["L_qs"]) + float(r["L_qf"]), rel=1e-6)
    assert all(math.isfinite(h["L_total"]) for h in hist)


def test_sequence_only_objective(trimmed, generator_ckpt, tmp_path):
    _, hist = pretrain(trimmed, generator_ckpt, fast_config(steps=2, frame_level=False), tmp_path, NARROW)
    assert all(h["L_total"] == h["L_qs"] for h in hist)


def test_resume_matches_uninterrupted_run(trimmed, generator_ckpt, tmp_path):
    full, _ = pretrain(trimmed, generator_ckpt, fast_config(), tmp_path / "full", NARROW)
    mid = tmp_path / "full" / "checkpoints" / "step_000003.ckpt"
    resumed, _ = pretrain(trimmed, generator_ckpt, fast_config(), tmp_path / "resumed", NARROW, resume_from=mid)
    assert resumed.read_bytes() == full.read_bytes()


def test_key_encoder_tracks_online_encoder(trimmed, generator_ckpt, tmp_path):
    ckpt, _ = pretrain(trimmed, generator_ckpt, fast_config(momentum=0.0), tmp_path, NARROW)
    state = load_checkpoint(ckpt)["extra"]["contrastive_state"]
    for k, v in state.items():
        if k.startswith("encoder."):
            assert torch.equal(v, state["key_" + k])


def test_fixed_negative_losses_are_reproducible(trimmed, generator_ckpt, tmp_path):
    ckpt, _ = pretrain(trimmed, generator_ckpt, fast_config(steps=1), tmp_path, NARROW)
    clips = load_pretraining_clips(trimmed)
    a = fixed_negative_losses(ckpt, generator_ckpt, clips, rounds=2)
    b = fixed_negative_losses(ckpt, generator_ckpt, clips, rounds=2)
    assert a == b and all(math.isfinite(v) for v in a.values())
