import json
import math

import numpy as np
import pytest

from litevla.action_space import ActionTokenSeq, ActionVocabulary, encode_command
from litevla.policy import (
    DecodeConfig,
    FrozenParamsError,
    GoalInstruction,
    LoraAdapter,
    Observation,
    PolicyParams,
    TrainConfig,
    forward,
    grad_nll,
    greedy_decode,
    greedy_decode_many,
    nll_loss,
    train_sft,
)
from litevla.sim import Target, WorldState, expert_policy, render_observation

from conftest import FIXTURES

SMALL_VOCAB = ActionVocabulary(8, 8)


def goal(i):
    return GoalInstruction(f"goal {i}", i)


def random_batch(rng, n, shape=(4, 4), vocab=SMALL_VOCAB, num_goals=3):
    out = []
    for _ in range(n):
        obs = Observation(rng.uniform(0, 1, (*shape, 3)), goal(int(rng.integers(num_goals))))
        out.append((obs, ActionTokenSeq([int(rng.integers(vocab.v_bin_count)), int(rng.integers(vocab.w_bin_count))])))
    return out


def small_params(seed, lora=False):
    p = PolicyParams.init(vocab_size=16, image_shape=(4, 4), d_g=4, d_tok=4, d_h=8, seed=seed, scale=1.5)
    if lora:
        p = p.with_lora(rank=3, alpha=5.0, seed=seed)
        rng = np.random.default_rng(seed + 99)
        p.lora.B = rng.normal(0, 0.5, p.lora.B.shape)
    return p


def numeric_grad(params, batch, name, h=1e-5):
    arr = params.arrays()[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = nll_loss(params, batch, SMALL_VOCAB)
        arr[idx] = orig - h
        down = nll_loss(params, batch, SMALL_VOCAB)
        arr[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


def max_rel_error(a, b, floor=1e-7):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def test_zero_params_uniform():
    p = PolicyParams.zeros()
    obs = Observation(np.zeros((16, 16, 3)), goal(0))
    probs = forward(p, obs)
    assert probs.shape == (64,)
    assert np.all(probs == 1 / 64)


def test_forward_normalized():
    rng = np.random.default_rng(3)
    for seed in range(20):
        p = PolicyParams.init(seed=seed, scale=3.0)
        obs = Observation(rng.uniform(0, 1, (16, 16, 3)), goal(seed % 3))
        for prefix in ([], [int(rng.integers(32))]):
            probs = forward(p, obs, prefix)
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1) < 1e-9


def test_forward_dimension_mismatch():
    p = PolicyParams.init()
    with pytest.raises(ValueError):
        forward(p, Observation(np.zeros((8, 8, 3)), goal(0)))


def test_uniform_nll():
    batch = random_batch(np.random.default_rng(0), 5, shape=(16, 16), vocab=ActionVocabulary())
    assert abs(nll_loss(PolicyParams.zeros(), batch) - 2 * math.log(64)) < 1e-9


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        nll_loss(PolicyParams.zeros(), [])


def test_loss_decreases_with_saturating_logits():
    obs = Observation(np.zeros((16, 16, 3)), goal(1))
    batch = [(obs, ActionTokenSeq([3, 5]))]
    losses = []
    for scale in (1, 10, 100):
        p = PolicyParams.zeros()
        b2 = np.zeros(64)
        b2[3] = b2[32 + 5] = scale
        p.b2 = b2
        losses.append(nll_loss(p, batch))
    assert losses[0] > losses[1] > losses[2] >= 0


@pytest.mark.parametrize("lora", [False, True])
def test_gradient_matches_finite_differences(lora):
    rng = np.random.default_rng(7 + lora)
    worst = 0.0
    for k in range(20):
        p = small_params(100 * lora + k, lora)
        batch = random_batch(rng, 3)
        analytic = grad_nll(p, batch, SMALL_VOCAB)
        assert set(analytic) == set(p.trainable_fields())
        for name, g in analytic.items():
            worst = max(worst, max_rel_error(g, numeric_grad(p, batch, name)))
    assert worst < 1e-4, worst


def test_absent_goal_gradient_zero():
    p = small_params(1)
    rng = np.random.default_rng(1)
    batch = [(Observation(rng.uniform(0, 1, (4, 4, 3)), goal(0)), ActionTokenSeq([1, 2]))]
    g = grad_nll(p, batch, SMALL_VOCAB)["goal_embedding"]
    assert np.any(g[0] != 0)
    assert np.all(g[1:] == 0)


def test_gradient_sign_on_1d_slice():
    p = small_params(4)
    batch = random_batch(np.random.default_rng(4), 3)
    base = p.b2[2]
    ts = np.linspace(-3, 3, 61)
    losses = []
    for t in ts:
        p.b2[2] = base + t
        losses.append(nll_loss(p, batch, SMALL_VOCAB))
    i_min = int(np.argmin(losses))
    for i in (max(i_min - 5, 0), min(i_min + 5, len(ts) - 1)):
        p.b2[2] = base + ts[i]
        slope = np.sign(losses[min(i + 1, 60)] - losses[max(i - 1, 0)])
        if slope:
            assert np.sign(grad_nll(p, batch, SMALL_VOCAB)["b2"][2]) == slope


def test_lora_zero_b_identity():
    p = PolicyParams.init(seed=2)
    q = p.with_lora(8, 8.0, seed=5)
    assert np.all(q.lora.B == 0)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 4, shape=(16, 16), vocab=ActionVocabulary())
    for obs, _ in batch:
        assert np.array_equal(forward(p, obs), forward(q, obs))
        assert np.array_equal(forward(p, obs, [5]), forward(q, obs, [5]))
        assert list(greedy_decode(p, obs)) == list(greedy_decode(q, obs))
    assert nll_loss(p, batch) == nll_loss(q, batch)


def test_lora_rank_alpha_scaling():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(4, 30)), rng.normal(size=(6, 4))
    one = LoraAdapter(A, B, alpha=8.0)
    two = LoraAdapter(np.vstack([A, np.zeros_like(A)]), np.hstack([B, np.zeros_like(B)]), alpha=16.0)
    assert two.rank == 8
    np.testing.assert_allclose(two.delta(), one.delta(), rtol=1e-13, atol=0)


def test_lora_training_freezes_base():
    rng = np.random.default_rng(0)
    p = small_params(3).with_lora(2, 2.0, seed=1)
    batch = random_batch(rng, 10)
    res = train_sft(p, batch, TrainConfig(0.1, 20, 4, 0), SMALL_VOCAB)
    assert np.array_equal(res.params.W1, p.W1)
    assert np.array_equal(res.params.W2, p.W2)
    assert not np.array_equal(res.params.lora.B, p.lora.B)
    assert res.loss_curve[-1] < res.loss_curve[0]


def test_train_sft_small_dataset_golden():
    rng = np.random.default_rng(11)
    batch = random_batch(rng, 10)
    p = small_params(11)
    res = train_sft(p, batch, TrainConfig(learning_rate=0.5, epochs=200, batch_size=10, seed=0, weight_decay=0.0), SMALL_VOCAB)
    curve = res.loss_curve
    assert curve[-1] < 0.1 * curve[0]
    golden = json.loads((FIXTURES / "train_curve_small.json").read_text())
    np.testing.assert_allclose(curve[:: 20], golden["every_20th_epoch"], rtol=1e-6)


def test_train_zero_epochs_noop():
    batch = random_batch(np.random.default_rng(0), 4)
    p = small_params(0)
    res = train_sft(p, batch, TrainConfig(epochs=0), SMALL_VOCAB)
    assert res.loss_curve == [nll_loss(p, batch, SMALL_VOCAB)]
    for name, arr in p.arrays().items():
        assert np.array_equal(res.params.arrays()[name], arr)


def test_train_deterministic():
    batch = random_batch(np.random.default_rng(0), 12)
    cfg = TrainConfig(0.2, 5, 4, seed=9)
    a = train_sft(small_params(0), batch, cfg, SMALL_VOCAB).params
    b = train_sft(small_params(0), batch, cfg, SMALL_VOCAB).params
    for name in a.arrays():
        assert a.arrays()[name].tobytes() == b.arrays()[name].tobytes()


def test_frozen_params_immutable():
    p = PolicyParams.init().freeze()
    with pytest.raises(FrozenParamsError):
        p.update("b1", np.zeros(32))
    with pytest.raises(ValueError):
        p.W1[0, 0] = 1.0


def test_uniform_decodes_lowest_ids():
    obs = Observation(np.zeros((16, 16, 3)), goal(0))
    assert list(greedy_decode(PolicyParams.zeros(), obs)) == [0, 0]


def test_dominant_logit_wins():
    obs = Observation(np.zeros((16, 16, 3)), goal(0))
    for margin in (1e-9, 1e3):
        p = PolicyParams.zeros()
        b2 = np.zeros(64)
        b2[7] = margin
        b2[32 + 20] = margin
        p.b2 = b2
        assert list(greedy_decode(p, obs)) == [7, 20]


def test_decode_batched_matches_single():
    p = PolicyParams.init(seed=3, scale=2.0)
    rng = np.random.default_rng(5)
    obs = [Observation(rng.uniform(0, 1, (16, 16, 3)), goal(i % 3)) for i in range(30)]
    many = greedy_decode_many(p, obs)
    assert [list(greedy_decode(p, o)) for o in obs] == many.tolist()


def test_decode_config_contract():
    with pytest.raises(ValueError):
        DecodeConfig(temperature=0.7)
    assert DecodeConfig().max_tokens == 12 and DecodeConfig().context_budget == 512


def test_observation_range_checked():
    with pytest.raises(ValueError):
        Observation(np.full((16, 16, 3), 1.5), goal(0))


def test_trained_policy_dead_ahead(trained):
    vocab = ActionVocabulary()
    for color in range(3):
        targets = [Target(1.0, 0.0, color)]
        world = WorldState(0.0, 0.0, 0.0, targets, 0)
        obs = render_observation(world)
        w_expert = encode_command(expert_policy(world), vocab)[1]
        w_policy = greedy_decode(trained["fp"], obs)[1]
        assert abs(w_policy - w_expert) <= 1
