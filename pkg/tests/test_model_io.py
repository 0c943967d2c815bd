import numpy as np
import pytest

from litevla.action_space import ActionVocabulary
from litevla.container import ContainerError, DType, from_bytes, to_bytes
from litevla.model_io import (
    REQUIRED_POLICY_KEYS,
    dataset_from_model,
    dataset_to_model,
    policy_from_model,
    policy_to_model,
)
from litevla.policy import DecodeConfig, PolicyParams, greedy_decode_many
from litevla.quantizer import quantize_policy
from litevla.sim import collect_dataset, random_world, render_observation


def lora_params():
    p = PolicyParams.init(seed=3).with_lora(8, 8.0, seed=1)
    p.lora.B = np.random.default_rng(0).normal(0, 0.05, p.lora.B.shape)
    return p.freeze()


def test_fp_policy_round_trip_exact_in_f32():
    p = lora_params()
    model = policy_to_model(p, ActionVocabulary())
    assert all(k in model.metadata for k in REQUIRED_POLICY_KEYS)
    assert model.value("litevla.backend.layers") == 42 and model.value("litevla.backend.n_ctx") == 512
    back, vocab, decode = policy_from_model(from_bytes(to_bytes(model)))
    assert vocab == ActionVocabulary() and decode == DecodeConfig()
    for name, arr in p.arrays().items():
        np.testing.assert_array_equal(back.arrays()[name], arr.astype(np.float32))


def test_quantized_container_matches_quantize_policy():
    p = lora_params()
    model = policy_to_model(p, ActionVocabulary(), quantized=True)
    dtypes = {t.name: t.dtype for t in model.tensors}
    assert dtypes["policy.w1"] == dtypes["policy.w2"] == DType.Q4B32
    assert dtypes["policy.b1"] == dtypes["policy.goal_embedding"] == DType.F32
    assert "policy.lora.a" not in dtypes
    loaded, _, _ = policy_from_model(from_bytes(to_bytes(model)))
    q, _ = quantize_policy(p)
    obs = [render_observation(random_world(i)) for i in range(200)]
    assert np.array_equal(greedy_decode_many(loaded, obs), greedy_decode_many(q, obs))


def test_missing_metadata_rejected():
    model = policy_to_model(PolicyParams.init(), ActionVocabulary())
    del model.metadata["litevla.backend.layers"]
    with pytest.raises(ContainerError, match="litevla.backend.layers"):
        policy_from_model(model)


def test_dataset_round_trip():
    data = collect_dataset(2, seed=0)
    back, vocab = dataset_from_model(from_bytes(to_bytes(dataset_to_model(data, ActionVocabulary()))))
    assert vocab == ActionVocabulary() and len(back) == len(data)
    for (o1, s1), (o2, s2) in zip(data, back):
        assert list(s1) == list(s2) and o1.goal.goal_id == o2.goal.goal_id
        np.testing.assert_array_equal(o2.image, o1.image.astype(np.float32))
