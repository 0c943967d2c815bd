"""Policy and dataset (de)serialization on top of the container format."""

from __future__ import annotations

import numpy as np

from .action_space import ActionTokenSeq, ActionVocabulary
from .container import ContainerError, ContainerModel, DType, KVType, MetadataValue, Tensor
from .policy import DEFAULT_INSTRUCTIONS, DecodeConfig, GoalInstruction, LoraAdapter, Observation, PolicyParams
from .quantizer import BLOCK_SIZE, QUANTIZED_FIELDS, quantize_tensor

ARCH = "litevla-toy-mlp"

REQUIRED_POLICY_KEYS = (
    "litevla.vocab.v_bins",
    "litevla.vocab.w_bins",
    "litevla.vocab.v_min",
    "litevla.vocab.v_max",
    "litevla.vocab.w_min",
    "litevla.vocab.w_max",
    "litevla.decode.max_tokens",
    "litevla.backend.n_ctx",
    "litevla.backend.layers",
)

# tensor name <-> PolicyParams attribute
_TENSORS = {
    "policy.goal_embedding": "goal_embedding",
    "policy.w1": "W1",
    "policy.b1": "b1",
    "policy.w2": "W2",
    "policy.b2": "b2",
    "policy.prev_token_embedding": "prev_token_embedding",
}


def _u32(v) -> MetadataValue:
    return MetadataValue(KVType.UINT32, v)


def _f32(v) -> MetadataValue:
    return MetadataValue(KVType.FLOAT32, v)


def vocab_metadata(vocab: ActionVocabulary) -> dict[str, MetadataValue]:
    return {
        "litevla.vocab.v_bins": _u32(vocab.v_bin_count),
        "litevla.vocab.w_bins": _u32(vocab.w_bin_count),
        "litevla.vocab.v_min": _f32(vocab.v_range[0]),
        "litevla.vocab.v_max": _f32(vocab.v_range[1]),
        "litevla.vocab.w_min": _f32(vocab.w_range[0]),
        "litevla.vocab.w_max": _f32(vocab.w_range[1]),
    }


def vocab_from_metadata(model: ContainerModel) -> ActionVocabulary:
    v = model.value
    return ActionVocabulary(
        v("litevla.vocab.v_bins"),
        v("litevla.vocab.w_bins"),
        (v("litevla.vocab.v_min"), v("litevla.vocab.v_max")),
        (v("litevla.vocab.w_min"), v("litevla.vocab.w_max")),
    )


def policy_to_model(
    params: PolicyParams,
    vocab: ActionVocabulary,
    decode: DecodeConfig = DecodeConfig(),
    quantized: bool = False,
    extra: dict | None = None,
) -> ContainerModel:
    """Container for a policy.

    With ``quantized=True`` any adapter is merged and the block-aligned
    weight tables are stored as Q4B32; biases and unaligned tables stay F32.
    Otherwise everything (including a LoRA adapter) is stored F32.
    """
    if params.vocab_size != vocab.size:
        raise ValueError("policy output size does not match the vocabulary")
    src = params.merged() if quantized else params
    meta: dict[str, MetadataValue] = {
        "general.architecture": MetadataValue(KVType.STRING, ARCH),
        "general.alignment": _u32(32),
        **vocab_metadata(vocab),
        "litevla.decode.max_tokens": _u32(decode.max_tokens),
        "litevla.decode.temperature": _f32(decode.temperature),
        "litevla.backend.n_ctx": _u32(decode.context_budget),
        "litevla.backend.layers": _u32(42),
        "litevla.image.height": _u32(params.image_shape[0]),
        "litevla.image.width": _u32(params.image_shape[1]),
        "litevla.goals": MetadataValue(KVType.STRING, "\n".join(DEFAULT_INSTRUCTIONS[: params.num_goals])),
        "litevla.quantized": MetadataValue(KVType.BOOL, quantized),
    }
    if quantized:
        meta["litevla.quant.codec"] = MetadataValue(KVType.STRING, "Q4B32")
    tensors = []
    for tname, attr in _TENSORS.items():
        arr = getattr(src, attr)
        if quantized and attr in QUANTIZED_FIELDS and arr.size % BLOCK_SIZE == 0:
            tensors.append(Tensor(tname, quantize_tensor(arr)))
        else:
            tensors.append(Tensor(tname, arr.astype(np.float32)))
    if src.lora is not None:
        meta["litevla.lora.rank"] = _u32(src.lora.rank)
        meta["litevla.lora.alpha"] = _f32(src.lora.alpha)
        tensors.append(Tensor("policy.lora.a", src.lora.A.astype(np.float32)))
        tensors.append(Tensor("policy.lora.b", src.lora.B.astype(np.float32)))
    for k, v in (extra or {}).items():
        meta[k] = MetadataValue.infer(v)
    return ContainerModel(meta, tensors)


def policy_from_model(model: ContainerModel) -> tuple[PolicyParams, ActionVocabulary, DecodeConfig]:
    missing = [k for k in REQUIRED_POLICY_KEYS if k not in model.metadata]
    if missing:
        raise ContainerError(f"policy container lacks metadata {missing}")
    arrays = {attr: model.tensor(tname).array() for tname, attr in _TENSORS.items()}
    lora = None
    if "litevla.lora.rank" in model.metadata:
        lora = LoraAdapter(
            model.tensor("policy.lora.a").array(),
            model.tensor("policy.lora.b").array(),
            model.value("litevla.lora.alpha"),
        )
    params = PolicyParams(
        **arrays,
        image_shape=(model.value("litevla.image.height"), model.value("litevla.image.width")),
        lora=lora,
    )
    decode = DecodeConfig(
        max_tokens=model.value("litevla.decode.max_tokens"),
        context_budget=model.value("litevla.backend.n_ctx"),
    )
    return params.freeze(), vocab_from_metadata(model), decode


# --- datasets ----------------------------------------------------------------


def dataset_to_model(dataset, vocab: ActionVocabulary, extra: dict | None = None) -> ContainerModel:
    images = np.asarray([obs.image for obs, _ in dataset], dtype=np.float32)
    goals = np.asarray([obs.goal.goal_id for obs, _ in dataset], dtype=np.float32)
    tokens = np.asarray([list(seq) for _, seq in dataset], dtype=np.float32)
    meta = {
        "general.architecture": MetadataValue(KVType.STRING, "litevla-dataset"),
        "litevla.dataset.count": MetadataValue(KVType.UINT64, len(dataset)),
        **vocab_metadata(vocab),
    }
    for k, v in (extra or {}).items():
        meta[k] = MetadataValue.infer(v)
    return ContainerModel(
        meta,
        [
            Tensor("dataset.images", images),
            Tensor("dataset.goal_ids", goals),
            Tensor("dataset.tokens", tokens),
        ],
    )


def dataset_from_model(model: ContainerModel):
    n = model.value("litevla.dataset.count")
    images = model.tensor("dataset.images").array()
    goals = model.tensor("dataset.goal_ids").array().astype(int)
    tokens = model.tensor("dataset.tokens").array().astype(int)
    if not (len(images) == len(goals) == len(tokens) == n):
        raise ContainerError("dataset tensors disagree with litevla.dataset.count")
    return [
        (Observation(img, GoalInstruction(DEFAULT_INSTRUCTIONS[g], int(g))), ActionTokenSeq(tok))
        for img, g, tok in zip(images, goals, tokens)
    ], vocab_from_metadata(model)
