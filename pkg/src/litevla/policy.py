"""Toy image-and-goal conditioned autoregressive policy.

The network is a two-layer tanh MLP over the concatenation
``[flattened image | goal embedding | previous-token embedding]`` with a
softmax over the full action vocabulary. Everything runs in float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .action_space import (
    DEFAULT_MAX_TOKENS,
    TOKENS_PER_COMMAND,
    ActionTokenSeq,
    ActionVocabulary,
)

log = logging.getLogger(__name__)

DEFAULT_INSTRUCTIONS = (
    "go to the red target",
    "go to the green target",
    "go to the blue target",
)


class FrozenParamsError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GoalInstruction:
    text: str
    goal_id: int

    def __post_init__(self):
        if not self.text:
            raise ValueError("instruction text must be nonempty")
        if self.goal_id < 0:
            raise ValueError("goal_id must be non-negative")


@dataclass(frozen=True, eq=False)
class Observation:
    image: np.ndarray
    goal: GoalInstruction

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {img.shape}")
        if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    context_budget: int = 512

    def __post_init__(self):
        if self.temperature != 0.0:
            raise ValueError("only deterministic decoding (temperature 0.0) is supported")
        if self.max_tokens < 1 or self.context_budget < 1:
            raise ValueError("max_tokens and context_budget must be positive")


class LoraAdapter:
    """Low-rank update on a ``d_in x d_out`` weight.

    ``A`` is ``rank x d_in`` and ``B`` is ``d_out x rank``; the weight delta in
    ``(d_out, d_in)`` orientation is ``(alpha / rank) * B @ A``. ``B`` starts
    at zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, alpha: float = 8.0):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1]:
            raise ValueError(f"incompatible LoRA factors {A.shape} and {B.shape}")
        if A.shape[0] < 1 or not alpha > 0:
            raise ValueError("rank and alpha must be positive")
        self.A = A
        self.B = B
        self.alpha = float(alpha)

    @classmethod
    def create(cls, d_in: int, d_out: int, rank: int = 8, alpha: float = 8.0, rng=None) -> "LoraAdapter":
        rng = np.random.default_rng(rng)
        A = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in))
        return cls(A, np.zeros((d_out, rank)), alpha)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Weight delta in ``(d_in, d_out)`` orientation (matches ``W1``)."""
        return self.scaling * (self.B @ self.A).T

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.A.copy(), self.B.copy(), self.alpha)


_BASE_FIELDS = ("goal_embedding", "W1", "b1", "W2", "b2", "prev_token_embedding")
# trainable when an adapter is attached; W1 and W2 are frozen base weights
_NO_DECAY = ("b1", "b2")
_ADAPTER_FIELDS = ("goal_embedding", "b1", "b2", "prev_token_embedding", "lora_A", "lora_B")


class PolicyParams:
    def __init__(
        self,
        goal_embedding: np.ndarray,
        W1: np.ndarray,
        b1: np.ndarray,
        W2: np.ndarray,
        b2: np.ndarray,
        prev_token_embedding: np.ndarray,
        image_shape: tuple[int, int] = (16, 16),
        lora: LoraAdapter | None = None,
    ):
        self.goal_embedding = np.asarray(goal_embedding, dtype=np.float64)
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.W2 = np.asarray(W2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.prev_token_embedding = np.asarray(prev_token_embedding, dtype=np.float64)
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.lora = lora
        self.frozen = False
        self._check()

    # --- shape bookkeeping -------------------------------------------------
    @property
    def image_dim(self) -> int:
        return self.image_shape[0] * self.image_shape[1] * 3

    @property
    def d_g(self) -> int:
        return self.goal_embedding.shape[1]

    @property
    def d_tok(self) -> int:
        return self.prev_token_embedding.shape[1]

    @property
    def d_h(self) -> int:
        return self.W1.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.W2.shape[1]

    @property
    def num_goals(self) -> int:
        return self.goal_embedding.shape[0]

    def _check(self) -> None:
        d_in = self.image_dim + self.d_g + self.d_tok
        expect = {
            "W1": (d_in, self.d_h),
            "b1": (self.d_h,),
            "W2": (self.d_h, self.vocab_size),
            "b2": (self.vocab_size,),
            "prev_token_embedding": (self.vocab_size + 1, self.d_tok),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.goal_embedding.ndim != 2:
            raise ValueError("goal_embedding must be 2-D")
        if self.lora is not None and (self.lora.A.shape[1], self.lora.B.shape[0]) != (d_in, self.d_h):
            raise ValueError("LoRA adapter does not match W1")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")

    # --- construction ------------------------------------------------------
    @classmethod
    def init(
        cls,
        vocab_size: int = 64,
        num_goals: int = len(DEFAULT_INSTRUCTIONS),
        image_shape: tuple[int, int] = (16, 16),
        d_g: int = 8,
        d_tok: int = 8,
        d_h: int = 32,
        seed: int = 0,
        scale: float = 1.0,
    ) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        d_in = image_shape[0] * image_shape[1] * 3 + d_g + d_tok
        return cls(
            goal_embedding=rng.normal(0.0, 1.0, (num_goals, d_g)) * scale,
            W1=rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_h)) * scale,
            b1=np.zeros(d_h),
            W2=rng.normal(0.0, 1.0 / math.sqrt(d_h), (d_h, vocab_size)) * scale,
            b2=np.zeros(vocab_size),
            prev_token_embedding=rng.normal(0.0, 1.0, (vocab_size + 1, d_tok)) * scale,
            image_shape=image_shape,
        )

    @classmethod
    def zeros(cls, vocab_size=64, num_goals=3, image_shape=(16, 16), d_g=8, d_tok=8, d_h=32) -> "PolicyParams":
        d_in = image_shape[0] * image_shape[1] * 3 + d_g + d_tok
        return cls(
            np.zeros((num_goals, d_g)),
            np.zeros((d_in, d_h)),
            np.zeros(d_h),
            np.zeros((d_h, vocab_size)),
            np.zeros(vocab_size),
            np.zeros((vocab_size + 1, d_tok)),
            image_shape=image_shape,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in _BASE_FIELDS}
        if self.lora is not None:
            out["lora_A"] = self.lora.A
            out["lora_B"] = self.lora.B
        return out

    def trainable_fields(self) -> tuple[str, ...]:
        return _ADAPTER_FIELDS if self.lora is not None else _BASE_FIELDS

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.goal_embedding.copy(),
            self.W1.copy(),
            self.b1.copy(),
            self.W2.copy(),
            self.b2.copy(),
            self.prev_token_embedding.copy(),
            image_shape=self.image_shape,
            lora=self.lora.copy() if self.lora is not None else None,
        )

    def with_lora(self, rank: int = 8, alpha: float = 8.0, seed: int = 0) -> "PolicyParams":
        """Copy of these params with a freshly created adapter on ``W1``."""
        out = self.copy()
        out.lora = LoraAdapter.create(self.W1.shape[0], self.d_h, rank, alpha, rng=seed)
        return out

    def merged(self) -> "PolicyParams":
        """Copy with the adapter folded into ``W1``."""
        out = self.copy()
        if out.lora is not None:
            out.W1 = out.W1 + out.lora.delta()
            out.lora = None
        return out

    def freeze(self) -> "PolicyParams":
        for arr in self.arrays().values():
            arr.setflags(write=False)
        self.frozen = True
        return self

    def effective_W1(self) -> np.ndarray:
        if self.lora is None:
            return self.W1
        return self.W1 + self.lora.delta()

    def update(self, name: str, value: np.ndarray) -> None:
        if self.frozen:
            raise FrozenParamsError("parameters are frozen")
        if name == "lora_A":
            self.lora.A = value
        elif name == "lora_B":
            self.lora.B = value
        else:
            setattr(self, name, value)


# --- forward pass ------------------------------------------------------------


def _features(params: PolicyParams, images: np.ndarray, goal_ids: np.ndarray, prev_ids: np.ndarray) -> np.ndarray:
    """Row-stacked network inputs; ``prev_ids`` index the prev-token table (0 = begin)."""
    n = images.shape[0]
    flat = images.reshape(n, -1)
    if flat.shape[1] != params.image_dim:
        raise ValueError(f"image has {flat.shape[1]} values, params expect {params.image_dim}")
    if np.any(goal_ids < 0) or np.any(goal_ids >= params.num_goals):
        raise ValueError("goal_id outside the instruction set")
    return np.concatenate([flat, params.goal_embedding[goal_ids], params.prev_token_embedding[prev_ids]], axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_rows(params: PolicyParams, x: np.ndarray):
    h = np.tanh(x @ params.effective_W1() + params.b1)
    logits = h @ params.W2 + params.b2
    return h, logits


def _prev_index(prefix: Sequence[int], vocab: ActionVocabulary) -> int:
    if not prefix:
        return 0
    pos = len(prefix) - 1
    return vocab.global_id(pos, prefix[-1]) + 1


def forward(
    params: PolicyParams,
    obs: Observation,
    prefix: ActionTokenSeq | Sequence[int] = (),
    vocab: ActionVocabulary | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> np.ndarray:
    """Probability vector over the action vocabulary for the next token."""
    return _softmax(_next_logits(params, obs, prefix, vocab or _vocab_for(params), max_tokens))


def _next_logits(params, obs, prefix, vocab, max_tokens) -> np.ndarray:
    prefix = list(prefix)
    if len(prefix) >= max_tokens:
        raise ValueError(f"prefix length {len(prefix)} must be < max_tokens={max_tokens}")
    if obs.image.shape[:2] != params.image_shape:
        raise ValueError(f"image shape {obs.image.shape[:2]} != configured {params.image_shape}")
    x = _features(
        params,
        obs.image[None],
        np.array([obs.goal.goal_id]),
        np.array([_prev_index(prefix, vocab)]),
    )
    return _forward_rows(params, x)[1][0]


def _vocab_for(params: PolicyParams) -> ActionVocabulary:
    half = params.vocab_size // 2
    return ActionVocabulary(v_bin_count=half, w_bin_count=params.vocab_size - half)


# --- loss and gradient ---------------------------------------------------------


@dataclass
class _Batch:
    images: np.ndarray  # (rows, H, W, 3)
    goal_ids: np.ndarray
    prev_ids: np.ndarray
    targets: np.ndarray  # global ids
    n_samples: int

    def select(self, rows: np.ndarray, n_samples: int) -> "_Batch":
        return _Batch(self.images[rows], self.goal_ids[rows], self.prev_ids[rows], self.targets[rows], n_samples)


def _rows_by_sample(dataset) -> list[np.ndarray]:
    rows, start = [], 0
    for _, seq in dataset:
        rows.append(np.arange(start, start + len(seq)))
        start += len(seq)
    return rows


def _stack_batch(batch, vocab: ActionVocabulary) -> _Batch:
    batch = list(batch)
    if not batch:
        raise ValueError("batch must be nonempty")
    images, goals, prevs, targets = [], [], [], []
    for obs, seq in batch:
        toks = list(seq)
        for pos, tok in enumerate(toks):
            if not 0 <= tok < vocab.bins_at(pos) or pos >= TOKENS_PER_COMMAND:
                raise ValueError(f"target token {tok} invalid at position {pos}")
            images.append(obs.image)
            goals.append(obs.goal.goal_id)
            prevs.append(_prev_index(toks[:pos], vocab))
            targets.append(vocab.global_id(pos, tok))
    return _Batch(
        np.asarray(images),
        np.asarray(goals, dtype=np.intp),
        np.asarray(prevs, dtype=np.intp),
        np.asarray(targets, dtype=np.intp),
        len(batch),
    )


def _loss_from_logits(logits: np.ndarray, targets: np.ndarray, n_samples: int):
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(len(targets)), targets] - log_norm
    return float(-logp.sum() / n_samples), logp


def nll_loss(params: PolicyParams, batch, vocab: ActionVocabulary | None = None) -> float:
    """Mean over samples of the summed per-token negative log-likelihood.

    Returns ``inf`` (and logs a warning) when some target has zero probability.
    """
    vocab = vocab or _vocab_for(params)
    b = _stack_batch(batch, vocab)
    x = _features(params, b.images, b.goal_ids, b.prev_ids)
    _, logits = _forward_rows(params, x)
    loss, logp = _loss_from_logits(logits, b.targets, b.n_samples)
    if not math.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(logp))
        log.warning("zero target probability at rows %s; loss is +inf", bad[:10].tolist())
        return math.inf
    return loss


def grad_nll(params: PolicyParams, batch, vocab: ActionVocabulary | None = None) -> dict[str, np.ndarray]:
    """Analytic gradient of :func:`nll_loss` for every trainable field."""
    vocab = vocab or _vocab_for(params)
    b = _stack_batch(batch, vocab)
    return _grad_rows(params, b)[1]


def _grad_rows(params: PolicyParams, b: _Batch):
    x = _features(params, b.images, b.goal_ids, b.prev_ids)
    W_eff = params.effective_W1()
    h = np.tanh(x @ W_eff + params.b1)
    logits = h @ params.W2 + params.b2
    loss, _ = _loss_from_logits(logits, b.targets, b.n_samples)

    dlogits = _softmax(logits)
    dlogits[np.arange(len(b.targets)), b.targets] -= 1.0
    dlogits /= b.n_samples
    dh = dlogits @ params.W2.T
    dpre = dh * (1.0 - h * h)
    dx = dpre @ W_eff.T
    dW = x.T @ dpre

    img_dim = params.image_dim
    d_goal = np.zeros_like(params.goal_embedding)
    np.add.at(d_goal, b.goal_ids, dx[:, img_dim : img_dim + params.d_g])
    d_prev = np.zeros_like(params.prev_token_embedding)
    np.add.at(d_prev, b.prev_ids, dx[:, img_dim + params.d_g :])

    grads = {
        "goal_embedding": d_goal,
        "b1": dpre.sum(axis=0),
        "b2": dlogits.sum(axis=0),
        "prev_token_embedding": d_prev,
    }
    if params.lora is None:
        grads["W1"] = dW
        grads["W2"] = h.T @ dlogits
    else:
        # W_eff = W1 + c * A^T B^T
        c = params.lora.scaling
        grads["lora_A"] = c * (params.lora.B.T @ dW.T)
        grads["lora_B"] = c * (dW.T @ params.lora.A.T)
    return loss, grads


# --- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.15
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 1e-3


@dataclass
class TrainResult:
    params: PolicyParams
    loss_curve: list[float] = field(default_factory=list)


def train_sft(params: PolicyParams, dataset, config: TrainConfig = TrainConfig(), vocab: ActionVocabulary | None = None) -> TrainResult:
    """Plain minibatch SGD on the next-token NLL.

    Returns a trained copy and the per-epoch mean training loss; entry 0 of
    the curve is the loss before any update.
    """
    vocab = vocab or _vocab_for(params)
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if config.batch_size < 1 or config.epochs < 0:
        raise ValueError("batch_size must be positive and epochs non-negative")
    out = params.copy()
    rng = np.random.default_rng(config.seed)
    full = _stack_batch(dataset, vocab)
    rows_of = _rows_by_sample(dataset)
    curve = [_full_loss(out, full)]
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = _grad_rows(out, full.select(np.concatenate([rows_of[i] for i in idx]), len(idx)))
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} in epoch {epoch} at offset {start}")
            arrays = out.arrays()
            for name, g in grads.items():
                if config.weight_decay and name not in _NO_DECAY:
                    g = g + config.weight_decay * arrays[name]
                out.update(name, arrays[name] - config.learning_rate * g)
        epoch_loss = _full_loss(out, full)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite training loss after epoch {epoch}")
        curve.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return TrainResult(out, curve)


def _full_loss(params: PolicyParams, b: _Batch) -> float:
    x = _features(params, b.images, b.goal_ids, b.prev_ids)
    _, logits = _forward_rows(params, x)
    return _loss_from_logits(logits, b.targets, b.n_samples)[0]


# --- decoding --------------------------------------------------------------------


def greedy_decode(
    params: PolicyParams,
    obs: Observation,
    config: DecodeConfig = DecodeConfig(),
    vocab: ActionVocabulary | None = None,
) -> ActionTokenSeq:
    """Argmax decoding of one command.

    At each step only the slice of the vocabulary valid for that position is
    eligible; ties resolve to the lowest id (``np.argmax`` semantics).
    """
    vocab = vocab or _vocab_for(params)
    tokens: list[int] = []
    steps = min(TOKENS_PER_COMMAND, config.max_tokens)
    for pos in range(steps):
        logits = _next_logits(params, obs, tokens, vocab, config.max_tokens)
        tokens.append(int(np.argmax(logits[vocab.position_slice(pos)])))
    return ActionTokenSeq(tokens, max_len=config.max_tokens)


def greedy_decode_many(params: PolicyParams, observations: Iterable[Observation], vocab: ActionVocabulary | None = None) -> np.ndarray:
    """Batched greedy decode; returns an ``(n, 2)`` array of bin indices."""
    vocab = vocab or _vocab_for(params)
    obs = list(observations)
    images = np.asarray([o.image for o in obs])
    goals = np.asarray([o.goal.goal_id for o in obs], dtype=np.intp)
    out = np.zeros((len(obs), TOKENS_PER_COMMAND), dtype=np.intp)
    prev = np.zeros(len(obs), dtype=np.intp)
    for pos in range(TOKENS_PER_COMMAND):
        _, logits = _forward_rows(params, _features(params, images, goals, prev))
        out[:, pos] = np.argmax(logits[:, vocab.position_slice(pos)], axis=1)
        prev = np.array([vocab.global_id(pos, int(t)) + 1 for t in out[:, pos]], dtype=np.intp)
    return out
