"""Stage wiring shared by the CLI and the acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .action_space import ActionVocabulary
from .policy import DecodeConfig, PolicyParams, TrainConfig, train_sft
from .quantizer import argmax_agreement
from .sim import (
    DelayInjectingBackend,
    EpisodeConfig,
    ExpertBackend,
    ExternalProcessBackend,
    ToyPolicyBackend,
    collect_dataset,
    random_world,
    render_observation,
    run_closed_loop,
)

log = logging.getLogger(__name__)


def vocab_from_config(cfg: dict) -> ActionVocabulary:
    v = cfg["vocab"]
    return ActionVocabulary(v["v_bins"], v["w_bins"], tuple(v["v_range"]), tuple(v["w_range"]))


def decode_from_config(cfg: dict) -> DecodeConfig:
    return DecodeConfig(max_tokens=cfg["decode"]["max_tokens"], context_budget=cfg["decode"]["n_ctx"])


def episode_from_config(cfg: dict, **overrides) -> EpisodeConfig:
    return EpisodeConfig(**{**cfg["episode"], "seed": cfg["seed"], **overrides})


# Derived seeds: every stage draws from its own stream of the one global seed.
def data_seed(cfg: dict) -> int:
    return cfg["seed"] + 1


def dagger_seed(cfg: dict, round_idx: int) -> int:
    return cfg["seed"] + 100 + round_idx


def gen_data(cfg: dict):
    return collect_dataset(cfg["data"]["episodes"], data_seed(cfg), episode_from_config(cfg), vocab_from_config(cfg))


@dataclass
class TrainOutcome:
    params: PolicyParams
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    dataset_size: int = 0


def train_policy(cfg: dict, dataset) -> TrainOutcome:
    """Full-parameter SFT of the toy backbone, then LoRA adaptation rounds.

    Each adaptation round rolls out the current policy, labels the visited
    states with the expert, aggregates them into the dataset and trains only
    the adapter, biases and embeddings (W1 and W2 frozen).
    """
    t, m = cfg["train"], cfg["model"]
    vocab = vocab_from_config(cfg)
    seed = cfg["seed"]
    params = PolicyParams.init(
        vocab_size=vocab.size,
        image_shape=tuple(m["image"]),
        d_g=m["d_g"],
        d_tok=m["d_tok"],
        d_h=m["d_h"],
        seed=seed,
    )

    def sgd(epochs: int, run_seed: int) -> TrainConfig:
        return TrainConfig(t["learning_rate"], epochs, t["batch_size"], run_seed, t["weight_decay"])

    outcome = TrainOutcome(params)
    res = train_sft(params, dataset, sgd(t["epochs"], seed), vocab)
    outcome.loss_curves["sft"] = res.loss_curve
    params = res.params
    data = list(dataset)
    if t["dagger_rounds"] > 0:
        params = params.with_lora(t["lora_rank"], t["lora_alpha"], seed=seed)
    episode = episode_from_config(cfg)
    for r in range(t["dagger_rounds"]):
        driver = ToyPolicyBackend(params, vocab, decode_from_config(cfg))
        data += collect_dataset(t["dagger_episodes"], dagger_seed(cfg, r), episode, vocab, driver=driver)
        res = train_sft(params, data, sgd(t["dagger_epochs"], seed + r + 1), vocab)
        outcome.loss_curves[f"lora_round_{r}"] = res.loss_curve
        params = res.params
        log.info("adaptation round %d: %d samples, loss %.4f", r, len(data), res.loss_curve[-1])
    outcome.params = params.freeze()
    outcome.dataset_size = len(data)
    return outcome


def evaluate(backend, cfg: dict, episodes: int | None = None, **episode_overrides) -> dict:
    n = cfg["eval"]["episodes"] if episodes is None else episodes
    episode = episode_from_config(cfg, **episode_overrides)
    offset = cfg["eval"]["seed_offset"]
    results = [run_closed_loop(backend, episode, seed=offset + i, vocab=getattr(backend, "vocab", vocab_from_config(cfg))) for i in range(n)]
    return {
        "episodes": n,
        "success_rate": float(np.mean([r.success for r in results])),
        "mean_steps": float(np.mean([r.steps for r in results])),
        "failsafe_activations": int(sum(r.failsafe_count for r in results)),
        "stale_ticks": int(sum(r.stale_ticks for r in results)),
        "per_episode": [dict(seed=offset + i, **r.to_dict()) for i, r in enumerate(results)],
    }


def agreement_observations(cfg: dict, n: int | None = None):
    c = cfg["compare"]
    n = c["observations"] if n is None else n
    return [render_observation(random_world(c["observation_seed_offset"] + i, cfg["episode"]["n_targets"])) for i in range(n)]


def compare_quantized(params_fp, params_q, cfg: dict, vocab=None, n_observations=None, episodes=None) -> dict:
    vocab = vocab or vocab_from_config(cfg)
    c = cfg["compare"]
    agree = argmax_agreement(params_fp, params_q, agreement_observations(cfg, n_observations), vocab)
    decode = decode_from_config(cfg)
    fp = evaluate(ToyPolicyBackend(params_fp, vocab, decode), cfg, episodes)
    q = evaluate(ToyPolicyBackend(params_q, vocab, decode), cfg, episodes)
    drop_pp = 100.0 * (fp["success_rate"] - q["success_rate"])
    return {
        "agreement": agree.agreement,
        "observations": agree.n,
        "disagreements": agree.disagreements,
        "agreement_threshold": c["agreement_threshold"],
        "success_fp": fp["success_rate"],
        "success_quantized": q["success_rate"],
        "success_delta_pp": -drop_pp,
        "max_success_drop_pp": c["max_success_drop_pp"],
        "thresholds_note": "both thresholds are artifact-chosen; no published reference values exist",
        "passed": agree.agreement >= c["agreement_threshold"] and drop_pp <= c["max_success_drop_pp"],
    }


class BackendSpecError(ValueError):
    pass


def make_backend(spec: str, cfg: dict):
    """Backend from a spec string.

    ``toy:<container>``, ``delay:<ms>`` (optionally ``delay:<ms>:<container>``),
    ``expert``, or ``external:<command line>``.
    """
    from .container import load
    from .model_io import policy_from_model

    kind, _, rest = spec.partition(":")
    if kind == "toy":
        params, vocab, decode = policy_from_model(load(rest))
        return ToyPolicyBackend(params, vocab, decode)
    if kind == "delay":
        ms, _, path = rest.partition(":")
        inner = make_backend(f"toy:{path}", cfg) if path else None
        try:
            delay = float(ms) / 1e3
        except ValueError as exc:
            raise BackendSpecError(f"bad delay in {spec!r}") from exc
        return DelayInjectingBackend(delay, inner)
    if kind == "expert":
        return ExpertBackend(vocab_from_config(cfg))
    if kind == "external":
        if not rest:
            raise BackendSpecError("external backend needs a command line")
        return ExternalProcessBackend(rest, vocab=vocab_from_config(cfg))
    raise BackendSpecError(f"unknown backend spec {spec!r}")
