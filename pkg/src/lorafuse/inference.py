"""Autoregressive image generation with per-subject adapter routing.

Routing is resolved once per generation: the prompt's subject spans pick
which registered adapters activate and on which prompt positions. In sai
mode each adapter touches only its own span's K/V rows, so independently
tuned subjects compose in one prompt without any joint re-tuning; the
all_tokens mode (every routed adapter on every prompt token) exists for
the ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterRegistry, active_from_masks, build_routing_masks
from .model import ModelWeights, encode_prompt, rollout
from .tokenizer import (
    DEFAULT_VOCAB,
    PromptTokens,
    detokenize,
    find_subject_spans,
    tokenize_prompt,
)

INFERENCE_MODES = ("sai", "all_tokens")


class UnresolvedSubjectError(ValueError):
    pass


@dataclass
class SamplerConfig:
    mode: str = "greedy"  # or "temperature"
    temperature: float = 0.8
    top_k: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def sample_next(logits_row: np.ndarray, sampler: SamplerConfig, rng=None) -> int:
    """Greedy argmax (lowest id on ties) or seeded top-k temperature sampling."""
    row = np.asarray(logits_row, dtype=np.float64).reshape(-1)
    if sampler.mode == "greedy":
        return int(np.argmax(row))
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    k = min(sampler.top_k, row.size)
    order = np.argsort(-row, kind="stable")[:k]  # stable: ties keep lowest id first
    z = row[order] / sampler.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(order[rng.choice(k, p=p)])


@dataclass
class GenerationResult:
    image: np.ndarray
    tokens: np.ndarray
    prompt: PromptTokens
    spans: list
    mode: str
    sampler: SamplerConfig


def generate(weights: ModelWeights, registry: AdapterRegistry, prompt_text: str,
             sampler: SamplerConfig | None = None, mode: str = "sai",
             vocab=None) -> GenerationResult:
    """Sample a full image for the prompt under the given routing mode.

    Every identifier word in the prompt must resolve to a registered
    adapter span; adapters never activate for subjects absent from the
    prompt. The output is fully determined by (weights, adapters, prompt,
    sampler seed, mode).
    """
    if mode not in INFERENCE_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    sampler = sampler or SamplerConfig()
    vocab = vocab or DEFAULT_VOCAB

    prompt = tokenize_prompt(prompt_text, vocab)
    spans = find_subject_spans(prompt, registry.subject_pairs())
    covered = set()
    for s in spans:
        covered.update(range(s.start, s.end + 1))
    for i, word in enumerate(prompt.words):
        if vocab.is_identifier(word) and i not in covered:
            raise UnresolvedSubjectError(
                f"identifier {word!r} in prompt has no registered adapter"
            )

    routing = build_routing_masks(spans, len(prompt), mode)
    active = active_from_masks(registry, routing)

    hidden = encode_prompt(weights, prompt)
    rng = None
    if sampler.mode == "temperature":
        rng = np.random.Generator(np.random.PCG64(sampler.seed))

    def pick(logits_row, _pos):
        return sample_next(logits_row, sampler, rng)

    tokens = rollout(weights, hidden, active, pick)
    image = detokenize(tokens, weights.config.image_h, weights.config.image_w)
    return GenerationResult(
        image=image, tokens=tokens, prompt=prompt, spans=spans,
        mode=mode, sampler=sampler,
    )
