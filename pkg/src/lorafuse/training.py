"""Base-model pretraining and per-subject adapter tuning.

Pretraining fits every base parameter with Adam on the synthetic corpus.
Subject tuning freezes the base entirely and optimizes one adapter's
(A, B) matrices on the subject's reference set; by default the adapter is
applied across all prompt tokens while tuning (the subject_only mode
exists for ablations) and the span routing difference appears only at
inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .adapters import ActivePair, LoraAdapter, init_adapter
from .model import ModelConfig, ModelWeights, init_model_weights, taped_sequence_nll
from .numerics import AdamState, GradTape, adam_step
from .seeding import derive_seed
from .tokenizer import find_subject_spans, quantize_image, tokenize_prompt


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class PretrainConfig:
    epochs: int = 6
    batch_size: int = 8
    learning_rate: float = 3e-4
    seed: int = 0
    corpus_path: str | None = None


@dataclass
class PretrainResult:
    weights: ModelWeights
    epoch_nll: list
    final_nll: float


@dataclass
class TuneConfig:
    steps: int = 400
    batch_size: int = 4
    learning_rate: float = 1e-3
    rank: int = 4
    alpha: float = 1.0
    routing: str = "all_tokens"  # or "subject_only" for the ablation
    seed: int = 0


@dataclass
class TuneResult:
    adapter: LoraAdapter
    step_losses: list
    initial_nll: float


def _prepare_items(corpus, vocab=None):
    out = []
    for item in corpus.items:
        out.append(
            (tokenize_prompt(item.prompt, vocab).ids, quantize_image(item.image))
        )
    return out


def pretrain_base(corpus, config: PretrainConfig,
                  model_config: ModelConfig | None = None,
                  vocab=None, log=None) -> PretrainResult:
    """Train all base parameters on the corpus; deterministic given seed."""
    if not corpus.items:
        raise ValueError("pretraining corpus is empty")
    cfg = model_config or ModelConfig()
    weights = init_model_weights(cfg, seed=derive_seed(config.seed, "init"))
    items = _prepare_items(corpus, vocab)
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "order")))
    params = weights.parameters()
    state = AdamState(lr=config.learning_rate)

    checkpoint = weights.copy()
    epoch_nll = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = [np.zeros_like(p.data) for p in params]
            batch_loss = 0.0
            for j in batch:
                prompt_ids, tokens = items[int(j)]
                tape = GradTape()
                tape.watch(*params)
                try:
                    loss = taped_sequence_nll(weights, prompt_ids, [], tokens, tape)
                    tape.backward(loss)
                    for g, p in zip(grads, params):
                        g += tape.grad(p)
                finally:
                    tape.release()
                batch_loss += float(loss.data[0, 0])
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}", checkpoint=checkpoint
                )
            inv = 1.0 / len(batch)
            for g in grads:
                g *= inv
            adam_step(params, grads, state)
            epoch_loss += batch_loss
        epoch_nll.append(epoch_loss / len(order))
        checkpoint = weights.copy()
        if log is not None:
            log(epoch, epoch_nll[-1])

    final = mean_corpus_nll(weights, items)
    return PretrainResult(weights=weights, epoch_nll=epoch_nll, final_nll=final)


def mean_corpus_nll(weights: ModelWeights, items, sample: int | None = None) -> float:
    """Mean sequence NLL over (prompt_ids, tokens) pairs."""
    picked = items if sample is None else items[:sample]
    total = 0.0
    for prompt_ids, tokens in picked:
        total += model_mod.sequence_nll(weights, prompt_ids, [], tokens)
    return total / len(picked)


def reference_nll(weights: ModelWeights, refs, active=(), vocab=None) -> float:
    """Mean NLL of the reference set under the (possibly adapted) model."""
    prompt = tokenize_prompt(refs.prompt, vocab)
    total = 0.0
    for img in refs.images:
        total += model_mod.sequence_nll(weights, prompt.ids, active, quantize_image(img))
    return total / len(refs.images)


def tune_subject(base: ModelWeights, refs, config: TuneConfig, vocab=None) -> TuneResult:
    """Fit one subject adapter on its reference set; the base stays frozen.

    Routing during tuning: all_tokens applies the adapter to every prompt
    token; subject_only restricts it to the subject span, leaving all other
    K/V rows bit-equal to the base on every step.
    """
    if not refs.images:
        raise ValueError("reference set is empty")
    if config.routing not in ("all_tokens", "subject_only"):
        raise ValueError(f"unknown tuning routing mode {config.routing!r}")

    subject = refs.subject
    prompt = tokenize_prompt(refs.prompt, vocab)
    spans = find_subject_spans(prompt, [(subject.identifier, subject.class_word)])
    if not spans:
        raise ValueError(f"tuning prompt does not mention subject {subject.uid!r}")
    length = len(prompt)
    if config.routing == "all_tokens":
        mask = np.ones(length, dtype=np.float32)
    else:
        mask = np.zeros(length, dtype=np.float32)
        for s in spans:
            mask[s.start : s.end + 1] = 1.0

    adapter = init_adapter(
        base.config.layers,
        base.config.d,
        subject.uid,
        rank=config.rank,
        alpha=config.alpha,
        seed=derive_seed(config.seed, f"adapter:{subject.uid}"),
    )
    active = [ActivePair(adapter, mask)]
    token_sets = [quantize_image(img) for img in refs.images]

    initial = reference_nll(base, refs, active, vocab)
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, f"order:{subject.uid}")))
    state = AdamState(lr=config.learning_rate)
    keys = sorted(adapter.mats)

    losses = []
    for _ in range(config.steps):
        picks = rng.integers(0, len(token_sets), size=config.batch_size)
        acc = None
        step_loss = 0.0
        for j in picks:
            loss, grads = model_mod.backward_lora(base, prompt.ids, active, token_sets[int(j)])
            step_loss += loss
            flat = []
            for k in keys:
                ga, gb = grads[subject.uid][k]
                flat += [ga, gb]
            if acc is None:
                acc = flat
            else:
                for a, g in zip(acc, flat):
                    a += g
        step_loss /= len(picks)
        if not np.isfinite(step_loss):
            raise TrainingDiverged(f"non-finite tuning loss at step {len(losses)}")
        inv = 1.0 / len(picks)
        for g in acc:
            g *= inv
        ordered_params = []
        for k in keys:
            a, b = adapter.mats[k]
            ordered_params += [a, b]
        adam_step(ordered_params, acc, state)
        losses.append(step_loss)

    return TuneResult(adapter=adapter, step_losses=losses, initial_nll=initial)


def save_tuning_log(path, result: TuneResult) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(result.step_losses):
            f.write(f"{i},{loss:.6f}\n")
