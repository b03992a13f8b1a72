"""Miniature autoregressive image transformer conditioned on prompts.

A one-layer bidirectional prompt encoder feeds per-layer cross-attention
in a pre-norm causal decoder over image tokens (BOS + one token per
pixel, raster order). Low-rank adapters inject only into the cross
attention K/V projections; the query path and all base weights stay
frozen during subject tuning. Full-sequence teacher forcing runs through
the taped ops in numerics; generation uses an incremental per-row decoder
with cached self-attention K/V and cross K/V computed once per prompt.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .adapters import ActiveProjection, apply_lora_projection
from .numerics import (
    GradTape,
    Tensor2,
    add,
    attention_rows,
    cross_entropy_nll,
    embed_rows,
    finite_diff_grad,
    gelu,
    layer_norm_rows,
    matmul,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 3
    image_vocab: int = 16
    prompt_vocab: int = 42
    image_h: int = 16
    image_w: int = 16
    max_prompt: int = 32

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def n_image_tokens(self) -> int:
        return self.image_h * self.image_w

    @property
    def bos_id(self) -> int:
        return self.image_vocab


@dataclass
class ModelWeights:
    """Frozen base parameters; tensors keyed by stable 'base.*' names."""

    config: ModelConfig
    tensors: dict

    def __getitem__(self, name: str) -> Tensor2:
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def param_names(self):
        return list(self.tensors)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            config=self.config,
            tensors={k: Tensor2(t.data.copy()) for k, t in self.tensors.items()},
        )

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            config=self.config,
            tensors={k: Tensor2(t.data.astype(dtype)) for k, t in self.tensors.items()},
        )


def _param_spec(cfg: ModelConfig):
    """(name, rows, cols, init std) in fixed creation order; std None = layer
    norm gain (ones) and -1 = layer norm bias (zeros)."""
    d, c = cfg.d, cfg.image_vocab
    emb_std = 0.5
    proj_std = d**-0.5
    spec = [
        ("base.img_embed", c + 1, d, emb_std),
        ("base.img_pos", cfg.n_image_tokens, d, emb_std),
        ("base.txt_embed", cfg.prompt_vocab, d, emb_std),
        ("base.txt_pos", cfg.max_prompt, d, emb_std),
        ("base.enc.0.ln_attn.g", 1, d, None),
        ("base.enc.0.ln_attn.b", 1, d, -1),
        ("base.enc.0.wq", d, d, proj_std),
        ("base.enc.0.wk", d, d, proj_std),
        ("base.enc.0.wv", d, d, proj_std),
        ("base.enc.0.wo", d, d, proj_std),
        ("base.enc.0.ln_out.g", 1, d, None),
        ("base.enc.0.ln_out.b", 1, d, -1),
    ]
    for i in range(cfg.layers):
        p = f"base.dec.{i}"
        spec += [
            (f"{p}.ln_sa.g", 1, d, None),
            (f"{p}.ln_sa.b", 1, d, -1),
            (f"{p}.sa.wq", d, d, proj_std),
            (f"{p}.sa.wk", d, d, proj_std),
            (f"{p}.sa.wv", d, d, proj_std),
            (f"{p}.sa.wo", d, d, proj_std),
            (f"{p}.ln_ca.g", 1, d, None),
            (f"{p}.ln_ca.b", 1, d, -1),
            (f"{p}.ca.wq", d, d, proj_std),
            (f"{p}.ca.wk", d, d, proj_std),
            (f"{p}.ca.wv", d, d, proj_std),
            (f"{p}.ca.wo", d, d, proj_std),
            (f"{p}.ln_mlp.g", 1, d, None),
            (f"{p}.ln_mlp.b", 1, d, -1),
            (f"{p}.mlp.w1", 4 * d, d, (d) ** -0.5),
            (f"{p}.mlp.w2", d, 4 * d, (4 * d) ** -0.5),
        ]
    spec += [
        ("base.ln_out.g", 1, d, None),
        ("base.ln_out.b", 1, d, -1),
        # small head init keeps untrained logits near uniform
        ("base.head", d, c, 0.02),
    ]
    return spec


def init_model_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, rows, cols, std in _param_spec(cfg):
        if std is None:
            data = np.ones((rows, cols), dtype=dtype)
        elif std == -1:
            data = np.zeros((rows, cols), dtype=dtype)
        else:
            data = rng.normal(0.0, std, size=(rows, cols)).astype(dtype)
        tensors[name] = Tensor2(data)
    return ModelWeights(config=cfg, tensors=tensors)


def _ln(w: ModelWeights, prefix: str, x: Tensor2) -> Tensor2:
    return layer_norm_rows(x, w[f"{prefix}.g"], w[f"{prefix}.b"])


def _encode_prompt_t(w: ModelWeights, prompt_ids) -> Tensor2:
    cfg = w.config
    ids = np.asarray(prompt_ids, dtype=np.int64)
    if ids.size > cfg.max_prompt:
        raise ValueError(f"prompt length {ids.size} exceeds maximum {cfg.max_prompt}")
    x = add(
        embed_rows(w["base.txt_embed"], ids),
        embed_rows(w["base.txt_pos"], np.arange(ids.size)),
    )
    h = _ln(w, "base.enc.0.ln_attn", x)
    q = matmul(h, transpose(w["base.enc.0.wq"]))
    k = matmul(h, transpose(w["base.enc.0.wk"]))
    v = matmul(h, transpose(w["base.enc.0.wv"]))
    a = attention_rows(q, k, v, cfg.heads)
    x = add(x, matmul(a, transpose(w["base.enc.0.wo"])))
    return _ln(w, "base.enc.0.ln_out", x)


def encode_prompt(w: ModelWeights, prompt) -> np.ndarray:
    """Encoded prompt states, one row per prompt token."""
    return _encode_prompt_t(w, _prompt_ids(prompt)).data


def _prompt_ids(prompt):
    return prompt.ids if hasattr(prompt, "ids") else prompt


def _cross_kv_t(w: ModelWeights, layer: int, prompt_hidden: Tensor2, active):
    """K and V for one decoder layer with any active adapter deltas applied.
    The query path is never adapted."""
    items_k, items_v = [], []
    for pair in active:
        ad = pair.adapter
        if ad.layers != w.config.layers or ad.width != w.config.d:
            raise ValueError(
                f"adapter {ad.subject_id!r} shaped for {ad.layers} layers x "
                f"{ad.width}, model has {w.config.layers} x {w.config.d}"
            )
        a_k, b_k = ad.mats[(layer, "K")]
        a_v, b_v = ad.mats[(layer, "V")]
        items_k.append(ActiveProjection(a_k, b_k, ad.alpha, pair.mask))
        items_v.append(ActiveProjection(a_v, b_v, ad.alpha, pair.mask))
    k = apply_lora_projection(prompt_hidden, w[f"base.dec.{layer}.ca.wk"], items_k)
    v = apply_lora_projection(prompt_hidden, w[f"base.dec.{layer}.ca.wv"], items_v)
    return k, v


def cross_attention_kv(w: ModelWeights, layer: int, prompt_hidden: np.ndarray, active=()):
    """Public probe: (K, V) arrays for one layer under the given routing."""
    k, v = _cross_kv_t(w, layer, Tensor2(np.asarray(prompt_hidden)), list(active))
    return k.data, v.data


def _decoder_logits_t(w: ModelWeights, prompt_hidden: Tensor2, input_ids, active) -> Tensor2:
    cfg = w.config
    n = len(input_ids)
    x = add(
        embed_rows(w["base.img_embed"], input_ids),
        embed_rows(w["base.img_pos"], np.arange(n)),
    )
    for i in range(cfg.layers):
        p = f"base.dec.{i}"
        h = _ln(w, f"{p}.ln_sa", x)
        q = matmul(h, transpose(w[f"{p}.sa.wq"]))
        k = matmul(h, transpose(w[f"{p}.sa.wk"]))
        v = matmul(h, transpose(w[f"{p}.sa.wv"]))
        a = attention_rows(q, k, v, cfg.heads, causal=True)
        x = add(x, matmul(a, transpose(w[f"{p}.sa.wo"])))

        h = _ln(w, f"{p}.ln_ca", x)
        q = matmul(h, transpose(w[f"{p}.ca.wq"]))
        kc, vc = _cross_kv_t(w, i, prompt_hidden, active)
        a = attention_rows(q, kc, vc, cfg.heads)
        x = add(x, matmul(a, transpose(w[f"{p}.ca.wo"])))

        h = _ln(w, f"{p}.ln_mlp", x)
        m = matmul(gelu(matmul(h, transpose(w[f"{p}.mlp.w1"]))), transpose(w[f"{p}.mlp.w2"]))
        x = add(x, m)
    x = _ln(w, "base.ln_out", x)
    return matmul(x, w["base.head"])


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("image tokens must be a non-empty 1-D sequence")
    if t.size > cfg.n_image_tokens:
        raise ValueError(f"{t.size} image tokens exceed maximum {cfg.n_image_tokens}")
    if t.min() < 0 or t.max() >= cfg.image_vocab:
        raise ValueError(f"image token outside vocabulary of size {cfg.image_vocab}")
    return t


def _input_ids(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    return np.concatenate(([cfg.bos_id], tokens[:-1]))


def forward_logits(w: ModelWeights, prompt, active, image_tokens) -> np.ndarray:
    """Teacher-forced logits; row i depends only on BOS plus tokens before i
    and on the full prompt under the given routing."""
    tokens = _check_tokens(w.config, image_tokens)
    ph = _encode_prompt_t(w, _prompt_ids(prompt))
    logits = _decoder_logits_t(w, ph, _input_ids(w.config, tokens), list(active))
    return logits.data


def taped_sequence_nll(w: ModelWeights, prompt, active, image_tokens, tape: GradTape) -> Tensor2:
    """Mean NLL as a 1x1 taped tensor; the caller owns watch/backward."""
    tokens = _check_tokens(w.config, image_tokens)
    if tokens.size != w.config.n_image_tokens:
        raise ValueError(
            f"sequence NLL needs all {w.config.n_image_tokens} tokens, got {tokens.size}"
        )
    ph = _encode_prompt_t(w, _prompt_ids(prompt))
    logits = _decoder_logits_t(w, ph, _input_ids(w.config, tokens), list(active))
    loss, _ = cross_entropy_nll(logits, tokens)
    return loss


def sequence_nll(w: ModelWeights, prompt, active, image_tokens) -> float:
    """Mean NLL of the full token sequence under the prompt and routing."""
    return float(taped_sequence_nll(w, prompt, active, image_tokens, None).data[0, 0])


def backward_lora(w: ModelWeights, prompt, active, image_tokens):
    """Exact gradients of sequence_nll w.r.t. every active adapter matrix.

    Returns (loss, grads) with grads[subject_id][(layer, target)] = (gA, gB).
    Base parameters are frozen constants: no gradient is ever accumulated
    for them.
    """
    active = list(active)
    if not active:
        raise ValueError("backward_lora requires at least one active adapter")
    tape = GradTape()
    for pair in active:
        for a, b in pair.adapter.mats.values():
            tape.watch(a, b)
    try:
        loss = taped_sequence_nll(w, prompt, active, image_tokens, tape)
        tape.backward(loss)
        grads = {}
        for pair in active:
            ad = pair.adapter
            out = {}
            for key, (a, b) in ad.mats.items():
                out[key] = (tape.grad(a), tape.grad(b))
            grads[ad.subject_id] = out
    finally:
        tape.release()
    return float(loss.data[0, 0]), grads


# --- incremental decoding -------------------------------------------------


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean()
    xc = x - mu
    var = (xc * xc).mean()
    return xc / np.sqrt(var + eps) * g[0] + b[0]


def _gelu_np(x):
    t = np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t)


def _attn_row(q, keys, values, heads: int):
    """Single query row against cached keys/values, per head."""
    t, d = keys.shape
    dh = d // heads
    qh = q.reshape(heads, dh)
    kh = keys.reshape(t, heads, dh)
    vh = values.reshape(t, heads, dh)
    s = np.einsum("thd,hd->th", kh, qh) / np.sqrt(dh)
    s -= s.max(axis=0, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=0, keepdims=True)
    return np.einsum("th,thd->hd", a, vh).reshape(d)


class DecodeSession:
    """Step-wise decoder: cross K/V fixed per prompt, self K/V cached."""

    def __init__(self, w: ModelWeights, prompt_hidden: np.ndarray, active=()):
        self.cfg = w.config
        self.w = {name: t.data for name, t in w.tensors.items()}
        ph = Tensor2(np.asarray(prompt_hidden))
        self.cross = []
        for i in range(self.cfg.layers):
            k, v = _cross_kv_t(w, i, ph, list(active))
            self.cross.append((k.data, v.data))
        n, d = self.cfg.n_image_tokens, self.cfg.d
        dt = self.w["base.head"].dtype
        self.k_cache = [np.empty((n, d), dtype=dt) for _ in range(self.cfg.layers)]
        self.v_cache = [np.empty((n, d), dtype=dt) for _ in range(self.cfg.layers)]
        self.pos = 0

    def step(self, token_id: int) -> np.ndarray:
        """Feed one input token (BOS first), return next-token logits."""
        w, cfg, pos = self.w, self.cfg, self.pos
        if pos >= cfg.n_image_tokens:
            raise ValueError("decode session exhausted")
        x = w["base.img_embed"][token_id] + w["base.img_pos"][pos]
        for i in range(cfg.layers):
            p = f"base.dec.{i}"
            h = _ln_np(x, w[f"{p}.ln_sa.g"], w[f"{p}.ln_sa.b"])
            q = h @ w[f"{p}.sa.wq"].T
            self.k_cache[i][pos] = h @ w[f"{p}.sa.wk"].T
            self.v_cache[i][pos] = h @ w[f"{p}.sa.wv"].T
            a = _attn_row(q, self.k_cache[i][: pos + 1], self.v_cache[i][: pos + 1], cfg.heads)
            x = x + a @ w[f"{p}.sa.wo"].T

            h = _ln_np(x, w[f"{p}.ln_ca.g"], w[f"{p}.ln_ca.b"])
            q = h @ w[f"{p}.ca.wq"].T
            kc, vc = self.cross[i]
            a = _attn_row(q, kc, vc, cfg.heads)
            x = x + a @ w[f"{p}.ca.wo"].T

            h = _ln_np(x, w[f"{p}.ln_mlp.g"], w[f"{p}.ln_mlp.b"])
            x = x + _gelu_np(h @ w[f"{p}.mlp.w1"].T) @ w[f"{p}.mlp.w2"].T
        x = _ln_np(x, w["base.ln_out.g"], w["base.ln_out.b"])
        self.pos += 1
        return x @ w["base.head"]


def rollout(w: ModelWeights, prompt_hidden: np.ndarray, active, pick) -> np.ndarray:
    """Autoregressively decode a full image token sequence.

    pick(logits_row, position) -> token id decides each step.
    """
    cfg = w.config
    session = DecodeSession(w, prompt_hidden, active)
    tokens = np.empty(cfg.n_image_tokens, dtype=np.int64)
    tok = cfg.bos_id
    for i in range(cfg.n_image_tokens):
        logits = session.step(tok)
        tok = int(pick(logits, i))
        tokens[i] = tok
    return tokens


# --- persistence ----------------------------------------------------------


def save_weights(path, w: ModelWeights) -> None:
    doc = {"kind": "weights", "config": asdict(w.config)}
    container.write_weights_file(path, doc, [(k, t.data) for k, t in w.tensors.items()])


def load_weights(path) -> ModelWeights:
    doc, tensors = container.read_weights_file(path)
    if doc.get("kind") != "weights":
        raise container.ContainerError(f"{path}: not a weights container")
    cfg = ModelConfig(**doc["config"])
    expected = [name for name, *_ in _param_spec(cfg)]
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise container.ContainerError(f"{path}: missing tensors {missing[:3]}...")
    return ModelWeights(config=cfg, tensors={n: Tensor2(tensors[n]) for n in expected})


# --- gradient checking ----------------------------------------------------


def gradient_check(seed: int = 0, eps: float = 1e-5):
    """Compare analytic adapter gradients with central differences on a
    small float64 model. Returns (max_rel_err, n_params)."""
    from .adapters import ActivePair, init_adapter  # local: avoids cycle at import

    cfg = ModelConfig(d=16, heads=4, layers=1, image_h=2, image_w=4)
    w = init_model_weights(cfg, seed=seed, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(seed + 1))

    adapter = init_adapter(cfg.layers, cfg.d, "a1 cat", rank=4, alpha=1.0,
                           seed=seed, dtype=np.float64)
    for a, b in adapter.mats.values():
        b.data[:] = rng.normal(0.0, 0.1, size=b.data.shape)

    prompt_ids = rng.integers(0, cfg.prompt_vocab, size=5)
    tokens = rng.integers(0, cfg.image_vocab, size=cfg.n_image_tokens)
    mask = np.ones(len(prompt_ids), dtype=np.float32)
    active = [ActivePair(adapter, mask)]

    _, grads = backward_lora(w, prompt_ids, active, tokens)
    keys = sorted(adapter.mats)
    analytic = np.concatenate(
        [grads["a1 cat"][k][j].reshape(-1) for k in keys for j in (0, 1)]
    )
    x0 = np.concatenate(
        [adapter.mats[k][j].data.reshape(-1) for k in keys for j in (0, 1)]
    )

    def f(x):
        off = 0
        for k in keys:
            for j in (0, 1):
                t = adapter.mats[k][j]
                size = t.data.size
                t.data[:] = x[off : off + size].reshape(t.data.shape)
                off += size
        return sequence_nll(w, prompt_ids, active, tokens)

    fd = finite_diff_grad(f, x0, eps)
    f(x0)  # restore
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    rel = np.abs(analytic - fd) / denom
    return float(rel.max()), analytic.size
