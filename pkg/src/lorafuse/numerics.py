"""Dense 2-D tensor math with a minimal reverse-mode gradient tape.

Tensor2 wraps a row-major numpy array (float32 by default, float64 for
gradient checking). Operations executed while any input is attached to a
GradTape record a pullback; GradTape.backward replays the recorded nodes
newest-first and accumulates gradients only for watched (trainable)
tensors. Tensors without a tape are frozen constants and never receive
gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_UIDS = itertools.count(1)

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


class Tensor2:
    """A 2-D tensor. Frozen unless attached to a GradTape via watch()."""

    __slots__ = ("data", "tape", "uid")

    def __init__(self, data, tape=None):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ValueError(f"Tensor2 requires a 2-D array, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.tape = tape
        self.uid = next(_UIDS)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def copy(self) -> "Tensor2":
        return Tensor2(self.data.copy())

    def __repr__(self):
        return f"Tensor2({self.rows}x{self.cols}, {self.data.dtype})"


class GradTape:
    """Recorded computation for one backward pass.

    Nodes are replayed in reverse creation order, which visits each node
    exactly once. Only tensors registered through watch() keep a gradient
    accumulator; frozen tensors are skipped entirely.
    """

    def __init__(self):
        self._nodes = []  # (out_uid, ((tensor, pullback), ...))
        self._watched = {}  # uid -> Tensor2
        self.grads = {}  # uid -> np.ndarray, populated by backward()

    def watch(self, *tensors: Tensor2) -> None:
        for t in tensors:
            t.tape = self
            self._watched[t.uid] = t

    def release(self) -> None:
        """Detach watched tensors so they can join a future tape."""
        for t in self._watched.values():
            t.tape = None

    def _record(self, out: Tensor2, parents) -> None:
        self._nodes.append((out.uid, parents))

    def backward(self, loss: Tensor2) -> dict:
        if loss.tape is not self:
            raise ValueError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise ValueError("backward requires a 1x1 loss tensor")
        flowing = {loss.uid: np.ones_like(loss.data)}
        for out_uid, parents in reversed(self._nodes):
            if out_uid in self._watched:
                g = flowing.get(out_uid)
            else:
                g = flowing.pop(out_uid, None)
            if g is None:
                continue
            for tensor, pullback in parents:
                contrib = pullback(g)
                prev = flowing.get(tensor.uid)
                # never accumulate in place: pullbacks may return shared arrays
                flowing[tensor.uid] = contrib if prev is None else prev + contrib
        self.grads = {}
        for uid, t in self._watched.items():
            g = flowing.get(uid)
            self.grads[uid] = np.zeros_like(t.data) if g is None else g
        return self.grads

    def grad(self, t: Tensor2) -> np.ndarray:
        return self.grads[t.uid]


def _result(data, inputs) -> Tensor2:
    """Build the op output, recording a tape node if any input is taped."""
    tape = None
    for t, _ in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    out = Tensor2(data, tape)
    if tape is not None:
        tape._record(out, tuple((t, pb) for t, pb in inputs if t.tape is tape))
    return out


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ValueError(
            f"matmul dimension mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    ad, bd = a.data, b.data
    return _result(ad @ bd, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def transpose(a: Tensor2) -> Tensor2:
    return _result(a.data.T, [(a, lambda g: g.T)])


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return _result(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def scale(a: Tensor2, k: float) -> Tensor2:
    return _result(a.data * k, [(a, lambda g: g * k)])


def softmax_rows(m: Tensor2) -> Tensor2:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g, p=p):
        inner = (g * p).sum(axis=1, keepdims=True)
        return p * (g - inner)

    return _result(p, [(m, pull)])


def gelu(a: Tensor2) -> Tensor2:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    y = 0.5 * x * (1.0 + t)

    def pull(g, x=x, t=t):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return _result(y, [(a, pull)])


def layer_norm_rows(a: Tensor2, gain: Tensor2, bias: Tensor2, eps: float = 1e-5) -> Tensor2:
    """Per-row layer normalization with learned gain and bias (1 x d each)."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def pull_x(g, xhat=xhat, inv=inv, gd=gain.data):
        gg = g * gd
        return (
            gg
            - gg.mean(axis=1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=1, keepdims=True)
        ) * inv

    def pull_gain(g, xhat=xhat):
        return (g * xhat).sum(axis=0, keepdims=True)

    def pull_bias(g):
        return g.sum(axis=0, keepdims=True)

    return _result(y, [(a, pull_x), (gain, pull_gain), (bias, pull_bias)])


def slice_cols(a: Tensor2, j0: int, j1: int) -> Tensor2:
    def pull(g, shape=a.data.shape, j0=j0, j1=j1):
        z = np.zeros(shape, dtype=g.dtype)
        z[:, j0:j1] = g
        return z

    return _result(a.data[:, j0:j1].copy(), [(a, pull)])


def concat_cols(parts) -> Tensor2:
    datas = [p.data for p in parts]
    offsets = np.cumsum([0] + [d.shape[1] for d in datas])
    inputs = []
    for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
        inputs.append((p, lambda g, o0=o0, o1=o1: g[:, o0:o1]))
    return _result(np.concatenate(datas, axis=1), inputs)


_CAUSAL_CACHE = {}


def _causal_bias(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    if key not in _CAUSAL_CACHE:
        _CAUSAL_CACHE[key] = np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)
    return _CAUSAL_CACHE[key]


def attention_rows(q: Tensor2, k: Tensor2, v: Tensor2, heads: int,
                   causal: bool = False) -> Tensor2:
    """Scaled dot-product attention over all heads in one fused op.

    q is n x d, k and v are m x d with d split into equal head slices;
    the output is n x d. With causal=True (requires n == m) position i
    attends only to positions <= i. Fusing the head loop keeps the tape
    short and the arithmetic in large einsums.
    """
    n, d = q.data.shape
    m = k.data.shape[0]
    if d % heads != 0:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    if k.data.shape != (m, d) or v.data.shape != (m, d):
        raise ValueError("attention k/v shape mismatch")
    dh = d // heads
    inv = 1.0 / np.sqrt(dh)
    # head-major (heads, rows, dh) layout so scores run as batched GEMMs
    qh = np.ascontiguousarray(q.data.reshape(n, heads, dh).transpose(1, 0, 2))
    kh = np.ascontiguousarray(k.data.reshape(m, heads, dh).transpose(1, 0, 2))
    vh = np.ascontiguousarray(v.data.reshape(m, heads, dh).transpose(1, 0, 2))
    s = np.matmul(qh, kh.transpose(0, 2, 1))
    s *= inv
    if causal:
        if n != m:
            raise ValueError("causal attention requires square score matrix")
        s += _causal_bias(n, s.dtype)
    s -= s.max(axis=2, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=2, keepdims=True)
    p = s
    out = np.matmul(p, vh).transpose(1, 0, 2).reshape(n, d)

    # q and k share the softmax backward; memoize it per incoming gradient
    memo = {}

    def score_grad(g):
        if memo.get("g") is not g:
            go = np.ascontiguousarray(g.reshape(n, heads, dh).transpose(1, 0, 2))
            dp = np.matmul(go, vh.transpose(0, 2, 1))
            memo["go"] = go
            dp -= (dp * p).sum(axis=2, keepdims=True)
            dp *= p
            memo["ds"] = dp
            memo["g"] = g
        return memo["ds"]

    def pull_q(g):
        ds = score_grad(g)
        return (np.matmul(ds, kh) * inv).transpose(1, 0, 2).reshape(n, d)

    def pull_k(g):
        ds = score_grad(g)
        return (np.matmul(ds.transpose(0, 2, 1), qh) * inv).transpose(1, 0, 2).reshape(m, d)

    def pull_v(g):
        score_grad(g)
        return np.matmul(p.transpose(0, 2, 1), memo["go"]).transpose(1, 0, 2).reshape(m, d)

    return _result(out, [(q, pull_q), (k, pull_k), (v, pull_v)])


def embed_rows(table: Tensor2, ids) -> Tensor2:
    """Gather rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)

    def pull(g, idx=idx, shape=table.data.shape):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return z

    return _result(table.data[idx], [(table, pull)])


def masked_row_add(base: Tensor2, delta: Tensor2, rows) -> Tensor2:
    """Add delta into base on the given rows; all other rows pass through
    untouched, which keeps them bit-identical to base."""
    if base.data.shape != delta.data.shape:
        raise ValueError(
            f"masked_row_add shape mismatch: {base.data.shape} vs {delta.data.shape}"
        )
    idx = np.asarray(rows, dtype=np.int64)
    out = base.data.copy()
    out[idx] += delta.data[idx]

    def pull_delta(g, idx=idx):
        z = np.zeros_like(g)
        z[idx] = g[idx]
        return z

    return _result(out, [(base, lambda g: g), (delta, pull_delta)])


def cross_entropy_nll(logits: Tensor2, targets):
    """Mean NLL of target ids under row-wise softmax of the logits.

    Returns (loss, grad) where loss is a 1x1 tensor (taped if the logits
    are) and grad is the analytic gradient (softmax - one_hot) / n.
    """
    t = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id outside vocabulary of size {v}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss_val = -logp[rows, t].mean()
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    grad /= n
    loss = _result(
        np.array([[loss_val]], dtype=logits.dtype),
        [(logits, lambda g, grad=grad: g[0, 0] * grad)],
    )
    return loss, grad


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one fixed parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place to params."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(
                f"grad {i} shape {g.shape} does not match param {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient for parameter {i}: {bad} bad entries"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g
