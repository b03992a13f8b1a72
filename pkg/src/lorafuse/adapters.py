"""Low-rank adapters on the cross-attention K/V projections, their registry,
and per-prompt-token routing masks.

An adapter holds one (A, B) pair per (decoder layer, K or V). B starts at
zero so a fresh adapter is an exact no-op. The projection is computed in
delta form, base + mask-selected alpha * (X A^T) B^T, so rows outside a
subject's mask stay bit-identical to the base projection and the dense
per-token W' of the weight-update view is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .numerics import Tensor2, masked_row_add, matmul, scale, transpose

TARGETS = ("K", "V")

ROUTING_MODES = ("sai", "all_tokens", "subject_only")


@dataclass
class LoraAdapter:
    """Per-subject low-rank pairs: mats[(layer, 'K'|'V')] = (A r x d, B d x r)."""

    subject_id: str
    rank: int
    alpha: float
    layers: int
    width: int
    mats: dict

    @property
    def identifier(self) -> str:
        return self.subject_id.split()[0]

    @property
    def class_word(self) -> str:
        return self.subject_id.split()[1]

    def parameters(self):
        """Flat (A, B) list in a fixed layer/target order."""
        out = []
        for i in range(self.layers):
            for t in TARGETS:
                a, b = self.mats[(i, t)]
                out += [a, b]
        return out

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            subject_id=self.subject_id,
            rank=self.rank,
            alpha=self.alpha,
            layers=self.layers,
            width=self.width,
            mats={k: (a.copy(), b.copy()) for k, (a, b) in self.mats.items()},
        )


def init_adapter(layers: int, width: int, subject_id: str, rank: int = 4,
                 alpha: float = 1.0, seed: int = 0, dtype=np.float32) -> LoraAdapter:
    """A ~ N(0, 1/r) seeded, B = 0: the fresh adapter changes nothing."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > width // 4:
        raise ValueError(f"rank {rank} too large for width {width} (limit {width // 4})")
    if len(subject_id.split()) != 2:
        raise ValueError(f"subject id must be '<identifier> <class>', got {subject_id!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    std = 1.0 / np.sqrt(rank)
    mats = {}
    for i in range(layers):
        for t in TARGETS:
            a = Tensor2(rng.normal(0.0, std, size=(rank, width)).astype(dtype))
            b = Tensor2(np.zeros((width, rank), dtype=dtype))
            mats[(i, t)] = (a, b)
    return LoraAdapter(
        subject_id=subject_id, rank=rank, alpha=alpha, layers=layers,
        width=width, mats=mats,
    )


class AdapterRegistry:
    """Subject id -> adapter, with unique identifier words and one shape."""

    def __init__(self):
        self._adapters = {}

    def __len__(self):
        return len(self._adapters)

    def __contains__(self, subject_id):
        return subject_id in self._adapters

    def add(self, adapter: LoraAdapter) -> None:
        ident = adapter.identifier
        for existing in self._adapters.values():
            if existing.identifier == ident:
                raise ValueError(f"identifier {ident!r} already registered")
            if (existing.layers, existing.width) != (adapter.layers, adapter.width):
                raise ValueError("adapter shape does not match registry")
        self._adapters[adapter.subject_id] = adapter

    def get(self, subject_id: str) -> LoraAdapter:
        return self._adapters[subject_id]

    def subject_pairs(self):
        """(identifier, class) pairs for span matching."""
        return [(a.identifier, a.class_word) for a in self._adapters.values()]

    def subjects(self):
        return list(self._adapters)


@dataclass
class RoutingMask:
    """Per-subject binary activation over prompt positions."""

    length: int
    masks: dict  # subject_id -> float32 vector of shape (length,)

    def rows(self, subject_id) -> np.ndarray:
        return np.flatnonzero(self.masks[subject_id])


def build_routing_masks(spans, length: int, mode: str) -> RoutingMask:
    """sai / subject_only: indicator of each subject's spans (disjoint across
    subjects); all_tokens: all-ones for every subject present."""
    if mode not in ROUTING_MODES:
        raise ValueError(f"unknown routing mode {mode!r}")
    masks = {}
    for span in spans:
        if not (0 <= span.start <= span.end < length):
            raise ValueError(f"span {span} outside prompt of length {length}")
        m = masks.setdefault(span.subject_id, np.zeros(length, dtype=np.float32))
        m[span.start : span.end + 1] = 1.0
    taken = np.zeros(length, dtype=np.int32)
    for sid, m in masks.items():
        taken += m.astype(np.int32)
    if np.any(taken > 1):
        raise ValueError("overlapping spans for distinct subjects")
    if mode == "all_tokens":
        masks = {sid: np.ones(length, dtype=np.float32) for sid in masks}
    return RoutingMask(length=length, masks=masks)


@dataclass
class ActivePair:
    """One adapter activated under one routing mask, for a whole forward."""

    adapter: LoraAdapter
    mask: np.ndarray


def active_from_masks(registry: AdapterRegistry, routing: RoutingMask):
    """ActivePair list for every routed subject, in routing order."""
    return [ActivePair(registry.get(sid), m) for sid, m in routing.masks.items()]


@dataclass
class ActiveProjection:
    """One adapter's (A, B, alpha) for a single projection plus its mask."""

    a: Tensor2
    b: Tensor2
    alpha: float
    mask: np.ndarray


def apply_lora_projection(x: Tensor2, w: Tensor2, active) -> Tensor2:
    """Row i of the result is x_i W^T plus, for each active adapter with
    mask_i = 1, alpha * (x_i A^T) B^T. Differentiable w.r.t. every A and B."""
    out = matmul(x, transpose(w))
    for item in active:
        mask = np.asarray(item.mask)
        if mask.shape != (x.rows,):
            raise ValueError(
                f"routing mask length {mask.shape} does not match {x.rows} prompt rows"
            )
        mid = matmul(x, transpose(item.a))
        delta = scale(matmul(mid, transpose(item.b)), item.alpha)
        out = masked_row_add(out, delta, np.flatnonzero(mask))
    return out


def save_adapter(path, adapter: LoraAdapter) -> None:
    tensors = []
    for i in range(adapter.layers):
        for t in TARGETS:
            a, b = adapter.mats[(i, t)]
            tensors.append((f"layer{i}.{t}.A", a.data))
            tensors.append((f"layer{i}.{t}.B", b.data))
    container.write_adapter_file(path, adapter.subject_id, adapter.rank,
                                 adapter.alpha, tensors)


def load_adapter(path) -> LoraAdapter:
    subject_id, rank, alpha, tensors = container.read_adapter_file(path)
    layers = 0
    width = None
    mats = {}
    for name, data in tensors.items():
        layer_s, target, kind = name.split(".")
        i = int(layer_s.removeprefix("layer"))
        layers = max(layers, i + 1)
        pair = mats.setdefault((i, target), [None, None])
        pair[0 if kind == "A" else 1] = Tensor2(data)
        if kind == "A":
            width = data.shape[1]
    for key, (a, b) in mats.items():
        if a is None or b is None:
            raise container.ContainerError(f"adapter file missing half of {key}")
        mats[key] = (a, b)
    return LoraAdapter(
        subject_id=subject_id, rank=rank, alpha=alpha, layers=layers,
        width=width, mats=mats,
    )
