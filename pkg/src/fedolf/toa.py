"""Tensor operation approximation (TOA) for frozen layer stacks, and a QSGD baseline.

A *tensor* is one neuron (a weight row) of a Dense layer or one filter of a
Conv2D layer. Every parameterized layer of the frozen stack except the last
keeps ``floor(s * H)`` of its ``H`` tensors, sampled without replacement with
weights proportional to their Frobenius norms. The consumer of a reduced
layer (the next parameterized layer) drops the matching input slices and
scales the surviving ones by ``1 / min(1, m * p_j)``, the inverse of each
tensor's inclusion probability, so the consumer's pre-activation is unbiased
for a fixed input. The last frozen layer keeps all its tensors,
so the representation handed to the active layers has its original shape.

Residual blocks are reduced only inside their body: the block's final conv
and its shortcut projection keep all filters, so the residual sum still adds
up. For the same reason a layer whose output feeds an identity shortcut is
never reduced.

QSGD payload layout (per tensor): a float32 L2 norm, then for every element
one sign bit followed by ``bits`` bits of level, packed little-endian into
bytes; the total is ``4 + ceil(n * (bits + 1) / 8)`` bytes. An all-zero
tensor is sent as its norm alone (4 bytes).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .nn import (DTYPE, Block, Conv2D, Dense, Flatten, Layer, ResidualBlock,
                 parameterized_layers)

BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class ToaConfig:
    s: float
    rng_seed: int = 0
    weighting: str = "norm"  # "uniform" is the comparison baseline

    def __post_init__(self) -> None:
        if not 0 < self.s <= 1:
            raise ValueError(f"TOA scaling factor must lie in (0, 1], got {self.s}")
        if self.weighting not in ("norm", "uniform"):
            raise ValueError(f"unknown TOA weighting {self.weighting!r}")


@dataclass
class SparsifiedStack:
    layers: list[Layer]
    kept_indices: list[np.ndarray] = field(default_factory=list)
    rescale: list[np.ndarray] = field(default_factory=list)
    reduced: list[str] = field(default_factory=list)
    probabilities: list[np.ndarray] = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


def tensor_norms(layer: Layer) -> np.ndarray:
    if not isinstance(layer, (Dense, Conv2D)):
        raise TypeError(f"{layer.describe()} has no neurons or filters to sample")
    w = np.asarray(layer.weight, dtype=np.float64)
    return np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))


def sampling_probabilities(layer: Layer) -> np.ndarray:
    """``p_j = ||Z_j||_F / sum_i ||Z_i||_F``; uniform if every tensor is zero."""
    norms = tensor_norms(layer)
    total = norms.sum()
    if total == 0:
        return np.full(norms.size, 1.0 / norms.size)
    return norms / total


def inclusion_probabilities(p: np.ndarray, m: int) -> np.ndarray:
    """First-order inclusion probabilities ``min(1, m * p_j)``, capped iteratively.

    Tensors whose share would exceed 1 are taken with certainty and the
    remaining draws are spread over the rest in proportion to ``p``; the
    result sums to ``m``. Without capping this is exactly ``m * p_j``.
    """
    pi = np.zeros(p.size)
    free = np.ones(p.size, dtype=bool)
    left = m
    while left > 0:
        w = np.where(free, p, 0.0)
        total = w.sum()
        if total == 0:
            w = free.astype(np.float64)
            total = w.sum()
        share = left * w / total
        over = free & (share >= 1)
        if not over.any():
            pi[free] = share[free]
            break
        pi[over] = 1.0
        free &= ~over
        left = m - int(pi[~free].sum().round())
    return pi


def weighted_sample(p: np.ndarray, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``m`` distinct indices drawn with inclusion probabilities ``min(1, m * p_j)``.

    Randomized systematic PPS: shuffle, lay the inclusion probabilities end to
    end on ``[0, m)``, and pick the tensors hit by ``u, u + 1, ..., u + m - 1``.
    Returns the sorted indices and their inclusion probabilities.
    """
    pi = inclusion_probabilities(p, m)
    order = rng.permutation(p.size)
    cum = np.cumsum(pi[order])
    cum *= m / cum[-1]
    points = rng.random() + np.arange(m)
    hit = np.minimum(np.searchsorted(cum, points, side="right"), p.size - 1)
    kept = np.sort(order[hit])
    return kept, pi[kept]


@dataclass
class _Pending:
    """A reduction of the channel/feature axis flowing into the next consumer."""
    kept: np.ndarray
    rescale: np.ndarray
    channels: int  # size of the axis before reduction
    flattened: bool = False


def _restrict_inputs(layer: Layer, pending: _Pending) -> None:
    kept, r = pending.kept, pending.rescale
    identity_scale = bool(np.all(r == 1))
    w = layer.params[0]
    if isinstance(layer, Dense):
        if pending.flattened:
            spatial = layer.in_features // pending.channels
            if spatial * pending.channels != layer.in_features:
                raise ValueError(f"{layer.describe()} does not consume {pending.channels} channels")
            kept = (kept[:, None] * spatial + np.arange(spatial)[None, :]).ravel()
            r = np.repeat(r, spatial)
        w = w[:, kept]
        if not identity_scale:
            w = (w * r[None, :]).astype(w.dtype)
    elif isinstance(layer, Conv2D):
        if pending.flattened:
            raise ValueError("a convolution cannot follow a flatten")
        w = w[:, kept]
        if not identity_scale:
            w = (w * r[None, :, None, None]).astype(w.dtype)
    else:
        raise TypeError(f"cannot restrict inputs of {layer.describe()}")
    layer.params[0] = np.ascontiguousarray(w)


def _reduce_outputs(layer: Layer, cfg: ToaConfig, rng, out: SparsifiedStack, where: str) -> _Pending:
    h = layer.params[0].shape[0]
    m = int(np.floor(cfg.s * h))
    if m < 1:
        raise ValueError(f"s={cfg.s} keeps no tensors of {where} ({h} tensors); "
                         "raise s for this architecture")
    p = sampling_probabilities(layer) if cfg.weighting == "norm" else np.full(h, 1.0 / h)
    if m == h:
        kept, r = np.arange(h), np.ones(h)
    else:
        kept, incl = weighted_sample(p, m, rng)
        r = 1.0 / incl
    layer.params = [np.ascontiguousarray(q[kept]) for q in layer.params]
    out.kept_indices.append(kept)
    out.rescale.append(r)
    out.reduced.append(where)
    out.probabilities.append(p)
    return _Pending(kept, r, h)


def _absorbs_inputs(unit: Layer) -> bool:
    """Can ``unit`` drop input channels? Not if they feed an identity shortcut."""
    if isinstance(unit, ResidualBlock):
        return unit.shortcut is not None
    if isinstance(unit, Block):
        for member in unit.layers:
            if member.params:
                return _absorbs_inputs(member)
        return True
    return True


def sparsify_frozen_stack(frozen: list[Layer], cfg: ToaConfig) -> SparsifiedStack:
    if len(frozen) < 2:
        raise ValueError(f"TOA needs at least 2 frozen layers, got {len(frozen)}")
    units = [copy.deepcopy(u) for u in frozen]
    for u in units:
        u.clear_cache()
        u.clear_grads()
    out = SparsifiedStack(units)
    with_params = [i for i, u in enumerate(units) if u.params]
    if not with_params:
        return out
    last = with_params[-1]
    rng = np.random.default_rng(cfg.rng_seed)
    pending: _Pending | None = None

    for i, unit in enumerate(units):
        reducible = i < last
        consumer_ok = reducible and _absorbs_inputs(units[next(j for j in with_params if j > i)])
        if isinstance(unit, ResidualBlock):
            if pending is not None:
                if unit.shortcut is None:
                    raise AssertionError("reduced channels reached an identity shortcut")
                _restrict_inputs(parameterized_layers(Block(unit.layers))[0], pending)
                _restrict_inputs(unit.shortcut, pending)
                pending = None
            body = parameterized_layers(Block(unit.layers))
            inner = None
            for k, sub in enumerate(unit.layers):
                if isinstance(sub, Flatten) and inner is not None:
                    inner.flattened = True
                if not sub.params:
                    continue
                if inner is not None:
                    _restrict_inputs(sub, inner)
                    inner = None
                if reducible and sub is not body[-1]:
                    inner = _reduce_outputs(sub, cfg, rng, out, f"layer {i + 1}.{k + 1} {sub.describe()}")
            continue

        members = unit.layers if isinstance(unit, Block) else [unit]
        params_here = [m for m in members if m.params]
        for k, sub in enumerate(members):
            if isinstance(sub, Flatten) and pending is not None:
                pending.flattened = True
            if not sub.params:
                continue
            if pending is not None:
                _restrict_inputs(sub, pending)
                pending = None
            if not reducible:
                continue
            if sub is params_here[-1] and not consumer_ok:
                continue
            label = f"layer {i + 1}" + (f".{k + 1}" if isinstance(unit, Block) else "")
            pending = _reduce_outputs(sub, cfg, rng, out, f"{label} {sub.describe()}")
    return out


def stack_bytes(layers: list[Layer]) -> int:
    return BYTES_PER_PARAM * sum(layer.param_count for layer in layers)


def downstream_bytes(original: list[Layer], sparsified: SparsifiedStack) -> tuple[int, int]:
    """Frozen-stack download size before and after TOA."""
    return stack_bytes(original), stack_bytes(sparsified.layers)


# -- QSGD -----------------------------------------------------------------

def qsgd_payload_bytes(n: int, bits: int) -> int:
    return 4 + -(-n * (bits + 1) // 8)


def qsgd_quantize(t: np.ndarray, bits: int, rng_seed) -> tuple[np.ndarray, int]:
    """Unbiased stochastic quantization to ``2**bits`` magnitude levels (0 .. 2**bits - 1)."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in 1..16, got {bits}")
    t = np.asarray(t)
    flat = t.astype(np.float64).ravel()
    norm = float(np.linalg.norm(flat))
    if norm == 0:
        return np.zeros_like(t), 4
    levels = (1 << bits) - 1
    rng = np.random.default_rng(rng_seed)
    a = np.abs(flat) / norm * levels
    low = np.floor(a)
    level = low + (rng.random(a.size) < (a - low))
    q = np.float32(norm) * np.sign(flat) * level / levels
    return q.reshape(t.shape).astype(t.dtype), qsgd_payload_bytes(flat.size, bits)


def qsgd_stack(layers: list[Layer], bits: int, rng_seed: int) -> tuple[list[Layer], int]:
    """Quantize every parameter array of a stack; returns the dequantized copy and its payload."""
    rng = np.random.default_rng(rng_seed)
    out, total = [], 0
    for layer in layers:
        new = copy.deepcopy(layer)
        new.clear_cache()
        new.clear_grads()
        params = []
        for p in new.params:
            q, nbytes = qsgd_quantize(p, bits, rng.integers(1 << 63))
            params.append(q.astype(DTYPE))
            total += nbytes
        new.params = params
        out.append(new)
    return out, total


def match_qsgd_bits(target_bytes: int, layers: list[Layer]) -> tuple[int, int]:
    """Bit width whose QSGD payload for ``layers`` is closest to ``target_bytes``."""
    arrays = [p for layer in layers for p in layer.params]
    best = None
    for bits in range(1, 17):
        payload = sum(qsgd_payload_bytes(p.size, bits) if np.any(p) else 4 for p in arrays)
        gap = abs(payload - target_bytes)
        if best is None or gap < best[2]:
            best = (bits, payload, gap)
    return best[0], best[1]
