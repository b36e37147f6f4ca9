"""Analytical memory, FLOP, traffic and energy accounting.

Training memory of one client follows the weights + gradients + activation
maps decomposition. Every unit keeps its weights; only trained units hold
gradients (same size as their weights) and stored activation maps (batch x
per-sample output elements x 4 bytes). Under ordered freezing everything
below the boundary is therefore free of gradients and activations. Under
random freezing the worst case has the bottom unit active, so backprop runs
through the whole network and every unit's activations must be kept.

FLOPs are ``2 x MACs`` per sample; only Dense and Conv2D contribute. The
backward pass of a trained unit costs twice its forward (input-gradient and
weight-gradient passes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .nn import ArchitectureSpec, Model, build_model
from .toa import BYTES_PER_PARAM, ToaConfig, sparsify_frozen_stack, stack_bytes

ORDERED = "ordered"
RANDOM_WORST_CASE = "random_worst_case"


@dataclass(frozen=True)
class EnergyParams:
    joules_per_gflop: float = 1.0
    joules_per_megabyte: float = 0.5

    def __post_init__(self) -> None:
        if self.joules_per_gflop <= 0 or self.joules_per_megabyte <= 0:
            raise ValueError("energy rates must be positive")

    def joules(self, flops: float, nbytes: float) -> float:
        return flops / 1e9 * self.joules_per_gflop + nbytes / 1e6 * self.joules_per_megabyte


@dataclass
class LayerCost:
    weight_bytes: int
    activation_elements: int  # per sample
    macs: int  # per sample


def layer_costs(model: Model) -> list[LayerCost]:
    out = []
    for layer, shape in zip(model.layers, model.layer_input_shapes()):
        out.append(LayerCost(layer.param_count * BYTES_PER_PARAM,
                             layer.activation_elements(shape), layer.macs(shape)))
    return out


def theoretical_memory(model: Model, l_k: int, batch: int, mode: str = ORDERED) -> int:
    """Bytes of weights, gradients and activation maps for training with ``l_k`` frozen units."""
    costs = layer_costs(model)
    n = len(costs)
    if not 0 <= l_k < n:
        raise ValueError(f"l_k must lie in [0, {n - 1}]")
    weights = sum(c.weight_bytes for c in costs)
    am = [batch * c.activation_elements * BYTES_PER_PARAM for c in costs]
    if mode == ORDERED:
        return weights + sum(costs[q].weight_bytes + am[q] for q in range(l_k, n))
    if mode == RANDOM_WORST_CASE:
        if l_k == 0:
            return theoretical_memory(model, 0, batch, ORDERED)
        # bottom unit active; the other active units are the ones with the most gradient bytes
        rest = sorted((c.weight_bytes for c in costs[1:]), reverse=True)[:n - l_k - 1]
        return weights + sum(am) + costs[0].weight_bytes + sum(rest)
    raise ValueError(f"unknown memory mode {mode!r}")


def random_freeze_memory(model: Model, frozen: set[int], batch: int) -> int:
    """Memory for one concrete random-freezing draw (backprop reaches the lowest active unit)."""
    costs = layer_costs(model)
    active = [q for q in range(len(costs)) if q not in frozen]
    lo = min(active)
    weights = sum(c.weight_bytes for c in costs)
    grads = sum(costs[q].weight_bytes for q in active)
    am = sum(batch * costs[q].activation_elements * BYTES_PER_PARAM for q in range(lo, len(costs)))
    return weights + grads + am


def flops_estimate(model: Model, l_k: int, batch: int,
                   frozen: set[int] | None = None) -> tuple[int, int]:
    """(forward, backward) FLOPs for one pass over ``batch`` samples.

    With ``frozen`` given (random freezing), frozen units between the lowest
    active unit and the top still pay one input-gradient pass.
    """
    costs = layer_costs(model)
    fwd = [2 * c.macs * batch for c in costs]
    if frozen is None:
        return sum(fwd), sum(2 * fwd[q] for q in range(l_k, len(costs)))
    lo = min(q for q in range(len(costs)) if q not in frozen)
    back = sum(fwd[q] * (1 if q in frozen else 2) for q in range(lo, len(costs)))
    return sum(fwd), back


def round_bytes(plan, arch: ArchitectureSpec, seed: int = 0) -> tuple[int, int]:
    """Total (down, up) bytes for one round given per-client ``(l_k, s)`` pairs.

    ``s`` of ``None`` or 1 means no TOA; TOA only applies for ``l_k >= 2``.
    """
    model = build_model(arch, seed)
    down = up = 0
    for k, (l_k, s) in enumerate(plan):
        frozen, active = model.layers[:l_k], model.layers[l_k:]
        if s is not None and s < 1 and l_k >= 2:
            frozen = sparsify_frozen_stack(frozen, ToaConfig(s, seed + k)).layers
        down += stack_bytes(frozen) + stack_bytes(active)
        up += stack_bytes(active)
    return down, up


@dataclass
class CostEntry:
    round: int
    client_id: int
    l_k: int
    mem_bytes_theoretical: int
    flops_forward: int
    flops_backward: int
    bytes_down: int
    bytes_up: int
    energy_joules_modeled: float = 0.0

    @property
    def flops(self) -> int:
        return self.flops_forward + self.flops_backward


@dataclass
class CostLedger:
    energy_params: EnergyParams = field(default_factory=EnergyParams)
    entries: list[CostEntry] = field(default_factory=list)

    def add(self, entry: CostEntry) -> CostEntry:
        for name in ("mem_bytes_theoretical", "flops_forward", "flops_backward", "bytes_down", "bytes_up"):
            if getattr(entry, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        entry.energy_joules_modeled = self.energy_params.joules(
            entry.flops, entry.bytes_down + entry.bytes_up)
        self.entries.append(entry)
        return entry

    def round_entries(self, t: int) -> list[CostEntry]:
        return [e for e in self.entries if e.round == t]

    def round_totals(self, t: int) -> dict[str, float]:
        es = self.round_entries(t)
        return {
            "bytes_down": sum(e.bytes_down for e in es),
            "bytes_up": sum(e.bytes_up for e in es),
            "flops": sum(e.flops for e in es),
            "joules": sum(e.energy_joules_modeled for e in es),
        }

    @property
    def rounds(self) -> list[int]:
        return sorted({e.round for e in self.entries})


def energy(ledger: CostLedger, p: EnergyParams | None = None) -> tuple[list[float], list[float]]:
    """Per-round and cumulative modeled joules (recomputed from raw FLOPs and bytes)."""
    p = p or ledger.energy_params
    per_round, cumulative, total = [], [], 0.0
    for t in ledger.rounds:
        joules = sum(p.joules(e.flops, e.bytes_down + e.bytes_up) for e in ledger.round_entries(t))
        total += joules
        per_round.append(joules)
        cumulative.append(total)
    return per_round, cumulative
