"""Round orchestration: decompose, train locally, upload active layers, aggregate per layer.

Every random draw is keyed by ``(seed, round, client id)`` and aggregation
walks clients in ascending id, so a run is bit-reproducible no matter in
which order clients are simulated.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .costmodel import (ORDERED, CostEntry, CostLedger, EnergyParams, flops_estimate,
                        random_freeze_memory, theoretical_memory)
from .data import DatasetShard, PartitionedDataset
from .nn import ArchitectureSpec, Layer, Model, build_model, evaluate
from .toa import (SparsifiedStack, ToaConfig, qsgd_stack, sparsify_frozen_stack,
                  stack_bytes)

STRATEGIES = ("fedolf", "fedavg", "random_freeze")

# stream tags keep the seeded generators of different purposes apart
_CLUSTER, _SAMPLE, _CLIENT, _TOA, _RANDOM_FREEZE, _QSGD = 0xC1, 0x5A, 0xC7, 0x70A, 0xF2, 0x95


@dataclass
class ClientRecord:
    id: int
    shard: DatasetShard
    l_k: int

    @property
    def n_k(self) -> int:
        return len(self.shard)


@dataclass
class FedConfig:
    K: int = 10
    participants_per_round: int = 5
    T: int = 50
    E: int = 2
    eta: float = 0.05
    batch_size: int = 16
    clusters: int = 5
    freeze_levels: list[int] = field(default_factory=lambda: [4, 3, 2, 1, 0])
    strategy: str = "fedolf"
    toa: ToaConfig | None = None
    qsgd_bits: int | None = None  # quantize frozen stacks instead (comparison baseline)
    seed: int = 0
    energy: EnergyParams = field(default_factory=EnergyParams)

    def __post_init__(self) -> None:
        self.freeze_levels = [int(v) for v in self.freeze_levels]
        if self.K < 1:
            raise ValueError("K must be positive")
        if not 1 <= self.participants_per_round <= self.K:
            raise ValueError(f"participants_per_round must lie in [1, K={self.K}]")
        if self.T < 0 or self.E < 0:
            raise ValueError("T and E must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(self.freeze_levels) != self.clusters:
            raise ValueError(f"freeze_levels has {len(self.freeze_levels)} entries for {self.clusters} clusters")
        if any(v < 0 for v in self.freeze_levels):
            raise ValueError("freeze_levels must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fedavg" and any(self.freeze_levels):
            raise ValueError("strategy fedavg needs every freeze level to be 0")
        if self.toa is not None and self.qsgd_bits is not None:
            raise ValueError("choose TOA or QSGD compression, not both")
        if self.strategy == "random_freeze" and (self.toa is not None or self.qsgd_bits is not None):
            raise ValueError("random_freeze has no contiguous frozen stack to compress")


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    train_loss: dict[int, float]
    accuracy: float
    loss: float
    bytes_down: int
    bytes_up: int
    flops: int
    joules: float


@dataclass
class RoundHistory:
    rounds: list[RoundRecord] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    clients: list[ClientRecord] = field(default_factory=list)
    model: Model | None = None

    def __len__(self) -> int:
        return len(self.rounds)

    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rounds]


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def assign_capacity_clusters(K: int, c: int, freeze_levels, rng_seed: int) -> list[int]:
    """Seeded permutation of the clients dealt round-robin onto ``c`` freeze levels."""
    if c < 1 or c > K:
        raise ValueError(f"cannot form {c} clusters from {K} clients")
    if len(freeze_levels) != c:
        raise ValueError(f"{len(freeze_levels)} freeze levels for {c} clusters")
    perm = np.random.default_rng([rng_seed, _CLUSTER]).permutation(K)
    levels = [0] * K
    for slot, k in enumerate(perm):
        levels[int(k)] = int(freeze_levels[slot % c])
    return levels


def sample_participants(clients, m: int, round: int, seed: int) -> list[int]:
    """Uniform sample without replacement, sorted by id."""
    ids = sorted(c.id if isinstance(c, ClientRecord) else int(c) for c in clients)
    if m > len(ids):
        raise ValueError(f"cannot sample {m} of {len(ids)} clients")
    rng = np.random.default_rng([seed, round, _SAMPLE])
    picked = rng.choice(len(ids), size=m, replace=False)
    return sorted(ids[i] for i in picked)


def decompose_model(model: Model, l_k: int) -> tuple[list[Layer], list[Layer]]:
    if not 0 <= l_k < model.n_layers:
        raise ValueError(f"l_k must lie in [0, {model.n_layers - 1}], got {l_k}")
    layers = [copy.deepcopy(u) for u in model.layers]
    for u in layers:
        u.clear_cache()
        u.clear_grads()
    return layers[:l_k], layers[l_k:]


def _local_sgd(model: Model, shard: DatasetShard, cfg: FedConfig, rng) -> float:
    """E epochs of shuffled minibatch SGD; returns the sample-weighted mean loss of the last epoch."""
    x = shard.features.reshape((len(shard),) + model.input_shape)
    y = shard.labels
    n = len(shard)
    last = float("nan")
    for _ in range(cfg.E):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out = model.forward(x[idx], training=True)
            total += model.backward(out, y[idx]) * len(idx)
            model.sgd_step(cfg.eta)
        last = total / n
    model.clear_caches()
    return last


def client_update(rec: ClientRecord, frozen, active: list[Layer], cfg: FedConfig,
                  round: int, input_shape: tuple[int, ...] | None = None) -> tuple[list[Layer], float]:
    """Train ``active`` on the client's shard with ``frozen`` held fixed underneath."""
    frozen_layers = frozen.layers if isinstance(frozen, SparsifiedStack) else list(frozen)
    if input_shape is None:
        input_shape = tuple(rec.shard.features.shape[1:])
    model = Model(frozen_layers + list(active), input_shape, freeze_index=len(frozen_layers))
    rng = np.random.default_rng([cfg.seed, round, rec.id, _CLIENT])
    loss = _local_sgd(model, rec.shard, cfg, rng)
    return model.layers[len(frozen_layers):], loss


@dataclass
class Upload:
    client_id: int
    n_k: int
    l_k: int
    layers: list[Layer]  # the trained units, bottom to top
    positions: list[int] | None = None  # global positions of ``layers``; default l_k..N-1


def aggregate_layerwise(model: Model, uploads) -> Model:
    """Per unit, the ``n_k``-weighted mean over the clients that trained it.

    ``uploads`` items are :class:`Upload` or ``(client_id, n_k, l_k, layers)``
    tuples. Units nobody trained keep their previous value bit for bit.
    Sums run in float64 over ascending client id.
    """
    ups = [u if isinstance(u, Upload) else Upload(*u) for u in uploads]
    ups.sort(key=lambda u: u.client_id)
    n = model.n_layers
    contrib: list[list[tuple[int, Layer]]] = [[] for _ in range(n)]
    for u in ups:
        pos = u.positions if u.positions is not None else list(range(u.l_k, n))
        if len(pos) != len(u.layers):
            raise ValueError(f"client {u.client_id} uploaded {len(u.layers)} units for positions {pos}")
        for q, layer in zip(pos, u.layers):
            if not 0 <= q < n:
                raise ValueError(f"client {u.client_id} uploaded unit {q + 1} of a {n}-unit model")
            contrib[q].append((u.n_k, layer))

    out = model.copy()
    for q, items in enumerate(contrib):
        target = out.layers[q]
        if not items or not target.params:
            continue
        total = sum(nk for nk, _ in items)
        new = []
        for j, p in enumerate(target.params):
            acc = np.zeros(p.shape, dtype=np.float64)
            for nk, layer in items:
                w = layer.params[j]
                if w.shape != p.shape:
                    raise ValueError(f"unit {q + 1} parameter {j}: upload shape {w.shape} != {p.shape}")
                acc += (nk / total) * w.astype(np.float64)
            new.append(acc.astype(p.dtype))
        target.params = new
    return out


def _frozen_download(frozen: list[Layer], cfg: FedConfig, round: int, cid: int):
    """The frozen stack as the client receives it, and its byte size."""
    if len(frozen) >= 2 and cfg.toa is not None and cfg.toa.s < 1:
        toa = ToaConfig(cfg.toa.s, _seed(cfg.toa.rng_seed, round, cid, _TOA), cfg.toa.weighting)
        stack = sparsify_frozen_stack(frozen, toa)
        return stack.layers, stack_bytes(stack.layers)
    if len(frozen) >= 2 and cfg.qsgd_bits is not None:
        return qsgd_stack(frozen, cfg.qsgd_bits, _seed(cfg.seed, round, cid, _QSGD))
    return frozen, stack_bytes(frozen)


def random_freeze_positions(n_layers: int, l_k: int, seed: int, cid: int) -> list[int]:
    """A client's frozen positions, drawn once per run like its capacity."""
    rng = np.random.default_rng([seed, cid, _RANDOM_FREEZE])
    return sorted(int(q) for q in rng.choice(n_layers, size=l_k, replace=False))


def run_federated(cfg: FedConfig, data: PartitionedDataset, arch: ArchitectureSpec) -> RoundHistory:
    if len(data.shards) != cfg.K:
        raise ValueError(f"config has K={cfg.K} but the partition has {len(data.shards)} clients")
    model = build_model(arch, cfg.seed)
    n = model.n_layers
    if max(cfg.freeze_levels) >= n:
        raise ValueError(f"freeze level {max(cfg.freeze_levels)} leaves no trainable unit of {n}")
    levels = assign_capacity_clusters(cfg.K, cfg.clusters, cfg.freeze_levels, cfg.seed)
    clients = [ClientRecord(k, shard, levels[k]) for k, shard in enumerate(data.shards)]
    history = RoundHistory(ledger=CostLedger(cfg.energy), clients=clients, model=model)
    holdout = data.holdout if data.holdout is not None and len(data.holdout) else None

    for t in range(cfg.T):
        ids = sample_participants(clients, cfg.participants_per_round, t, cfg.seed)
        uploads, losses = [], {}
        for cid in ids:
            rec = clients[cid]
            samples = cfg.E * rec.n_k
            if cfg.strategy == "random_freeze" and rec.l_k > 0:
                positions = random_freeze_positions(n, rec.l_k, cfg.seed, cid)
                local = model.copy()
                local.freeze(positions)
                rng = np.random.default_rng([cfg.seed, t, cid, _CLIENT])
                losses[cid] = _local_sgd(local, rec.shard, cfg, rng)
                active_pos = [q for q in range(n) if q not in positions]
                trained = [local.layers[q] for q in active_pos]
                uploads.append(Upload(cid, rec.n_k, rec.l_k, trained, active_pos))
                mem = random_freeze_memory(model, set(positions), cfg.batch_size)
                flops = flops_estimate(model, 0, samples, frozen=set(positions))
                down, up = stack_bytes(model.layers), stack_bytes(trained)
            else:
                frozen, active = decompose_model(model, rec.l_k)
                frozen, frozen_bytes = _frozen_download(frozen, cfg, t, cid)
                trained, losses[cid] = client_update(rec, frozen, active, cfg, t, model.input_shape)
                uploads.append(Upload(cid, rec.n_k, rec.l_k, trained))
                client_model = Model(frozen + trained, model.input_shape, freeze_index=rec.l_k)
                mem = theoretical_memory(client_model, rec.l_k, cfg.batch_size, ORDERED)
                flops = flops_estimate(client_model, rec.l_k, samples)
                down, up = frozen_bytes + stack_bytes(trained), stack_bytes(trained)
            history.ledger.add(CostEntry(t, cid, rec.l_k, mem, flops[0], flops[1], down, up))
        model = aggregate_layerwise(model, uploads)
        acc, loss = evaluate(model, _reshaped(holdout, model)) if holdout is not None else (float("nan"),) * 2
        totals = history.ledger.round_totals(t)
        history.rounds.append(RoundRecord(t, ids, losses, acc, loss, totals["bytes_down"],
                                          totals["bytes_up"], totals["flops"], totals["joules"]))
    history.model = model
    return history


def _reshaped(shard: DatasetShard, model: Model) -> DatasetShard:
    if shard.features.shape[1:] == model.input_shape:
        return shard
    x = shard.features.reshape((len(shard),) + model.input_shape)
    return DatasetShard(x, shard.labels, shard.class_count)
