"""Train FedAvg, FedOLF, random freezing and FedOLF+TOA on the same skewed blobs
and print final accuracy next to the per-round upload, compute and energy totals."""

import sys

from fedolf import FedConfig, ToaConfig, make_federated, run_federated, synth_blobs
from fedolf.nn import mlp

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
arch = mlp([16, 128, 128, 128, 128, 4])
part = make_federated(synth_blobs(2000, 16, 4, 1.0, seed), 10, "dirichlet", 0.1, seed)
base = dict(K=10, participants_per_round=5, T=50, E=2, batch_size=16, eta=0.03, seed=seed)
variants = {
    "fedavg": dict(strategy="fedavg", clusters=1, freeze_levels=[0]),
    "fedolf": {},
    "random_freeze": dict(strategy="random_freeze"),
    "fedolf+toa(0.75)": dict(toa=ToaConfig(0.75, seed)),
}

print(f"{'strategy':<18}{'accuracy':>9}{'MB up':>9}{'GFLOP':>9}{'joules':>9}")
for name, kw in variants.items():
    h = run_federated(FedConfig(**base, **kw), part, arch)
    up = sum(r.bytes_up for r in h.rounds) / 1e6
    gflop = sum(r.flops for r in h.rounds) / 1e9
    print(f"{name:<18}{h.rounds[-1].accuracy:>9.3f}{up:>9.2f}{gflop:>9.1f}{sum(r.joules for r in h.rounds):>9.1f}")
