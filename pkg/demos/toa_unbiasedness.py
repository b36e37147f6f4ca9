"""Monte-Carlo check that a sparsified linear stack is an unbiased estimate of the
dense one: relative error of the running mean should shrink like 1/sqrt(N)."""

import numpy as np

from fedolf import ToaConfig, sparsify_frozen_stack
from fedolf.nn import ArchitectureSpec, build_layers


def run(layers, x):
    for layer in layers:
        x = layer.forward(x)
    return x


dims = [16, 64, 64, 10]
stack = build_layers(ArchitectureSpec([{"kind": "dense", "in": a, "out": b}
                                       for a, b in zip(dims[:-1], dims[1:])]), 0)
x = np.random.default_rng(100).normal(size=(8, 16)).astype(np.float32)
exact = run(stack, x).astype(np.float64)

for s in (0.25, 0.5, 0.75):
    acc, line = np.zeros_like(exact), []
    for k in range(1, 40_001):
        acc += run(sparsify_frozen_stack(stack, ToaConfig(s, k)).layers, x)
        if k in (1_000, 10_000, 40_000):
            line.append(f"N={k}: {np.linalg.norm(acc / k - exact) / np.linalg.norm(exact):.2%}")
    print(f"s={s}  " + "  ".join(line))
