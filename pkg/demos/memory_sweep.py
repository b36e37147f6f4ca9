"""Training memory of the 20-layer residual preset at batch 128 as more bottom units
are frozen, in ordered mode and in the worst case for random freezing."""

from fedolf.costmodel import ORDERED, RANDOM_WORST_CASE, theoretical_memory
from fedolf.nn import build_model, resnet_like

model = build_model(resnet_like(20), 0)
full = theoretical_memory(model, 0, 128)
print(f"{'frozen units':>12}{'ordered MB':>12}{'ratio':>8}{'random MB':>11}{'ratio':>8}")
for l_k in range(model.n_layers):
    o = theoretical_memory(model, l_k, 128, ORDERED)
    r = theoretical_memory(model, l_k, 128, RANDOM_WORST_CASE)
    print(f"{l_k:>12}{o / 2**20:>12.1f}{o / full:>8.1%}{r / 2**20:>11.1f}{r / full:>8.1%}")
