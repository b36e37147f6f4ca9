import numpy as np
import pytest

from fedolf.costmodel import (ORDERED, RANDOM_WORST_CASE, CostEntry, CostLedger, EnergyParams,
                              energy, flops_estimate, layer_costs, random_freeze_memory,
                              round_bytes, theoretical_memory)
from fedolf.nn import ArchitectureSpec, alexnet_like, build_model, mlp, resnet_like, small_cnn
from fedolf.toa import ToaConfig, downstream_bytes, sparsify_frozen_stack

# small_cnn((1, 8, 8), 3), counted by hand per unit:
#   conv 1->8 3x3 pad 1 on 8x8: 64 positions * 8 out * 9 taps = 4608 MACs;
#       outputs conv 512 + relu 512 + pool 128 = 1152; params 8*9 + 8 = 80
#   conv 8->16 on 4x4: 16 * 16 * 72 = 18432 MACs; outputs 256 + 256 + 64 = 576; params 1168
#   flatten + dense 64->64 + relu: 4096 MACs; outputs 64 + 64 = 128; params 4160
#   dense 64->3: 192 MACs; outputs 3; params 195
HAND_MACS = [4608, 18432, 4096, 192]
HAND_AM = [1152, 576, 128, 3]
HAND_PARAMS = [80, 1168, 4160, 195]


@pytest.fixture(scope="module")
def cnn():
    return build_model(small_cnn((1, 8, 8), 3), 0)


@pytest.fixture(scope="module")
def resnet():
    return build_model(resnet_like(20), 0)


class TestFlops:
    def test_dense(self):
        m = build_model(ArchitectureSpec([{"kind": "dense", "in": 7, "out": 5}]), 0)
        assert flops_estimate(m, 0, 3) == (2 * 7 * 5 * 3, 2 * 2 * 7 * 5 * 3)

    def test_hand_count(self, cnn):
        costs = layer_costs(cnn)
        assert [c.macs for c in costs] == HAND_MACS
        assert [c.activation_elements for c in costs] == HAND_AM
        assert [c.weight_bytes for c in costs] == [4 * p for p in HAND_PARAMS]
        fwd, back = flops_estimate(cnn, 1, 10)
        assert fwd == 2 * 10 * sum(HAND_MACS)
        assert back == 2 * 2 * 10 * sum(HAND_MACS[1:])

    def test_last_layer_only(self, cnn):
        assert flops_estimate(cnn, 3, 1)[1] == 2 * 2 * HAND_MACS[3]

    def test_random_freeze_pays_input_grads(self, cnn):
        fwd, back = flops_estimate(cnn, 0, 1, frozen={1, 2})
        assert back == 2 * (2 * HAND_MACS[0] + HAND_MACS[1] + HAND_MACS[2] + 2 * HAND_MACS[3])


class TestMemory:
    def test_no_freezing(self, cnn):
        assert theoretical_memory(cnn, 0, 8, ORDERED) == theoretical_memory(cnn, 0, 8, RANDOM_WORST_CASE)
        want = 2 * 4 * sum(HAND_PARAMS) + 8 * 4 * sum(HAND_AM)
        assert theoretical_memory(cnn, 0, 8) == want

    def test_minimum(self, cnn):
        want = 4 * sum(HAND_PARAMS) + 4 * HAND_PARAMS[3] + 8 * 4 * HAND_AM[3]
        assert theoretical_memory(cnn, 3, 8) == want

    def test_worst_case_by_hand(self, cnn):
        # two frozen: active bottom unit plus the unit with the most weights
        want = 4 * sum(HAND_PARAMS) + 8 * 4 * sum(HAND_AM) + 4 * (HAND_PARAMS[0] + HAND_PARAMS[2])
        assert theoretical_memory(cnn, 2, 8, RANDOM_WORST_CASE) == want

    def test_worst_case_bounds_every_draw(self, cnn):
        import itertools
        for l_k in range(1, 4):
            worst = theoretical_memory(cnn, l_k, 8, RANDOM_WORST_CASE)
            draws = [random_freeze_memory(cnn, set(f), 8) for f in itertools.combinations(range(4), l_k)]
            assert max(draws) == worst

    def test_resnet_sweep(self, resnet):
        ordered = [theoretical_memory(resnet, l, 128, ORDERED) for l in range(resnet.n_layers)]
        worst = [theoretical_memory(resnet, l, 128, RANDOM_WORST_CASE) for l in range(resnet.n_layers)]
        assert all(a > b for a, b in zip(ordered, ordered[1:]))
        assert all(o < w for o, w in zip(ordered[1:], worst[1:]))
        assert min(worst) / worst[0] > 0.95

    def test_activation_dominance(self, resnet):
        am = sum(128 * 4 * c.activation_elements for c in layer_costs(resnet))
        assert am / theoretical_memory(resnet, 0, 128) >= 0.8

    def test_errors(self, cnn):
        with pytest.raises(ValueError):
            theoretical_memory(cnn, 4, 1)
        with pytest.raises(ValueError):
            theoretical_memory(cnn, 1, 1, "bogus")


class TestRoundBytes:
    def test_symmetric_without_freezing(self):
        arch = mlp([4, 8, 3])
        full = 4 * build_model(arch, 0).param_count
        assert round_bytes([(0, None)] * 3, arch) == (3 * full, 3 * full)

    def test_last_layer_upload(self):
        arch = mlp([4, 8, 8, 3])
        assert round_bytes([(2, 1.0)], arch)[1] == 4 * (8 * 3 + 3)

    def test_matches_toa_bytes(self):
        arch = alexnet_like((3, 16, 16), width=4, hidden=32)
        m = build_model(arch, 0)
        frozen = m.layers[:4]
        before, after = downstream_bytes(frozen, sparsify_frozen_stack(frozen, ToaConfig(0.5, 0)))
        active = 4 * sum(u.param_count for u in m.layers[4:])
        assert round_bytes([(4, 0.5)], arch) == (after + active, active)
        assert round_bytes([(4, 1.0)], arch) == (before + active, active)


class TestEnergy:
    def test_zero(self):
        led = CostLedger()
        led.add(CostEntry(0, 0, 0, 0, 0, 0, 0, 0))
        assert energy(led) == ([0.0], [0.0])

    def test_linear(self):
        led = CostLedger()
        led.add(CostEntry(0, 0, 0, 10, 2e9, 1e9, 3e6, 1e6))
        led.add(CostEntry(1, 0, 0, 10, 1e9, 0, 0, 2e6))
        per, cum = energy(led)
        assert per == [3.0 + 2.0, 1.0 + 1.0] and cum == [5.0, 7.0]
        per2, _ = energy(led, EnergyParams(2.0, 1.0))
        assert per2 == [2 * p for p in per]

    def test_entry_energy_and_totals(self):
        led = CostLedger(EnergyParams(1.0, 0.5))
        e = led.add(CostEntry(0, 1, 0, 10, 1e9, 0, 1e6, 1e6))
        assert e.energy_joules_modeled == 2.0
        assert led.round_totals(0)["joules"] == 2.0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            CostLedger().add(CostEntry(0, 0, 0, -1, 0, 0, 0, 0))
        with pytest.raises(ValueError):
            EnergyParams(0.0, 1.0)
