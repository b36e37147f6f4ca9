import math
from decimal import Decimal, localcontext

import numpy as np
import pytest

from fedolf.data import DatasetShard, dirichlet_partition, iid_partition, synth_blobs
from fedolf.diagnostics import (INVALID, LARGE_STEP, SMALL_STEP, ConvergenceConstants,
                                diagnostics_table, epsilon_bounds, epsilon_quadratic_root,
                                estimate_gamma, estimate_L,
                                full_gradient, gradient_divergence, linear_cka, lipschitz_ratios,
                                representation_gap)
from fedolf.federation import ClientRecord
from fedolf.nn import Dense, Model, build_model, mlp

ARCH = mlp([5, 8, 8, 8, 3])


def eps1_decimal(eta, L, gamma, D):
    """The large-step closed form evaluated term by term in 50-digit decimal arithmetic."""
    with localcontext() as ctx:
        ctx.prec = 50
        eta, L, g, D = (Decimal(float(v)) for v in (eta, L, gamma, D))
        rad = eta * D * D * L + 8 * eta * L * g * g + 6 * eta * D * L * g + D * D - 3 * g * g
        return float((D * (eta * L - 1) + rad.sqrt()) / (3 - 2 * eta * L))


class TestEpsilon:
    def test_small_step(self):
        assert epsilon_bounds(0.1, 2.0, 1.5, 0.5) == (2.0, SMALL_STEP)
        assert epsilon_bounds(0.5, 2.0, 1.5, 0.5) == (2.0, SMALL_STEP)

    def test_zero_noise(self):
        assert epsilon_bounds(0.1, 2.0, 0.0, 0.0) == (0.0, SMALL_STEP)
        assert epsilon_bounds(0.6, 2.0, 0.0, 0.0) == (0.0, LARGE_STEP)

    def test_worked_case(self):
        eps, regime = epsilon_bounds(1.2 / 2, 2.0, 1.0, 1.0)
        assert regime == LARGE_STEP
        # radicand 1.2 + 9.6 + 7.2 + 1 - 3 = 16, numerator 0.2 + 4, denominator 0.6
        assert eps == pytest.approx(4.2 / 0.6, abs=1e-12)
        assert eps == pytest.approx(eps1_decimal(0.6, 2.0, 1.0, 1.0), abs=1e-12)

    def test_independent_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 100:
            L = rng.uniform(0.1, 10)
            eta = rng.uniform(1.0001, 1.4999) / L
            gamma, D = rng.uniform(0, 5, 2)
            eps, regime = epsilon_bounds(eta, L, gamma, D)
            if regime != LARGE_STEP:
                continue
            assert abs(eps - eps1_decimal(eta, L, gamma, D)) <= 1e-9
            checked += 1

    def test_invalid(self):
        eps, regime = epsilon_bounds(1.5, 1.0, 1.0, 1.0)
        assert regime == INVALID and math.isnan(eps)
        assert epsilon_bounds(3.0, 1.0, 1.0, 1.0)[1] == INVALID
        with pytest.raises(ValueError):
            epsilon_bounds(0.0, 1.0, 1.0, 1.0)

    def test_quadratic_root_is_lower(self):
        # worked case: a = -0.6, b = 0.4, c = 2.4 - 1 + 1.2 + 2.4 = 5
        root = epsilon_quadratic_root(0.6, 2.0, 1.0, 1.0)
        assert root == pytest.approx((-0.4 - math.sqrt(0.16 + 12.0)) / -1.2, abs=1e-12)
        assert root < epsilon_bounds(0.6, 2.0, 1.0, 1.0)[0]

    def test_continuity_at_boundary(self):
        eps, regime = epsilon_bounds(1.0 + 1e-9, 1.0, 1.5, 0.5)
        assert regime == LARGE_STEP and math.isfinite(eps)


class TestCka:
    def test_self(self):
        x = np.random.default_rng(0).normal(size=(50, 6))
        assert linear_cka(x, x) == pytest.approx(1.0)
        assert linear_cka(x, 3 * x) == pytest.approx(1.0)

    def test_orthogonal(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.normal(size=(40, 40)))
        x, y = q[:, :5], q[:, 5:10]
        x, y = x - x.mean(0), y - y.mean(0)
        assert linear_cka(x, y) < 0.05

    def test_zero_variance(self):
        assert linear_cka(np.ones((10, 3)), np.random.default_rng(0).normal(size=(10, 2))) == 0.0

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = linear_cka(rng.normal(size=(30, 4)), rng.normal(size=(30, 7)))
            assert 0.0 <= v <= 1.0


class TestDivergence:
    def test_zero(self):
        m = build_model(ARCH, 0)
        assert gradient_divergence(m, synth_blobs(30, 5, 3, 1.0, 0), 0) == 0.0

    def test_equals_frozen_gradient_norm(self):
        m = build_model(ARCH, 1)
        shard = synth_blobs(40, 5, 3, 1.0, 1)
        full = m.copy()
        full.backward(full.forward(shard.features, True), shard.labels)
        for l_k in (1, 2, 3):
            frozen_grads = [g for layer in full.layers[:l_k] for g in layer.grads]
            want = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in frozen_grads))
            assert gradient_divergence(m, shard, l_k) == pytest.approx(want, rel=1e-12)

    def test_zero_padding(self):
        m = build_model(ARCH, 2)
        shard = synth_blobs(20, 5, 3, 1.0, 2)
        g = full_gradient(m, shard, 2)
        n_frozen = sum(layer.param_count for layer in m.layers[:2])
        assert g.size == m.param_count and not g[:n_frozen].any()


def one_dense_model():
    return Model([Dense(np.zeros((2, 1), np.float32), np.zeros(2, np.float32))], (1,))


class TestGamma:
    def test_identical(self):
        shard = synth_blobs(30, 5, 3, 1.0, 0)
        clients = [ClientRecord(k, shard, 0) for k in range(3)]
        assert estimate_gamma(clients, build_model(ARCH, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed(self):
        # zero weights: softmax = (1/2, 1/2); gradient rows are (p - onehot) * x and p - onehot
        a = ClientRecord(0, DatasetShard(np.array([[1.0]]), [0], 2), 0)  # W grad (-.5, .5), b grad (-.5, .5)
        b = ClientRecord(1, DatasetShard(np.array([[2.0]]), [1], 2), 0)  # W grad (1, -1),  b grad (.5, -.5)
        # mean (.25, -.25, 0, 0); each client deviates by .75^2 * 2 + .5^2 * 2 = 1.625
        assert estimate_gamma([a, b], one_dense_model()) == pytest.approx(math.sqrt(1.625), rel=1e-7)

    def test_iid_smaller_than_skewed(self):
        wins = 0
        for seed in range(10):
            shard = synth_blobs(300, 5, 3, 1.0, seed)
            m = build_model(ARCH, seed)
            g = []
            for part in (iid_partition(shard, 6, seed), dirichlet_partition(shard, 6, 0.1, seed)):
                g.append(estimate_gamma([ClientRecord(k, s, 0) for k, s in enumerate(part.shards)], m))
            wins += g[0] < g[1]
        assert wins == 10

    def test_needs_two(self):
        with pytest.raises(ValueError):
            estimate_gamma([ClientRecord(0, synth_blobs(5, 5, 3, 1.0, 0), 0)], build_model(ARCH, 0))


class TestL:
    A = np.array([[3.0, 1.0], [1.0, 2.0]])

    def test_quadratic_eigenvalue(self):
        top = np.linalg.eigvalsh(self.A).max()
        ratios = lipschitz_ratios(lambda w: self.A @ w, np.zeros(2), 2000, 0)
        assert ratios[-1] <= top + 1e-12
        assert ratios[-1] >= 0.99 * top
        assert ratios[9] <= ratios[-1]

    def test_running_max(self):
        ratios = lipschitz_ratios(lambda w: self.A @ w, np.zeros(2), 50, 1)
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))

    def test_duplicate_pairs_skipped(self):
        assert lipschitz_ratios(lambda w: self.A @ w, np.zeros(2), 5, 0, scale=0.0) == [0.0] * 5

    def test_model(self):
        m = build_model(ARCH, 0)
        shard = synth_blobs(30, 5, 3, 1.0, 0)
        a = estimate_L(m, shard, 3, 7)
        assert a > 0 and a == estimate_L(m, shard, 3, 7)

    def test_bad_trials(self):
        with pytest.raises(ValueError):
            lipschitz_ratios(lambda w: w, np.zeros(1), 0, 0)


def test_representation_gap():
    m = build_model(ARCH, 0)
    other = build_model(ARCH, 1)
    x = synth_blobs(10, 5, 3, 1.0, 0).features
    assert representation_gap(m.layers[:2], m.layers[:2], x) == 0.0
    assert representation_gap(m.layers[:2], other.layers[:2], x) > 0


def test_table_and_constants():
    shard = synth_blobs(120, 5, 3, 1.0, 0)
    part = dirichlet_partition(shard, 4, 0.5, 0)
    clients = [ClientRecord(k, s, 0) for k, s in enumerate(part.shards)]
    rows = diagnostics_table(build_model(ARCH, 0), clients, [2, 0, 1], eta=0.05, L_trials=2)
    assert [r["l_k"] for r in rows] == [0, 1, 2]
    assert rows[0]["D_hat"] == 0.0
    for r in rows:
        ConvergenceConstants(r["L_hat"], r["gamma_hat"], r["D_hat"])
    with pytest.raises(ValueError):
        ConvergenceConstants(-1.0, 0.0, 0.0)
