"""Empirical convergence constants, the two error-floor formulas, and linear CKA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DatasetShard
from .nn import Layer, Model

SMALL_STEP, LARGE_STEP, INVALID = "small_step", "large_step", "invalid"


@dataclass(frozen=True)
class ConvergenceConstants:
    L_hat: float
    gamma_hat: float
    D_hat: float

    def __post_init__(self) -> None:
        if min(self.L_hat, self.gamma_hat, self.D_hat) < 0:
            raise ValueError("convergence constants are non-negative")


def full_gradient(model: Model, shard: DatasetShard, freeze_index: int = 0) -> np.ndarray:
    """Mean-loss gradient over the whole shard, zero on frozen coordinates (float64)."""
    m = model.copy()
    m.freeze_index = freeze_index
    x = shard.features.reshape((len(shard),) + m.input_shape)
    m.backward(m.forward(x, training=True), shard.labels)
    g = m.flat_grads(zero_missing=True)
    m.clear_caches()
    return g


def gradient_divergence(model: Model, shard: DatasetShard, l_k: int) -> float:
    """``||grad f - grad f'||`` between full and truncated backprop (frozen part zero-padded)."""
    if l_k == 0:
        return 0.0
    full = full_gradient(model, shard, 0)
    frozen = full_gradient(model, shard, l_k)
    return float(np.linalg.norm(full - frozen))


def estimate_gamma(clients, model: Model) -> float:
    """Square root of the ``n_k``-weighted mean squared deviation of client gradients."""
    if len(clients) < 2:
        raise ValueError("need at least two clients")
    grads = np.stack([full_gradient(model, c.shard) for c in clients])
    w = np.array([c.n_k for c in clients], dtype=np.float64)
    w /= w.sum()
    mean = w @ grads
    dev = ((grads - mean) ** 2).sum(axis=1)
    return float(math.sqrt(w @ dev))


def lipschitz_ratios(grad_fn, w0: np.ndarray, trials: int, seed: int, scale: float = 0.1) -> list[float]:
    """Running max of ``||g(w1) - g(w2)|| / ||w1 - w2||`` over seeded perturbation pairs."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    w0 = np.asarray(w0, dtype=np.float64)
    best, out = 0.0, []
    for _ in range(trials):
        w1 = w0 + scale * rng.normal(size=w0.shape)
        w2 = w0 + scale * rng.normal(size=w0.shape)
        gap = np.linalg.norm(w1 - w2)
        if gap > 0:  # a duplicate pair says nothing about L
            best = max(best, float(np.linalg.norm(grad_fn(w1) - grad_fn(w2)) / gap))
        out.append(best)
    return out


def estimate_L(model: Model, shard: DatasetShard, trials: int, seed: int, scale: float = 0.1) -> float:
    """Sampled lower bound on the smoothness constant of the shard loss around ``model``."""
    probe = model.astype(np.float64)

    def grad_fn(w):
        probe.set_flat_params(w)
        return full_gradient(probe, shard)

    return lipschitz_ratios(grad_fn, model.flat_params(), trials, seed, scale)[-1]


def epsilon_small_step(D: float, gamma: float) -> float:
    return D + gamma


def epsilon_large_step(eta: float, L: float, gamma: float, D: float) -> float | None:
    """Closed-form floor for ``1/L < eta < 3/(2L)``; ``None`` when the radicand is negative."""
    el = eta * L
    rad = el * D * D + 8 * el * gamma ** 2 + 6 * el * D * gamma + D * D - 3 * gamma ** 2
    if rad < 0:
        return None
    return (D * (el - 1) + math.sqrt(rad)) / (3 - 2 * el)


def epsilon_quadratic_root(eta: float, L: float, gamma: float, D: float) -> float | None:
    """Root of ``a x^2 + b x + c`` with ``a = 2 eta L - 3``, ``b = 2 D (eta L - 1)``,
    ``c = 2 eta L gamma^2 - gamma^2 + eta L D^2 + 2 eta L D gamma``.

    The closed form in :func:`epsilon_large_step` is presented as a
    simplification of this root; the two differ by ``-(eta L)^2 (D + 2 gamma)^2``
    under the square root, so this one is always the smaller floor.
    """
    el = eta * L
    a, b = 2 * el - 3, 2 * D * (el - 1)
    c = 2 * el * gamma ** 2 - gamma ** 2 + el * D * D + 2 * el * D * gamma
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    return (-b - math.sqrt(disc)) / (2 * a)


def epsilon_bounds(eta: float, L: float, gamma: float, D: float) -> tuple[float, str]:
    """The error floor and which step-size regime produced it (``nan`` when invalid)."""
    if eta <= 0 or min(L, gamma, D) < 0:
        raise ValueError("need eta > 0 and non-negative L, gamma, D")
    el = eta * L
    if el <= 1:
        return epsilon_small_step(D, gamma), SMALL_STEP
    if el >= 1.5:
        return float("nan"), INVALID
    eps = epsilon_large_step(eta, L, gamma, D)
    return (float("nan"), INVALID) if eps is None else (eps, LARGE_STEP)


def linear_cka(X: np.ndarray, Y: np.ndarray) -> float:
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} vs {Y.shape[0]} samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    denom = np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / denom)


def stack_output(layers: list[Layer], x: np.ndarray) -> np.ndarray:
    for layer in layers:
        layer.clear_cache()
        x = layer.forward(x, cache=False)
    return x


def representation_gap(stale: list[Layer], fresh: list[Layer], x: np.ndarray) -> float:
    """Norm between the boundary representations two bottom stacks produce for ``x``."""
    a = stack_output(stale, x).astype(np.float64)
    b = stack_output(fresh, x).astype(np.float64)
    return float(np.linalg.norm(a - b))


def diagnostics_table(model: Model, clients, levels, eta: float, L_trials: int = 5,
                      seed: int = 0) -> list[dict]:
    """One row per freeze level: L_hat, gamma_hat, the largest client divergence D_hat, and the floor."""
    pooled = DatasetShard(np.concatenate([c.shard.features for c in clients]),
                          np.concatenate([c.shard.labels for c in clients]),
                          clients[0].shard.class_count)
    L_hat = estimate_L(model, pooled, L_trials, seed)
    gamma_hat = estimate_gamma(clients, model)
    rows = []
    for l_k in sorted(set(int(v) for v in levels)):
        D_hat = max(gradient_divergence(model, c.shard, l_k) for c in clients)
        eps, regime = epsilon_bounds(eta, L_hat, gamma_hat, D_hat)
        rows.append(dict(l_k=l_k, L_hat=L_hat, gamma_hat=gamma_hat, D_hat=D_hat,
                         eta=eta, epsilon=eps, regime=regime))
    return rows
