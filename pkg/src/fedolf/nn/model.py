"""The freezable model: an ordered stack of units with a freeze boundary."""

from __future__ import annotations

import copy

import numpy as np

from .arch import ArchitectureSpec, build_layers, chain_shapes
from .layers import DTYPE, Layer, NonFiniteError, ShapeError, check_finite


class Model:
    """Layers ``0..freeze_index-1`` (0-based) are frozen, the rest are trained.

    ``frozen`` may instead name an arbitrary set of frozen positions; this is
    only used by the random-freezing baseline, where backpropagation has to
    travel down to the lowest active layer and pass through frozen layers on
    its way.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...],
                 freeze_index: int = 0) -> None:
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self._frozen: frozenset[int] | None = None
        self.freeze_index = freeze_index

    # -- freezing ----------------------------------------------------------
    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def freeze_index(self) -> int:
        return self._freeze_index

    @freeze_index.setter
    def freeze_index(self, value: int) -> None:
        value = int(value)
        if not 0 <= value < self.n_layers:
            raise ValueError(f"freeze_index must lie in [0, {self.n_layers - 1}], got {value}")
        self._freeze_index = value
        self._frozen = None

    def freeze(self, positions) -> None:
        """Freeze an arbitrary set of 0-based positions (random-freezing baseline)."""
        positions = frozenset(int(p) for p in positions)
        if any(not 0 <= p < self.n_layers for p in positions) or len(positions) >= self.n_layers:
            raise ValueError(f"cannot freeze positions {sorted(positions)} of {self.n_layers} layers")
        self._frozen = positions
        lowest = min(set(range(self.n_layers)) - positions)
        self._freeze_index = lowest

    def trainable(self) -> list[bool]:
        if self._frozen is None:
            return [i >= self._freeze_index for i in range(self.n_layers)]
        return [i not in self._frozen for i in range(self.n_layers)]

    @property
    def lowest_active(self) -> int:
        return self.trainable().index(True)

    # -- shapes ------------------------------------------------------------
    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        return chain_shapes(self.layers, self.input_shape)[:-1]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return chain_shapes(self.layers, self.input_shape)[-1]

    # -- training ----------------------------------------------------------
    def forward(self, batch: np.ndarray, training: bool = False) -> np.ndarray:
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch of shape {batch.shape} does not match input {self.input_shape}")
        lo = self.lowest_active
        x = batch
        for i, layer in enumerate(self.layers):
            keep = training and i >= lo
            layer.clear_cache()
            x = layer.forward(x, cache=keep)
            check_finite(x, f"layer {i + 1} ({layer.describe()})")
        return x

    def backward(self, predictions: np.ndarray, labels) -> float:
        """Cross-entropy loss; grads for trainable layers only, stopping at the lowest active layer."""
        labels = _as_labels(labels, predictions.shape[1])
        loss, dy = _cross_entropy_with_grad(predictions, labels)
        mask = self.trainable()
        lo = mask.index(True)
        for i in range(self.n_layers - 1, lo - 1, -1):
            layer = self.layers[i]
            if layer.cached_activation is None:
                raise RuntimeError(f"layer {i + 1} has no cached activation; "
                                   "call forward(..., training=True) first")
            dy = layer.backward(dy, param_grads=mask[i], input_grad=i > lo)
            if not mask[i]:
                layer.clear_grads()
            elif layer.grads is not None:
                for g in layer.grads:
                    check_finite(g, f"gradient of layer {i + 1}")
        for i in range(lo):
            self.layers[i].clear_grads()
        return loss

    def sgd_step(self, eta: float) -> None:
        mask = self.trainable()
        trained = [layer for layer, m in zip(self.layers, mask) if m and layer.params]
        if any(layer.grads is None for layer in trained):
            raise RuntimeError("sgd_step called without populated gradients")
        for layer in trained:
            for p, g in zip(layer.params, layer.grads):
                p -= DTYPE(eta) * g if p.dtype == DTYPE else eta * g
        for layer in self.layers:
            layer.clear_grads()

    def clear_caches(self) -> None:
        for layer in self.layers:
            layer.clear_cache()

    # -- misc --------------------------------------------------------------
    def copy(self) -> "Model":
        new = copy.deepcopy(self)
        new.clear_caches()
        return new

    def astype(self, dtype) -> "Model":
        new = Model([layer.astype(dtype) for layer in self.layers], self.input_shape)
        new._freeze_index, new._frozen = self._freeze_index, self._frozen
        return new

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def flat_params(self) -> np.ndarray:
        return flatten_arrays([p for layer in self.layers for p in layer.params])

    def flat_grads(self, zero_missing: bool = True) -> np.ndarray:
        """All gradients in parameter order; frozen coordinates are zero-padded."""
        out = []
        for layer in self.layers:
            grads = layer.grads
            for j, p in enumerate(layer.params):
                if grads is None:
                    if not zero_missing:
                        raise RuntimeError("layer without gradients")
                    out.append(np.zeros(p.size, dtype=np.float64))
                else:
                    out.append(np.asarray(grads[j], dtype=np.float64).ravel())
        return np.concatenate(out) if out else np.zeros(0)

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for layer in self.layers:
            for p in layer.params:
                p[...] = flat[offset:offset + p.size].reshape(p.shape)
                offset += p.size
        if offset != flat.size:
            raise ValueError(f"expected {offset} values, got {flat.size}")

    def __repr__(self) -> str:
        body = ", ".join(layer.describe() for layer in self.layers)
        return f"Model(freeze_index={self.freeze_index}, layers=[{body}])"


def flatten_arrays(arrays) -> np.ndarray:
    if not arrays:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def build_model(arch: ArchitectureSpec, rng_seed: int) -> Model:
    return Model(build_layers(arch, rng_seed), arch.input_shape)


def _as_labels(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D array of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label index out of range for {classes} classes")
    return labels


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _cross_entropy_with_grad(predictions, labels):
    n = predictions.shape[0]
    if n == 0:
        raise ValueError("cross-entropy of an empty batch")
    logp = _log_softmax(predictions)
    loss = float(-logp[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    dy = np.exp(logp)
    dy[np.arange(n), labels] -= 1
    return loss, (dy / n).astype(predictions.dtype)


def cross_entropy(predictions: np.ndarray, labels) -> float:
    """Mean ``-log softmax(z)[label]`` over the batch, max-shifted for stability."""
    predictions = np.asarray(predictions)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise ValueError("cross-entropy needs a non-empty (batch, classes) array")
    labels = _as_labels(labels, predictions.shape[1])
    logp = _log_softmax(predictions.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def forward(model: Model, batch: np.ndarray, training: bool = False) -> np.ndarray:
    return model.forward(batch, training)


def backward(model: Model, predictions: np.ndarray, labels) -> float:
    return model.backward(predictions, labels)


def sgd_step(model: Model, eta: float) -> None:
    model.sgd_step(eta)


def evaluate(model: Model, dataset, batch_size: int = 512) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy over ``dataset`` (inference mode)."""
    x, y = dataset.features, np.asarray(dataset.labels)
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    for start in range(0, n, batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        out = model.forward(xb, training=False)
        correct += int((out.argmax(axis=1) == yb).sum())
        loss_sum += cross_entropy(out, yb) * len(yb)
    return correct / n, loss_sum / n
