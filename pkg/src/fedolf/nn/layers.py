"""Layer primitives for the numpy training engine.

Every layer works on batched arrays whose first axis is the batch. Parameters
are float32 in normal use; the arithmetic follows the dtype of the parameters
and inputs, which lets the gradient checker evaluate a float64 shadow copy.

A layer caches its *input* during a training forward pass (``cache=True``).
That cached input is all it needs to backpropagate.
"""

from __future__ import annotations

import copy

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Layer:
    """Base class. Parameterless layers keep ``params == []``."""

    kind = "Layer"

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] | None = None
        self.cached_activation: np.ndarray | None = None

    # -- shape bookkeeping -------------------------------------------------
    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def activation_elements(self, in_shape: tuple[int, ...]) -> int:
        """Per-sample element count of what this layer stores for backprop."""
        return int(np.prod(self.output_shape(in_shape)))

    def macs(self, in_shape: tuple[int, ...]) -> int:
        return 0

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    # -- compute -----------------------------------------------------------
    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, param_grads: bool = True,
                 input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError

    def clear_cache(self) -> None:
        self.cached_activation = None

    def clear_grads(self) -> None:
        self.grads = None

    def _cached_input(self) -> np.ndarray:
        if self.cached_activation is None:
            raise RuntimeError(f"{self.kind}: missing cached activation; "
                               "run a training-mode forward pass first")
        return self.cached_activation

    def astype(self, dtype) -> "Layer":
        new = copy.deepcopy(self)
        new._cast(dtype)
        return new

    def _cast(self, dtype) -> None:
        self.params = [p.astype(dtype) for p in self.params]
        self.grads = None
        self.cached_activation = None

    def describe(self) -> str:
        return self.kind

    def __repr__(self) -> str:
        return self.describe()


class Dense(Layer):
    """Fully connected layer. ``weight`` has shape (out, in): one row per neuron."""

    kind = "Dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None) -> None:
        super().__init__()
        if weight.ndim != 2:
            raise ShapeError(f"Dense weight must be 2-D, got shape {weight.shape}")
        self.params = [weight] if bias is None else [weight, bias]

    @property
    def weight(self) -> np.ndarray:
        return self.params[0]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params[1] if len(self.params) > 1 else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.describe()} expects input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def macs(self, in_shape):
        return self.in_features * self.out_features

    def forward(self, x, cache=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.describe()} got input of shape {x.shape}")
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        if cache:
            self.cached_activation = x
        return y

    def backward(self, dy, param_grads=True, input_grad=True):
        x = self._cached_input()
        if param_grads:
            grads = [dy.T @ x]
            if self.bias is not None:
                grads.append(dy.sum(axis=0))
            self.grads = grads
        return dy @ self.weight if input_grad else None

    def describe(self):
        return f"Dense({self.in_features}->{self.out_features})"


class Conv2D(Layer):
    """2-D convolution over NCHW input; ``weight`` is (out_ch, in_ch, k, k): one filter per output channel."""

    kind = "Conv2D"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0) -> None:
        super().__init__()
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"Conv2D weight must be (out, in, k, k), got {weight.shape}")
        self.params = [weight] if bias is None else [weight, bias]
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def weight(self) -> np.ndarray:
        return self.params[0]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params[1] if len(self.params) > 1 else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.describe()} kernel larger than padded input {h}x{w}")
        return ho, wo

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"{self.describe()} expects input ({self.in_channels}, H, W), got {tuple(in_shape)}")
        return (self.out_channels, *self._out_hw(in_shape[1], in_shape[2]))

    def macs(self, in_shape):
        _, ho, wo = self.output_shape(in_shape)
        return self.kernel ** 2 * self.in_channels * self.out_channels * ho * wo

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (B, C, Ho, Wo, k, k)

    def forward(self, x, cache=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.describe()} got input of shape {x.shape}")
        win = self._windows(x)
        y = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
        y = y.transpose(0, 3, 1, 2)
        if self.bias is not None:
            y = y + self.bias[None, :, None, None]
        if cache:
            self.cached_activation = x
        return np.ascontiguousarray(y)

    def backward(self, dy, param_grads=True, input_grad=True):
        x = self._cached_input()
        if param_grads:
            win = self._windows(x)
            grads = [np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))]  # (O, C, k, k)
            if self.bias is not None:
                grads.append(dy.sum(axis=(0, 2, 3)))
            self.grads = grads
        if not input_grad:
            return None
        k, s, p = self.kernel, self.stride, self.padding
        b, _, h, w = x.shape
        ho, wo = dy.shape[2], dy.shape[3]
        # (B, Ho, Wo, C, k, k)
        cols = np.tensordot(dy, self.weight, axes=([1], [0]))
        dxp = np.zeros((b, self.in_channels, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp

    def describe(self):
        return (f"Conv2D({self.in_channels}->{self.out_channels}, k={self.kernel}, "
                f"s={self.stride}, p={self.padding})")


class ReLU(Layer):
    kind = "ReLU"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, cache=False):
        if cache:
            self.cached_activation = x
        return np.maximum(x, 0)

    def backward(self, dy, param_grads=True, input_grad=True):
        x = self._cached_input()
        return dy * (x > 0) if input_grad else None


class MaxPool2D(Layer):
    """Non-overlapping-by-default max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "MaxPool2D"

    def __init__(self, size: int = 2, stride: int | None = None) -> None:
        super().__init__()
        self.size = int(size)
        self.stride = int(stride) if stride is not None else self.size

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.describe()} expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        ho, wo = (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.describe()} window larger than input {h}x{w}")
        return (c, ho, wo)

    def _windows(self, x):
        win = sliding_window_view(x, (self.size, self.size), axis=(2, 3))
        return win[:, :, ::self.stride, ::self.stride]

    def forward(self, x, cache=False):
        if x.ndim != 4:
            raise ShapeError(f"{self.describe()} got input of shape {x.shape}")
        if cache:
            self.cached_activation = x
        return self._windows(x).max(axis=(4, 5))

    def backward(self, dy, param_grads=True, input_grad=True):
        if not input_grad:
            return None
        x = self._cached_input()
        win = self._windows(x)
        b, c, ho, wo = win.shape[:4]
        k, s = self.size, self.stride
        arg = win.reshape(b, c, ho, wo, k * k).argmax(axis=-1)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * s + di
        cols = np.arange(wo)[None, None, None, :] * s + dj
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dx = np.zeros_like(x, dtype=dy.dtype)
        np.add.at(dx, (bi, ci, rows, cols), dy)
        return dx

    def describe(self):
        return f"MaxPool2D({self.size}, s={self.stride})"


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def activation_elements(self, in_shape):
        # a view of the previous output; stores nothing new
        return 0

    def forward(self, x, cache=False):
        if cache:
            self.cached_activation = x
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, param_grads=True, input_grad=True):
        x = self._cached_input()
        return dy.reshape(x.shape) if input_grad else None


class Block(Layer):
    """An ordered run of layers that freezes, trains and aggregates as one unit."""

    kind = "Block"

    def __init__(self, layers: list[Layer]) -> None:
        # params/grads are views over the members, so Layer.__init__ is skipped
        self.layers = list(layers)
        self.cached_activation = None

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self._members() for p in layer.params]

    @params.setter
    def params(self, values: list[np.ndarray]) -> None:
        values = list(values)
        for layer in self._members():
            n = len(layer.params)
            layer.params, values = values[:n], values[n:]
        if values:
            raise ShapeError(f"{self.describe()}: too many parameter arrays")

    @property
    def grads(self) -> list[np.ndarray] | None:
        out = []
        for layer in self._members():
            if layer.params:
                if layer.grads is None:
                    return None
                out.extend(layer.grads)
        return out

    @grads.setter
    def grads(self, values) -> None:
        if values is None:
            for layer in self._members():
                layer.clear_grads()
            return
        values = list(values)
        for layer in self._members():
            n = len(layer.params)
            layer.grads, values = (values[:n] if n else None), values[n:]

    def _members(self) -> list[Layer]:
        return self.layers

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def activation_elements(self, in_shape):
        total, shape = 0, tuple(in_shape)
        for layer in self.layers:
            total += layer.activation_elements(shape)
            shape = layer.output_shape(shape)
        return total

    def macs(self, in_shape):
        total, shape = 0, tuple(in_shape)
        for layer in self.layers:
            total += layer.macs(shape)
            shape = layer.output_shape(shape)
        return total

    def forward(self, x, cache=False):
        if cache:
            self.cached_activation = x
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x

    def backward(self, dy, param_grads=True, input_grad=True):
        self._cached_input()
        for i in range(len(self.layers) - 1, -1, -1):
            dy = self.layers[i].backward(dy, param_grads=param_grads,
                                         input_grad=input_grad or i > 0)
        return dy

    def clear_cache(self):
        self.cached_activation = None
        for layer in self._members():
            layer.clear_cache()

    def clear_grads(self):
        for layer in self._members():
            layer.clear_grads()

    def _cast(self, dtype):
        for layer in self._members():
            layer._cast(dtype)
        self.cached_activation = None

    def describe(self):
        return f"Block[{', '.join(layer.describe() for layer in self.layers)}]"


class ResidualBlock(Block):
    """``relu(body(x) + shortcut(x))``; ``shortcut=None`` is the identity."""

    kind = "ResidualBlock"

    def __init__(self, layers: list[Layer], shortcut: Layer | None = None,
                 post_relu: bool = True) -> None:
        super().__init__(layers)
        self.shortcut = shortcut
        self.post_relu = post_relu
        self._sum_cache: np.ndarray | None = None

    def _members(self):
        return self.layers + ([self.shortcut] if self.shortcut is not None else [])

    def output_shape(self, in_shape):
        body = super().output_shape(in_shape)
        side = self.shortcut.output_shape(in_shape) if self.shortcut is not None else tuple(in_shape)
        if body != side:
            raise ShapeError(f"{self.describe()}: body output {body} does not match shortcut {side}")
        return body

    def activation_elements(self, in_shape):
        total = super().activation_elements(in_shape)
        if self.shortcut is not None:
            total += self.shortcut.activation_elements(in_shape)
        out = int(np.prod(self.output_shape(in_shape)))
        # the residual sum, plus the post-activation output
        return total + out * (2 if self.post_relu else 1)

    def macs(self, in_shape):
        total = super().macs(in_shape)
        if self.shortcut is not None:
            total += self.shortcut.macs(in_shape)
        return total

    def forward(self, x, cache=False):
        z = super().forward(x, cache=cache)
        z = z + (self.shortcut.forward(x, cache=cache) if self.shortcut is not None else x)
        if cache:
            self._sum_cache = z
        return np.maximum(z, 0) if self.post_relu else z

    def backward(self, dy, param_grads=True, input_grad=True):
        if self._sum_cache is None:
            raise RuntimeError("ResidualBlock: missing cached activation")
        if self.post_relu:
            dy = dy * (self._sum_cache > 0)
        dx = super().backward(dy, param_grads=param_grads, input_grad=input_grad)
        if self.shortcut is not None:
            ds = self.shortcut.backward(dy, param_grads=param_grads, input_grad=input_grad)
        else:
            ds = dy
        return dx + ds if input_grad else None

    def clear_cache(self):
        super().clear_cache()
        self._sum_cache = None

    def _cast(self, dtype):
        super()._cast(dtype)
        self._sum_cache = None

    def describe(self):
        sc = "identity" if self.shortcut is None else self.shortcut.describe()
        return f"ResidualBlock[{', '.join(layer.describe() for layer in self.layers)} | {sc}]"


def parameterized_layers(layer: Layer) -> list[Layer]:
    """Dense/Conv2D primitives inside ``layer`` in forward order (shortcut last)."""
    if isinstance(layer, Block):
        return [p for member in layer._members() for p in parameterized_layers(member)]
    return [layer] if layer.params else []
