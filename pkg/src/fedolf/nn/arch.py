"""Architecture descriptions and seeded model construction.

An :class:`ArchitectureSpec` is a plain, config-friendly description: a
per-sample input shape plus a list of layer dicts. Each top-level entry
becomes one freezable unit of the built model.

Layer dicts::

    {"kind": "dense", "in": 4, "out": 2}
    {"kind": "conv2d", "in": 3, "out": 16, "kernel": 3, "stride": 1, "padding": 1}
    {"kind": "relu"} | {"kind": "maxpool2d", "size": 2} | {"kind": "flatten"}
    {"kind": "block", "layers": [...]}
    {"kind": "residual", "layers": [...], "shortcut": "identity" | {conv2d dict}}
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (DTYPE, Block, Conv2D, Dense, Flatten, Layer, MaxPool2D,
                     ReLU, ResidualBlock, ShapeError)

_KINDS = {"dense", "conv2d", "relu", "maxpool2d", "flatten", "block", "residual"}


@dataclass
class ArchitectureSpec:
    layers: list[dict]
    input_shape: tuple[int, ...] | None = None
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.input_shape is None:
            first = _first_primitive(self.layers)
            if first is None or first.get("kind") != "dense":
                raise ShapeError("input_shape is required unless the first layer is dense")
            self.input_shape = (int(first["in"]),)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        _validate_kinds(self.layers)

    @classmethod
    def from_config(cls, cfg: dict) -> "ArchitectureSpec":
        cfg = dict(cfg)
        preset = cfg.pop("preset", None)
        if preset is not None:
            builder = PRESETS.get(preset)
            if builder is None:
                raise ValueError(f"unknown architecture preset {preset!r}; "
                                 f"choose from {sorted(PRESETS)}")
            return builder(**cfg)
        unknown = set(cfg) - {"layers", "input_shape", "name"}
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        if "layers" not in cfg:
            raise ValueError("architecture needs 'layers' or 'preset'")
        return cls(layers=cfg["layers"], input_shape=cfg.get("input_shape"),
                   name=cfg.get("name", "custom"))

    def to_config(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": self.layers}


def _first_primitive(layers):
    for spec in layers:
        if spec.get("kind") in ("block", "residual"):
            inner = _first_primitive(spec.get("layers", []))
            if inner is not None:
                return inner
        else:
            return spec
    return None


def _validate_kinds(layers, where="architecture"):
    for i, spec in enumerate(layers, 1):
        kind = spec.get("kind")
        if kind not in _KINDS:
            raise ValueError(f"{where} layer {i}: unknown kind {kind!r}")
        if kind in ("block", "residual"):
            _validate_kinds(spec.get("layers", []), f"{where} layer {i}")


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _make(spec: dict, rng: np.random.Generator) -> Layer:
    kind = spec["kind"]
    if kind == "dense":
        n_in, n_out = int(spec["in"]), int(spec["out"])
        w = _kaiming_uniform(rng, (n_out, n_in), n_in)
        b = np.zeros(n_out, dtype=DTYPE) if spec.get("bias", True) else None
        return Dense(w, b)
    if kind == "conv2d":
        c_in, c_out, k = int(spec["in"]), int(spec["out"]), int(spec.get("kernel", 3))
        w = _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        b = np.zeros(c_out, dtype=DTYPE) if spec.get("bias", True) else None
        return Conv2D(w, b, stride=spec.get("stride", 1), padding=spec.get("padding", 0))
    if kind == "relu":
        return ReLU()
    if kind == "maxpool2d":
        return MaxPool2D(spec.get("size", 2), spec.get("stride"))
    if kind == "flatten":
        return Flatten()
    inner = [_make(s, rng) for s in spec["layers"]]
    if kind == "block":
        return Block(inner)
    shortcut = spec.get("shortcut", "identity")
    sc = None if shortcut in (None, "identity") else _make(shortcut, rng)
    return ResidualBlock(inner, sc, post_relu=spec.get("post_relu", True))


def chain_shapes(layers: list[Layer], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Input shape of every layer plus the final output shape (length N+1).

    Raises :class:`ShapeError` naming the offending (1-based) pair.
    """
    shapes = [tuple(input_shape)]
    for i, layer in enumerate(layers):
        try:
            shapes.append(layer.output_shape(shapes[-1]))
        except ShapeError as exc:
            if i == 0:
                raise ShapeError(f"dimension mismatch between the input {shapes[-1]} "
                                 f"and layer 1 ({layer.describe()}): {exc}") from None
            raise ShapeError(f"dimension mismatch between layers {i} and {i + 1} "
                             f"({layers[i - 1].describe()} -> {layer.describe()}): {exc}") from None
    return shapes


def build_layers(arch: ArchitectureSpec, rng_seed: int) -> list[Layer]:
    rng = np.random.default_rng(rng_seed)
    layers = [_make(spec, rng) for spec in arch.layers]
    chain_shapes(layers, arch.input_shape)
    return layers


# -- presets ---------------------------------------------------------------

def mlp(sizes: list[int], name: str = "mlp") -> ArchitectureSpec:
    """Dense units ``sizes[0] -> ... -> sizes[-1]``; every hidden unit is Dense+ReLU."""
    if len(sizes) < 2:
        raise ValueError("mlp needs at least input and output sizes")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        dense = {"kind": "dense", "in": a, "out": b}
        last = i == len(sizes) - 2
        layers.append(dense if last else {"kind": "block", "layers": [dense, {"kind": "relu"}]})
    return ArchitectureSpec(layers, (sizes[0],), name)


def small_cnn(input_shape=(1, 28, 28), classes: int = 10, channels=(8, 16),
              hidden: int = 64) -> ArchitectureSpec:
    """Two conv units followed by two dense units (the EMNIST-style CNN, shrunk)."""
    c, h, w = input_shape
    layers = []
    for out in channels:
        layers.append({"kind": "block", "layers": [
            {"kind": "conv2d", "in": c, "out": out, "kernel": 3, "padding": 1},
            {"kind": "relu"}, {"kind": "maxpool2d", "size": 2}]})
        c, h, w = out, h // 2, w // 2
    layers.append({"kind": "block", "layers": [
        {"kind": "flatten"}, {"kind": "dense", "in": c * h * w, "out": hidden}, {"kind": "relu"}]})
    layers.append({"kind": "dense", "in": hidden, "out": classes})
    return ArchitectureSpec(layers, tuple(input_shape), "small_cnn")


def alexnet_like(input_shape=(3, 32, 32), classes: int = 10, width: int = 16,
                 hidden: int = 128) -> ArchitectureSpec:
    """Five conv units and three dense units, AlexNet-style, for 32x32 inputs."""
    c, h, w = input_shape
    chans = [width * 4, width * 12, width * 24, width * 16, width * 16]
    pool_after = {0, 1, 4}
    layers = []
    for i, out in enumerate(chans):
        block = [{"kind": "conv2d", "in": c, "out": out, "kernel": 3, "padding": 1}, {"kind": "relu"}]
        if i in pool_after:
            block.append({"kind": "maxpool2d", "size": 2})
            h, w = h // 2, w // 2
        layers.append({"kind": "block", "layers": block})
        c = out
    flat = c * h * w
    layers.append({"kind": "block", "layers": [
        {"kind": "flatten"}, {"kind": "dense", "in": flat, "out": hidden}, {"kind": "relu"}]})
    layers.append({"kind": "block", "layers": [
        {"kind": "dense", "in": hidden, "out": hidden}, {"kind": "relu"}]})
    layers.append({"kind": "dense", "in": hidden, "out": classes})
    return ArchitectureSpec(layers, tuple(input_shape), "alexnet_like")


def resnet_like(depth: int = 20, input_shape=(3, 32, 32), classes: int = 100,
                width: int = 16) -> ArchitectureSpec:
    """CIFAR-style ResNet (depth = 6n+2): stem, 3 stages of n residual blocks, pooled head.

    Freezable units are the stem, each residual block, and the head.
    """
    if (depth - 2) % 6:
        raise ValueError("resnet depth must be 6n+2")
    n = (depth - 2) // 6
    c, h, w = input_shape
    layers = [{"kind": "block", "layers": [
        {"kind": "conv2d", "in": c, "out": width, "kernel": 3, "padding": 1, "bias": False},
        {"kind": "relu"}]}]
    c = width
    for stage in range(3):
        out = width * 2 ** stage
        for b in range(n):
            stride = 2 if (stage > 0 and b == 0) else 1
            body = [{"kind": "conv2d", "in": c, "out": out, "kernel": 3, "stride": stride,
                     "padding": 1, "bias": False},
                    {"kind": "relu"},
                    {"kind": "conv2d", "in": out, "out": out, "kernel": 3, "padding": 1,
                     "bias": False}]
            shortcut = "identity" if (stride == 1 and c == out) else {
                "kind": "conv2d", "in": c, "out": out, "kernel": 1, "stride": stride, "bias": False}
            layers.append({"kind": "residual", "layers": body, "shortcut": shortcut})
            c = out
            if stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
    layers.append({"kind": "block", "layers": [
        {"kind": "maxpool2d", "size": h}, {"kind": "flatten"},
        {"kind": "dense", "in": c, "out": classes}]})
    return ArchitectureSpec(layers, tuple(input_shape), f"resnet{depth}_like")


def _mlp_preset(sizes, name="mlp"):
    return mlp(list(sizes), name)


def _tuple_shape(builder):
    def wrapped(**kw):
        if "input_shape" in kw:
            kw["input_shape"] = tuple(kw["input_shape"])
        return builder(**kw)
    return wrapped


PRESETS = {
    "mlp": _mlp_preset,
    "small_cnn": _tuple_shape(small_cnn),
    "alexnet_like": _tuple_shape(alexnet_like),
    "resnet_like": _tuple_shape(resnet_like),
}
