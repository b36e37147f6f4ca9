"""Central finite differences on a float64 shadow copy of a layer or model."""

import numpy as np

from fedolf.nn import Layer, Model


def rel_err(a, b):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def layer_fd(layer: Layer, x: np.ndarray, probe: np.ndarray, step=1e-3):
    """Numerical d(sum(probe * layer(x))) w.r.t. every param and the input."""
    shadow = layer.astype(np.float64)
    x64 = x.astype(np.float64)

    def f():
        return float(np.sum(probe * shadow.forward(x64)))

    grads = []
    for p in shadow.params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = f()
            p[idx] = old - step
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    gx = np.zeros_like(x64)
    for idx in np.ndindex(x64.shape):
        old = x64[idx]
        x64[idx] = old + step
        up = f()
        x64[idx] = old - step
        down = f()
        x64[idx] = old
        gx[idx] = (up - down) / (2 * step)
    return grads, gx


def layer_analytic(layer: Layer, x: np.ndarray, probe: np.ndarray):
    layer.forward(x, cache=True)
    gx = layer.backward(probe.astype(x.dtype), param_grads=True, input_grad=True)
    grads = layer.grads if layer.params else []
    return [g.copy() for g in grads], gx


def model_fd(model: Model, x: np.ndarray, labels: np.ndarray, step=1e-3):
    """Numerical gradient of the mean cross-entropy w.r.t. all parameters (flat)."""
    from fedolf.nn import cross_entropy

    shadow = model.astype(np.float64)
    x64 = x.astype(np.float64)
    flat = shadow.flat_params()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        shadow.set_flat_params(flat)
        up = cross_entropy(shadow.forward(x64), labels)
        flat[i] = old - step
        shadow.set_flat_params(flat)
        down = cross_entropy(shadow.forward(x64), labels)
        flat[i] = old
        out[i] = (up - down) / (2 * step)
    shadow.set_flat_params(flat)
    return out


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return (np.sign(x) * (np.abs(x) + margin)).astype(np.float32)


def random_instance(kind: str, seed: int):
    """(layer, input, probe) for one seeded random small instance of ``kind``."""
    from fedolf.nn import ArchitectureSpec, build_layers

    rng = np.random.default_rng(seed)
    b = int(rng.integers(1, 4))
    if kind == "Dense":
        n_in, n_out = rng.integers(2, 7, size=2)
        spec, shape = {"kind": "dense", "in": int(n_in), "out": int(n_out)}, (int(n_in),)
    elif kind == "Conv2D":
        c, o = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3]))
        spec = {"kind": "conv2d", "in": int(c), "out": int(o), "kernel": k,
                "stride": int(rng.integers(1, 3)), "padding": int(rng.integers(0, 2))}
        shape = (int(c), 5, 5)
    elif kind == "ReLU":
        spec, shape = {"kind": "relu"}, (int(rng.integers(2, 10)),)
    elif kind == "MaxPool2D":
        spec, shape = {"kind": "maxpool2d", "size": 2}, (int(rng.integers(1, 3)), 4, 6)
    elif kind == "Flatten":
        spec, shape = {"kind": "flatten"}, (2, 3, 2)
    elif kind == "Block":
        spec = {"kind": "block", "layers": [{"kind": "dense", "in": 4, "out": 5}, {"kind": "relu"},
                                            {"kind": "dense", "in": 5, "out": 3}]}
        shape = (4,)
    elif kind == "ResidualBlock":
        proj = bool(rng.integers(0, 2))
        out = 3 if proj else 2
        spec = {"kind": "residual", "layers": [
            {"kind": "conv2d", "in": 2, "out": out, "kernel": 3, "padding": 1},
            {"kind": "relu"},
            {"kind": "conv2d", "in": out, "out": out, "kernel": 3, "padding": 1}],
            "shortcut": {"kind": "conv2d", "in": 2, "out": out, "kernel": 1} if proj else "identity"}
        shape = (2, 4, 4)
    else:
        raise ValueError(kind)
    (layer,) = build_layers(ArchitectureSpec([spec], shape), int(rng.integers(1 << 30)))
    for p in layer.params:
        if p.ndim == 1:
            p[...] = rng.normal(scale=0.1, size=p.shape)
    if kind == "MaxPool2D":
        x = (rng.permutation(b * int(np.prod(shape))).reshape(b, *shape) * 0.1).astype(np.float32)
    elif kind == "ReLU":
        x = _away_from_zero(rng, (b, *shape))
    else:
        x = rng.normal(size=(b, *shape)).astype(np.float32)
        # finite differences are meaningless across a ReLU kink; redraw the input
        while kind in ("Block", "ResidualBlock") and _relu_margin(layer, x) < 0.02:
            x = rng.normal(size=(b, *shape)).astype(np.float32)
    probe = rng.normal(size=(b, *layer.output_shape(shape)))
    return layer, x, probe


def _relu_margin(layer, x):
    x = x.astype(np.float64)
    shadow = layer.astype(np.float64)
    margins, h = [], x
    for sub in shadow.layers:
        if sub.kind == "ReLU":
            margins.append(np.abs(h).min())
        h = sub.forward(h)
    if sub is not None and shadow.kind == "ResidualBlock":
        side = shadow.shortcut.forward(x) if shadow.shortcut is not None else x
        margins.append(np.abs(h + side).min())
    return min(margins)


LAYER_KINDS = ["Dense", "Conv2D", "ReLU", "MaxPool2D", "Flatten", "Block", "ResidualBlock"]


def check_layer(kind: str, seed: int) -> float:
    """Worst relative error between analytic and numerical gradients."""
    layer, x, probe = random_instance(kind, seed)
    num_p, num_x = layer_fd(layer, x, probe)
    ana_p, ana_x = layer_analytic(layer, x, probe)
    errs = [rel_err(a, n) for a, n in zip(ana_p, num_p)] + [rel_err(ana_x, num_x)]
    return max(errs)
