from .arch import (PRESETS, ArchitectureSpec, alexnet_like, build_layers, chain_shapes,
                   mlp, resnet_like, small_cnn)
from .layers import (DTYPE, Block, Conv2D, Dense, Flatten, Layer, MaxPool2D, NonFiniteError,
                     ReLU, ResidualBlock, ShapeError, parameterized_layers)
from .model import (Model, backward, build_model, cross_entropy, evaluate, flatten_arrays,
                    forward, sgd_step)

__all__ = [
    "ArchitectureSpec", "Block", "Conv2D", "DTYPE", "Dense", "Flatten", "Layer", "MaxPool2D",
    "Model", "NonFiniteError", "PRESETS", "ReLU", "ResidualBlock", "ShapeError",
    "alexnet_like", "backward", "build_layers", "build_model", "chain_shapes", "cross_entropy",
    "evaluate", "flatten_arrays", "forward", "mlp", "parameterized_layers", "resnet_like",
    "sgd_step", "small_cnn",
]
