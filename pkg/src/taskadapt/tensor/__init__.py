from . import ops
from .autograd import DTYPE, Tensor, as_tensor, backward, topological_order
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList, Parameter, ResidualLinear, apply_stats
from .optim import OptimState, adam, sgd, step
from .random import make_rng

__all__ = [
    "DTYPE", "Tensor", "as_tensor", "backward", "topological_order", "ops",
    "Module", "ModuleList", "Parameter", "Linear", "ResidualLinear", "Conv2d", "BatchNorm2d", "apply_stats",
    "OptimState", "adam", "sgd", "step", "make_rng",
]
