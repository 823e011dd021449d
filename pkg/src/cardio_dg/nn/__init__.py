from . import ops
from .params import ParamStore
from .tensor import Tensor, as_tensor, no_grad

__all__ = ["ParamStore", "Tensor", "as_tensor", "no_grad", "ops"]
