from .gradcheck import fd_gradcheck
from .layers import Module
from .optim import SGD, Adam
from .tensor import Tensor, concat, get_dtype, precision, set_precision

__all__ = ["Tensor", "Module", "SGD", "Adam", "fd_gradcheck", "concat",
           "get_dtype", "precision", "set_precision"]
