"""Float64 tensors with reverse-mode autodiff and small dense eigen/SVD solvers."""

from . import tensor as ops
from .gradcheck import grad_check
from .linalg import jacobi_eigh, jacobi_svd, svd_small, sym_eig
from .nn import GRUCell, LayerNorm, Linear, MLP, Module, param
from .tensor import Tensor, as_tensor, no_grad, stop_gradient


def softmax_axis(t, axis: int) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    return ops.softmax(t, axis)


__all__ = [
    "Tensor", "as_tensor", "no_grad", "stop_gradient", "ops", "softmax_axis",
    "sym_eig", "svd_small", "jacobi_eigh", "jacobi_svd", "grad_check",
    "Module", "Linear", "LayerNorm", "MLP", "GRUCell", "param",
]
