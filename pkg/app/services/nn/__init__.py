from services.nn.module import Module
from services.nn.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    float64_mode,
    grad_enabled,
    no_grad,
    parameter,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "Module",
    "Tensor",
    "float64_mode",
    "grad_enabled",
    "no_grad",
    "parameter",
]
