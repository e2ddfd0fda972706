from . import primitives  # noqa: F401  (registers the primitive set)
from .core import (
    PRIMITIVES, DiffRecord, Gradients, ShapeError, Tensor, apply_primitive, backward,
    current_record, default_dtype, get_default_dtype, is_meta_mode, meta_mode, no_record,
    output_shape, set_default_dtype, tensor,
)
from .gradcheck import GradCheckReport, grad_check
from .primitives import BatchNormState

__all__ = [
    "PRIMITIVES", "BatchNormState", "DiffRecord", "GradCheckReport", "Gradients", "ShapeError",
    "Tensor", "apply_primitive", "backward", "current_record", "default_dtype",
    "get_default_dtype", "grad_check", "is_meta_mode", "meta_mode", "no_record",
    "output_shape", "set_default_dtype", "tensor",
]
