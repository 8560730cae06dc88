from .fsvt import load, load_checkpoint, save, save_checkpoint
from .gradcheck import forward_backward, grad_check, numeric_grad
from .ops import avgpool_temporal, conv3d, interp_spatial, layer_norm, replicate_pad_axis, softmax
from .rng import Rng
from .tensor import NonFiniteError, Tensor, as_tensor, no_grad

__all__ = [
    "Tensor", "NonFiniteError", "Rng", "as_tensor", "no_grad",
    "forward_backward", "grad_check", "numeric_grad",
    "softmax", "conv3d", "interp_spatial", "avgpool_temporal", "layer_norm", "replicate_pad_axis",
    "save", "load", "save_checkpoint", "load_checkpoint",
]
