"""Dense numerical kernels with explicit forward and backward passes."""

from app.kernels.activations import relu, relu_backward, sigmoid, sigmoid_backward, softmax
from app.kernels.conv import (
    ConvGrads,
    ConvParams,
    DeconvParams,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
)
from app.kernels.gradcheck import grad_check
from app.kernels.linear import (
    LinearParams,
    concat_channels,
    concat_channels_backward,
    fully_connected,
    fully_connected_backward,
)
from app.kernels.losses import smooth_l1, softmax_cross_entropy
from app.kernels.pooling import (
    global_avg_pool,
    global_avg_pool_backward,
    maxpool2d,
    maxpool2d_backward,
    stochastic_pool,
    stochastic_pool_backward,
    stochastic_pool_channel,
)
from app.kernels.tensor import load_tensor, make_generator, save_tensor

__all__ = [
    "ConvGrads",
    "ConvParams",
    "DeconvParams",
    "LinearParams",
    "concat_channels",
    "concat_channels_backward",
    "conv2d",
    "conv2d_backward",
    "deconv2d",
    "deconv2d_backward",
    "fully_connected",
    "fully_connected_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "grad_check",
    "load_tensor",
    "make_generator",
    "maxpool2d",
    "maxpool2d_backward",
    "relu",
    "relu_backward",
    "save_tensor",
    "sigmoid",
    "sigmoid_backward",
    "smooth_l1",
    "softmax",
    "softmax_cross_entropy",
    "stochastic_pool",
    "stochastic_pool_backward",
    "stochastic_pool_channel",
]
