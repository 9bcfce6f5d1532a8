"""Framework-free 3D attention U-Net with group supervision."""

from .layers import (
    Conv3d,
    InstanceNorm,
    MaxPool,
    ReLU,
    Sigmoid,
    SpatialAttention,
    SpatialDropout,
    Upsample,
)
from .model import (
    BlockSpec,
    ConvBlock,
    GroupHead,
    Net,
    NetError,
    NetSpec,
    SupervisionScheme,
    conv_block_forward,
    group_predict,
    read_checkpoint,
    unet,
    write_checkpoint,
)
from .probes import attention_map, attention_probe, averaging_kernels, erosion_dilation_probe, seed_gradient
from .gradcheck import GradCheckResult, net_gradient_check
from .supervise import Sample, forward_backward, loss_weights, total_loss

__all__ = [
    "BlockSpec", "Conv3d", "GradCheckResult", "ConvBlock", "GroupHead", "InstanceNorm", "MaxPool", "Net", "NetError",
    "NetSpec", "ReLU", "Sample", "Sigmoid", "SpatialAttention", "SpatialDropout", "SupervisionScheme",
    "Upsample", "attention_map", "attention_probe", "averaging_kernels", "conv_block_forward",
    "erosion_dilation_probe", "forward_backward", "group_predict", "net_gradient_check", "loss_weights", "read_checkpoint",
    "seed_gradient", "total_loss", "unet", "write_checkpoint",
]
