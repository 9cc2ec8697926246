"""Graph-convolutional image denoiser with dynamic feature-space graphs."""

from .autodiff import (
    AdamState,
    GradTape,
    Tensor,
    adam_step,
    backward,
    batch_norm,
    conv2d,
    grad_check,
    leaky_relu,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .ecc import (
    EccParams,
    EdgeWeights,
    attention_only_aggregate,
    circulant_matvec,
    edge_attention,
    fnet_forward,
    graph_conv_layer,
    init_ecc,
    memory_report,
    nonlocal_aggregate,
)
from .graphs import PixelGraph, build_graph_infer, build_graph_train, edge_labels
from .metrics import add_awgn, psnr, ssim
from .network import (
    Checkpoint,
    ModelConfig,
    build_network,
    denoise,
    forward,
    model_from_checkpoint,
    full_scale_config,
    train,
)
from .prox import (
    LaplacianOperator,
    build_laplacian,
    graph_smoothness,
    highpass_apply,
    prox_denoise,
    spectral_response,
)

__version__ = "0.1.0"
