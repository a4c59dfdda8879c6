from .checkpoint import load_checkpoint, save_checkpoint
from .network import (FeatureNet, Head, Topology, baseline_topology, derive_seed, downsample_mask,
                      feature_mask, head_reset_seed, init_head, init_random,
                      proposed_topology, unet_forward)
from .ops import (conv3d_backward, conv3d_forward, head_apply, head_backward,
                  masked_avg_pool, masked_avg_pool_backward, maxpool2_backward,
                  maxpool2_forward, relu_backward, relu_forward, sgd_step, softmax_xent,
                  trilinear_up2_backward, trilinear_up2_forward)

__all__ = [
    "FeatureNet", "Head", "Topology", "baseline_topology", "proposed_topology",
    "init_random", "init_head", "derive_seed", "head_reset_seed", "unet_forward",
    "downsample_mask", "feature_mask", "load_checkpoint", "save_checkpoint",
    "conv3d_forward", "conv3d_backward", "relu_forward", "relu_backward",
    "maxpool2_forward", "maxpool2_backward", "trilinear_up2_forward",
    "trilinear_up2_backward", "masked_avg_pool", "masked_avg_pool_backward",
    "head_apply", "head_backward", "softmax_xent", "sgd_step",
]
