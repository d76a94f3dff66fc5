"""Rigid kernel point convolution network in numpy."""

from voxfrac.kpnet.kernels import KernelError, KernelLayout, init_kernel_points
from voxfrac.kpnet.layers import NormState, kpconv_backward, kpconv_forward, softmax, unary_block
from voxfrac.kpnet.neighbors import grid_subsample, nearest_upsample, radius_neighbors
from voxfrac.kpnet.network import KpNetwork, NetworkConfig, NetworkError, build_geometry, parameter_count
from voxfrac.kpnet.train import TrainConfig, TrainingDiverged, predict_cloud, train

__all__ = [
    "KernelError", "KernelLayout", "init_kernel_points",
    "NormState", "kpconv_forward", "kpconv_backward", "softmax", "unary_block",
    "grid_subsample", "nearest_upsample", "radius_neighbors",
    "KpNetwork", "NetworkConfig", "NetworkError", "build_geometry", "parameter_count",
    "TrainConfig", "TrainingDiverged", "predict_cloud", "train",
]
