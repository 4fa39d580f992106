"""Spatiotemporal convolutional networks for video classification.

Float32 numpy tensors laid out as ``N x C x T x H x W``; full 3D (C3D-style)
and factorized (2+1)D networks; clip sampling, fc6 descriptors with a linear
SVM or an end-to-end softmax head; cross-validation, embeddings and
benchmarks.
"""
from .errors import StConvError
from .layers import Network, instantiate
from .netspec import NetSpec, build_c3d, build_net, build_r2p1d_34, build_tiny_r2p1d
from .tensor import DTYPE, new_rng

__all__ = [
    "DTYPE", "NetSpec", "Network", "StConvError", "build_c3d", "build_net",
    "build_r2p1d_34", "build_tiny_r2p1d", "instantiate", "new_rng",
]
__version__ = "0.1.0"
