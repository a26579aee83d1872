"""Unrolled (deep) variants of the BSCA anomaly detectors."""

from .embed import EPS, H_M, H_W, embed_M, embed_W
from .model import (default_rank, forward, forward_torch, init_state, matrix_mode, param_map,
                    tensor_mode)
from .params import AffineMap, LayerParams, ModelParams

__all__ = [
    "EPS", "H_M", "H_W", "embed_M", "embed_W", "default_rank", "forward", "forward_torch",
    "init_state", "matrix_mode", "param_map", "tensor_mode", "AffineMap", "LayerParams", "ModelParams",
]
