"""Bins injection: bin-centre features fused into the token map by a ConvGRU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .mtbin import DepthRangeConfig
from .numerics import ShapeError, conv2d_3x3

Tensor = torch.Tensor


@dataclass
class ConvGruParams:
    w_z: Tensor
    b_z: Tensor
    w_r: Tensor
    b_r: Tensor
    w_q: Tensor
    b_q: Tensor

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str = "inject.gru") -> "ConvGruParams":
        return cls(*(params[f"{prefix}.{n}"] for n in ("w_z", "b_z", "w_r", "b_r", "w_q", "b_q")))


def project_bins(centers: Tensor, params: Mapping[str, Tensor], depth_range: DepthRangeConfig,
                 prefix: str = "inject.proj") -> Tensor:
    """Map per-pixel bin centres ``(B, H, W, N)`` in metres to ``(B, hidden, H, W)`` features.

    Centres are min-max normalised by the depth range, then pass through two
    3x3 convolutions with a ReLU between them.
    """
    if centers.dim() != 4:
        raise ShapeError(f"project_bins: expected (B, H, W, N) centres, got {tuple(centers.shape)}")
    w1 = params[f"{prefix}.w1"]
    x = (centers - depth_range.d_min) / depth_range.width
    x = x.permute(0, 3, 1, 2).to(w1.dtype)
    x = torch.relu(conv2d_3x3(x, w1, params[f"{prefix}.b1"]))
    return conv2d_3x3(x, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def conv_gru_step(hidden: Tensor, context: Tensor, p: ConvGruParams) -> Tensor:
    """One ConvGRU update of ``hidden`` (B, C, H, W) driven by ``context`` of the same shape."""
    if hidden.shape != context.shape:
        raise ShapeError(f"conv_gru_step: hidden {tuple(hidden.shape)} vs context {tuple(context.shape)}")
    hx = torch.cat([hidden, context], dim=1)
    z = torch.sigmoid(conv2d_3x3(hx, p.w_z, p.b_z))
    r = torch.sigmoid(conv2d_3x3(hx, p.w_r, p.b_r))
    q = torch.tanh(conv2d_3x3(torch.cat([r * hidden, context], dim=1), p.w_q, p.b_q))
    return (1 - z) * hidden + z * q
