"""Multiway Tree Bins: per-pixel recursive depth-range refinement.

Bin boundaries are stored per pixel along the last axis, so a ``BinState``
for a ``(B, H, W)`` map holds a ``(B, H, W, N + 1)`` float64 tensor.  Bin
indices ``t`` are 1-based throughout (``1 <= t <= N``).  Bins carry no
gradient: the located index is piecewise constant in the predicted depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .numerics import ShapeError, resize_to

Tensor = torch.Tensor


@dataclass(frozen=True)
class DepthRangeConfig:
    d_min: float = 0.1
    d_max: float = 10.0
    n_bins: int = 16

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError(f"d_min {self.d_min} must be below d_max {self.d_max}")
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")

    @property
    def width(self) -> float:
        return self.d_max - self.d_min


@dataclass
class BinState:
    boundaries: Tensor  # (..., N + 1), ascending along the last axis
    step: int = 1

    @property
    def n_bins(self) -> int:
        return self.boundaries.shape[-1] - 1

    @property
    def lo(self) -> Tensor:
        return self.boundaries[..., 0]

    @property
    def hi(self) -> Tensor:
        return self.boundaries[..., -1]

    def check(self, cfg: DepthRangeConfig | None = None) -> None:
        b = self.boundaries
        if not bool((b[..., 1:] > b[..., :-1]).all()):
            raise ValueError("bin boundaries are not strictly ascending")
        if cfg is not None:
            if b.shape[-1] != cfg.n_bins + 1:
                raise ValueError(f"expected {cfg.n_bins + 1} boundaries, got {b.shape[-1]}")
            if bool((b[..., 0] < cfg.d_min).any()) or bool((b[..., -1] > cfg.d_max).any()):
                raise ValueError("bin boundaries leave the configured depth range")


@dataclass
class DepthMap:
    depth: Tensor
    valid: Tensor

    def __post_init__(self):
        if self.depth.shape != self.valid.shape:
            raise ShapeError(f"depth {tuple(self.depth.shape)} and mask {tuple(self.valid.shape)} differ")


def init_bins(cfg: DepthRangeConfig, shape: Sequence[int] = ()) -> BinState:
    """Uniform split of ``[d_min, d_max]`` into ``n_bins`` bins, repeated for every pixel of ``shape``."""
    n = cfg.n_bins
    width = (cfg.d_max - cfg.d_min) / n
    b = cfg.d_min + torch.arange(n, dtype=torch.float64) * width
    b = torch.cat([b, torch.tensor([cfg.d_max], dtype=torch.float64)])
    return BinState(b.expand(*shape, n + 1).clone(), step=1)


def locate_bin(bins: BinState, d: Tensor) -> Tensor:
    """1-based index ``t`` with ``b[t] <= d < b[t+1]``; the last bin is closed on the right.

    ``d`` is clamped into the pixel's range first.
    """
    b = bins.boundaries
    d = torch.as_tensor(d, dtype=torch.float64)
    if d.shape != b.shape[:-1]:
        raise ShapeError(f"locate_bin: depth shape {tuple(d.shape)} vs bins {tuple(b.shape[:-1])}")
    d = torch.clamp(d, b[..., 0], b[..., -1])
    inner = b[..., 1:-1]
    return 1 + (inner <= d[..., None]).sum(dim=-1)


def refine_bins(bins: BinState, t: Tensor) -> BinState:
    """Expand bin ``t`` to its neighbours and split the result into ``N`` uniform bins."""
    b = bins.boundaries
    n = bins.n_bins
    t = torch.as_tensor(t, dtype=torch.int64)
    if t.shape != b.shape[:-1]:
        raise ShapeError(f"refine_bins: index shape {tuple(t.shape)} vs bins {tuple(b.shape[:-1])}")
    if bool((t < 1).any()) or bool((t > n).any()):
        raise ValueError(f"refine_bins: bin index outside 1..{n}")
    lo, hi = (v[..., None] for v in expanded_range(bins, t))
    width = (hi - lo) / n
    steps = torch.arange(n, dtype=torch.float64)
    new = torch.cat([lo + steps * width, hi], dim=-1)
    return BinState(new, step=bins.step + 1)


def bin_centers(bins: BinState) -> Tensor:
    b = bins.boundaries
    return (b[..., :-1] + b[..., 1:]) / 2


def compose_depth(centers: Tensor, probs: Tensor, atol: float = 1e-6) -> Tensor:
    """Probability-weighted sum of bin centres over the last axis."""
    if centers.shape != probs.shape:
        raise ShapeError(f"compose_depth: centers {tuple(centers.shape)} vs probs {tuple(probs.shape)}")
    p = probs.detach()
    if bool((p < 0).any()) or bool(((p.sum(dim=-1) - 1).abs() > atol).any()):
        raise ValueError("compose_depth: probabilities must be nonnegative and sum to 1")
    return (centers.to(probs.dtype) * probs).sum(dim=-1)


def oracle_refine(bins: BinState, t) -> BinState:
    """Reference refinement written per pixel in plain Python floats."""
    b = bins.boundaries
    n = b.shape[-1] - 1
    rows = b.reshape(-1, n + 1).tolist()
    ts = torch.as_tensor(t).reshape(-1).tolist()
    out = []
    for bounds, tt in zip(rows, ts):
        # 1-based boundary b^i is bounds[i - 1]
        left = bounds[max(tt - 1, 1) - 1]
        right = bounds[min(tt + 2, n + 1) - 1]
        step = (right - left) / n
        pixel = []
        for i in range(1, n + 1):
            pixel.append(left + (i - 1) * step)
        pixel.append(right)
        out.append(pixel)
    new = torch.tensor(out, dtype=torch.float64).reshape(b.shape)
    return BinState(new, step=bins.step + 1)


def transport_bins(bins: BinState, size: Sequence[int]) -> BinState:
    """Carry per-pixel bins of a ``(..., h, w, N + 1)`` state to a finer ``(H, W)`` grid.

    Each boundary channel is upsampled bilinearly like the depth map, then
    re-sorted so every pixel stays ascending.
    """
    b = bins.boundaries
    channels_first = b.movedim(-1, -3)
    up = resize_to(channels_first, size).movedim(-3, -1)
    return BinState(torch.sort(up, dim=-1).values, step=bins.step)


def expanded_range(bins: BinState, t: Tensor) -> tuple[Tensor, Tensor]:
    """``[b^{max(t-1,1)}, b^{min(t+2,N+1)}]``, the interval ``refine_bins`` re-splits."""
    b = bins.boundaries
    t = torch.as_tensor(t, dtype=torch.int64)
    lo = torch.gather(b, -1, (torch.clamp(t - 1, min=1) - 1)[..., None])[..., 0]
    hi = torch.gather(b, -1, (torch.clamp(t + 2, max=bins.n_bins + 1) - 1)[..., None])[..., 0]
    return lo, hi


def format_trace_line(step: int, t: int, boundaries: Sequence[float], depth: float,
                      carried: tuple[float, float]) -> str:
    """One line of a pixel's decision path.

    ``t`` is the bin of the carried-over bins that held the previous depth (0 at
    step 1) and ``carried`` the range expanded around it, which the printed
    boundaries subdivide.
    """
    bounds = ",".join(f"{v:.17g}" for v in boundaries)
    return (f"step={step} t={t} depth={depth:.17g} "
            f"range={carried[0]:.17g},{carried[1]:.17g} boundaries={bounds}")


def parse_trace_line(line: str) -> dict:
    fields = dict(part.split("=", 1) for part in line.split())
    return {
        "step": int(fields["step"]),
        "t": int(fields["t"]),
        "depth": float(fields["depth"]),
        "range": tuple(float(v) for v in fields["range"].split(",")),
        "boundaries": [float(v) for v in fields["boundaries"].split(",")],
    }
