"""Dense tensor operations with reverse-mode gradients.

Tensors are ``torch.Tensor`` objects; torch's autograd records the graph and
provides the reverse pass.  The forward operations below add the shape
contracts the rest of the package relies on (no implicit broadcasting except
over a leading batch) and a global precision switch.  ``finite_diff_check``
is the independent oracle for every gradient in the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_PRECISIONS = {"float64": torch.float64, "float32": torch.float32}
_dtype = torch.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_precision(mode: str) -> None:
    """Switch the engine between ``"float64"`` (gradient tests) and ``"float32"`` (training)."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]
    torch.set_default_dtype(_dtype)


def get_dtype() -> torch.dtype:
    return _dtype


class precision:
    """Context manager that temporarily changes the engine precision."""

    def __init__(self, mode: str):
        self.mode = mode

    def __enter__(self):
        self._saved = "float64" if _dtype == torch.float64 else "float32"
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=_dtype, requires_grad=requires_grad)


def _check_finite(x: Tensor, op: str) -> None:
    finite = torch.isfinite(x)
    if not bool(finite.all()):
        idx = tuple(int(i) for i in torch.nonzero(~finite)[0])
        raise NonFiniteError(f"{op}: non-finite input {x[idx].item()} at index {idx}")


# ---------------------------------------------------------------------------
# forward operations


def softmax(x: Tensor, axis: int = -1, mask: Tensor | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    Entries where ``mask`` is False are treated as -inf logits and get zero
    probability.  Every row must keep at least one allowed entry.
    """
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(x.shape)}")
    # two reductions instead of an elementwise isfinite pass; NaN propagates through both
    if not (math.isfinite(x.detach().amax().item()) and math.isfinite(x.detach().amin().item())):
        _check_finite(x, "softmax")
    if mask is not None:
        x = x.masked_fill(~mask, -math.inf)
    return torch.softmax(x, dim=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma * x + beta``."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm: zero-length normalized axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} do not match axis extent {n}"
        )
    mu = x.mean(dim=-1, keepdim=True)
    centered = x - mu
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gamma + beta


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product batched over leading extents.

    ``b`` may be a plain 2-D matrix shared over ``a``'s leading batch; any other
    leading-extent disagreement is an error.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {tuple(a.shape)} @ {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 over ``(B, C, H, W)`` maps.

    With ``stride=1`` the spatial extent is preserved.
    """
    if x.dim() != 4:
        raise ShapeError(f"conv2d_3x3: expected (B, C, H, W) input, got {tuple(x.shape)}")
    if kernel.dim() != 4 or kernel.shape[-2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernel must be (out, in, 3, 3), got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d_3x3: kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d_3x3: bias {tuple(bias.shape)} does not match {kernel.shape[0]} outputs")
    return F.conv2d(x, kernel, bias, stride=stride, padding=1)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map, ``weight`` is ``(out, in)``."""
    if x.dim() != 4 or weight.dim() != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_1x1: weight {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    return F.conv2d(x, weight[:, :, None, None], bias)


def _upsample_axis_bilinear(x: Tensor, axis: int) -> Tensor:
    # half-pixel centres: out[2j] = .75 x[j] + .25 x[j-1], out[2j+1] = .75 x[j] + .25 x[j+1]
    n = x.shape[axis]
    left = torch.cat([x.narrow(axis, 0, 1), x.narrow(axis, 0, n - 1)], dim=axis)
    right = torch.cat([x.narrow(axis, 1, n - 1), x.narrow(axis, n - 1, 1)], dim=axis)
    even = 0.75 * x + 0.25 * left
    odd = 0.75 * x + 0.25 * right
    out = torch.stack([even, odd], dim=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double both spatial extents of a ``(..., H, W)`` map."""
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"upsample2x: bad spatial extents {tuple(x.shape)}")
    if mode == "nearest":
        return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    if mode == "bilinear":
        return _upsample_axis_bilinear(_upsample_axis_bilinear(x, x.dim() - 2), x.dim() - 1)
    raise ValueError(f"upsample2x: unknown mode {mode!r}")


def resize_to(x: Tensor, size: Sequence[int], mode: str = "bilinear") -> Tensor:
    """Upsample by repeated doubling until the spatial extent equals ``size``."""
    h, w = x.shape[-2:]
    th, tw = size
    if (th, tw) == (h, w):
        return x
    fh, fw = th // h, tw // w
    if th % h or tw % w or fh != fw or fh & (fh - 1):
        raise ShapeError(f"resize_to: cannot reach {tuple(size)} from {(h, w)} by doubling")
    while x.shape[-1] < tw:
        x = upsample2x(x, mode)
    return x


# ---------------------------------------------------------------------------
# reverse mode


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_group: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        lines = [f"{name:40s} {err:.3e}" for name, err in self.per_group.items()]
        lines.append(f"max relative error {self.max_rel_error:.3e} (tol {self.tol:g}) -> "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _autograd(f: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    grad_fn: Callable[[Callable, Tensor], Tensor] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the reverse-mode gradient of scalar ``f`` at ``x`` with central differences.

    Every coordinate is perturbed.  ``grad_fn`` replaces the analytic gradient
    (used to inject faults); the relative error denominator is floored at
    ``floor`` so coordinates with vanishing gradient compare absolutely.
    """
    g = (grad_fn or _autograd)(f, x).detach().reshape(-1)
    base = x.detach().clone().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(base.numel()):
            orig = base[i].item()
            base[i] = orig + h
            fp = f(base.view_as(x)).item()
            base[i] = orig - h
            fm = f(base.view_as(x)).item()
            base[i] = orig
            worst = max(worst, _rel_err(g[i].item(), (fp - fm) / (2 * h), floor))
    return GradCheckReport(worst, tol, {"x": worst})


def finite_diff_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_dirs: int = 2,
    n_coords: int = 3,
    seed: int = 0,
    corrupt: float = 1.0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Gradient check for every named parameter tensor of a model.

    For each tensor the reverse-mode gradient is compared against central
    differences along ``n_dirs`` random unit directions and on the
    ``n_coords`` largest-magnitude coordinates.  ``corrupt`` scales the
    analytic gradient (negative control).
    """
    names = list(params)
    tensors = [params[n] for n in names]
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    per_group: dict[str, float] = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g * corrupt
            g = g.reshape(-1)
            probes = []
            for _ in range(n_dirs):
                v = torch.randn(p.numel(), generator=gen, dtype=p.dtype)
                probes.append(v / v.norm())
            for i in torch.argsort(g.abs(), descending=True)[:n_coords].tolist():
                e = torch.zeros(p.numel(), dtype=p.dtype)
                e[i] = 1.0
                probes.append(e)
            worst = 0.0
            flat = p.view(-1)
            saved = flat.clone()
            for v in probes:
                flat.add_(h * v)
                fp = loss_fn().item()
                flat.copy_(saved)
                flat.sub_(h * v)
                fm = loss_fn().item()
                flat.copy_(saved)
                worst = max(worst, _rel_err(float(g @ v), (fp - fm) / (2 * h), floor))
            per_group[name] = worst
    return GradCheckReport(max(per_group.values(), default=0.0), tol, per_group)
